"""Dense tensor construction, a portable deterministic RNG, and the
finite-difference gradient oracle that every backward pass is checked against.

Tensors throughout the package are plain C-contiguous float64 numpy arrays
(row-major flattening is the one canonical layout). Checkpoints downcast to
float32 on disk; all in-process math stays in float64 so central-difference
gradient checks at small steps remain trustworthy.

The RNG is splitmix64. Its full recurrence, also documented in the README:

    state_{n+1} = state_n + 0x9E3779B97F4A7C15           (mod 2^64)
    z = state_{n+1}
    z = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9           (mod 2^64)
    z = (z XOR (z >> 27)) * 0x94D049BB133111EB           (mod 2^64)
    output_n = z XOR (z >> 31)

Because the state advances by a fixed gamma, a block of n draws is the
scramble of ``state + [1..n] * gamma``, which vectorizes exactly in uint64.
Uniform doubles take the top 53 bits: ``(out >> 11) * 2**-53`` in [0, 1).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidRangeError, NumericError, ShapeError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_DOUBLE_SCALE = 2.0 ** -53


def _scramble(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function applied elementwise to uint64 states."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def mix_seed(seed: int, *indices: int) -> int:
    """Derive a sub-seed from a master seed and integer indices.

    Rule (documented, fixed): fold each index into the state with the
    splitmix64 gamma and scramble, i.e.
    ``h := scramble(h + gamma + index)`` starting from ``h = scramble(seed)``.
    Used to give campaign cells, dataset entries, and grid cells independent
    deterministic streams.
    """
    with np.errstate(over="ignore"):
        h = _scramble(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        for idx in indices:
            h = _scramble(h + _GAMMA + np.uint64(idx & 0xFFFFFFFFFFFFFFFF))
    return int(h)


class PortableRng:
    """splitmix64 stream with vectorized block draws.

    Single-owner: share nothing, derive sub-seeded children via
    :func:`mix_seed` instead. Identical seed gives the identical sequence on
    every platform (pure uint64 arithmetic, no libm involved).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._state = np.uint64(self.seed)

    def next_raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 outputs, advancing the state by ``n`` steps."""
        if n < 0:
            raise InvalidRangeError(f"draw count must be >= 0, got {n}")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA
            out = _scramble(self._state + steps)
            self._state = (self._state + np.uint64(n) * _GAMMA) & _U64
        return out

    def uniform(self, shape: Sequence[int] | int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Uniform draws in [lo, hi), i.i.d. per element."""
        if not lo < hi:
            raise InvalidRangeError(f"uniform range is empty: lo={lo!r}, hi={hi!r}")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.next_raw(n) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
        return (lo + u * (hi - lo)).reshape(shape)

    def normal(self, shape: Sequence[int] | int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard Box-Muller gaussians; draws an even uniform count, truncates."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        half = (n + 1) // 2
        u = (self.next_raw(2 * half) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
        u1 = 1.0 - u[:half]  # in (0, 1], keeps log() finite
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, n_values: int, count: int) -> np.ndarray:
        """``count`` integers uniform on [0, n_values) via floor(u * n)."""
        if n_values <= 0:
            raise InvalidRangeError(f"n_values must be positive, got {n_values}")
        u = (self.next_raw(count) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
        return np.minimum((u * n_values).astype(np.int64), n_values - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n), driven by this stream."""
        perm = np.arange(n)
        if n > 1:
            u = (self.next_raw(n - 1) >> np.uint64(11)).astype(np.float64) * _DOUBLE_SCALE
            for i in range(n - 1, 0, -1):
                j = min(int(u[n - 1 - i] * (i + 1)), i)
                perm[i], perm[j] = perm[j], perm[i]
        return perm


def validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def tensor_new(shape: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Fresh float64 tensor of the given shape, every element == fill."""
    return np.full(validate_shape(shape), float(fill), dtype=np.float64)


def rng_uniform(rng: PortableRng, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
    """Uniform [lo, hi) tensor drawn from ``rng`` (state advances)."""
    return rng.uniform(validate_shape(shape), lo, hi)


def flat_index(shape: Sequence[int], multi: Sequence[int]) -> int:
    """Row-major flattening of a multi-index."""
    try:
        return int(np.ravel_multi_index(tuple(multi), tuple(shape)))
    except ValueError as exc:
        raise ShapeError(f"multi-index {tuple(multi)} invalid for shape {tuple(shape)}") from exc


def multi_index(shape: Sequence[int], flat: int) -> tuple[int, ...]:
    """Inverse of :func:`flat_index`."""
    try:
        return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))
    except ValueError as exc:
        raise ShapeError(f"flat index {flat} invalid for shape {tuple(shape)}") from exc


def assert_finite(x: np.ndarray | float, what: str = "value") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what} encountered")


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    Element k is (f(x + step*e_k) - f(x - step*e_k)) / (2*step). This is the
    independent oracle every hand-written backward pass is compared against;
    it never calls any analytic backward code.
    """
    if step <= 0:
        raise InvalidRangeError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f evaluated non-finite near element {k}")
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1e-12, |a|, |b|), elementwise, reduced to scalar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-12, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
