"""Forward and backward passes for every layer of the classifier.

Conventions, fixed package-wide:

* activations are float64 arrays, images in NCHW order;
* "convolution" is cross-correlation (no kernel flip), zero padding 1,
  stride 1, kernel 3x3, so spatial dims are preserved;
* max-pool is 2x2 stride 2, ties resolved to the first element in row-major
  window order;
* dropout is inverted (survivors scaled by 1/(1-p)) so eval is the identity;
* every backward here returns exact gradients of the corresponding forward
  and is tested against the central finite-difference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCacheError,
    DegenerateBatchError,
    InvalidModeError,
    InvalidProbabilityError,
    LabelError,
    ShapeError,
)
from .tensor import PortableRng

# ---------------------------------------------------------------------------
# conv2d (3x3, stride 1, pad 1)


@dataclass
class Conv2DLayer:
    weights: np.ndarray  # [out_ch, in_ch, 3, 3]
    bias: np.ndarray  # [out_ch]

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ShapeError(f"conv weights must be [out, in, 3, 3], got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias must be [{self.weights.shape[0]}], got {self.bias.shape}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def _im2col3x3(xp: np.ndarray) -> np.ndarray:
    """[N, C, Hp, Wp] zero-padded input -> [(N*H*W), (C*9)] patch matrix.

    Column layout is (c, u, v) row-major, matching weights.reshape(out, -1).
    """
    n, c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # win: [N, C, H, W, 3, 3] view; bring to [N, H, W, C, 3, 3] then flatten
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    return cols


def conv2d_forward(
    layer: Conv2DLayer, x: np.ndarray, return_cols: bool = False
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Cross-correlate [N, C, H, W] with the layer's 3x3 kernels, pad 1.

    With return_cols the patch matrix comes back too, for reuse by
    conv2d_backward."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-d NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3x3(xp)
    w_mat = layer.weights.reshape(layer.out_channels, -1)
    y = cols @ w_mat.T
    y += layer.bias
    y = np.ascontiguousarray(y.reshape(n, h, w, layer.out_channels).transpose(0, 3, 1, 2))
    return (y, cols) if return_cols else y


def conv2d_backward(
    layer: Conv2DLayer,
    x: np.ndarray,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_w, grad_b) of the forward map above.

    `cols` may pass in the patch matrix of x from the forward pass; building
    it is the single most expensive step, so callers that kept it around
    should hand it back.
    """
    n, c, h, w = x.shape
    if grad_out.shape != (n, layer.out_channels, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, layer.out_channels, h, w)}"
        )
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = _im2col3x3(xp)
    g_mat = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, layer.out_channels)

    grad_b = g_mat.sum(axis=0)
    grad_w = (g_mat.T @ cols).reshape(layer.weights.shape)

    # input gradient: the adjoint of a pad-1 3x3 cross-correlation is another
    # pad-1 3x3 cross-correlation with the kernel flipped and channels swapped
    gp = np.pad(grad_out, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gcols = _im2col3x3(gp)
    w_adj = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
    grad_x = (gcols @ w_adj.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNorm2DLayer:
    gamma: np.ndarray  # [C]
    beta: np.ndarray  # [C]
    running_mean: np.ndarray  # [C]
    running_var: np.ndarray  # [C]
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNorm2DLayer":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray  # [C], 1/sqrt(var + eps)


def batchnorm2d_forward(
    layer: BatchNorm2DLayer, x: np.ndarray, mode: str
) -> tuple[np.ndarray, BatchNormCache | None]:
    """Normalize per channel. Train mode uses batch statistics over (N, H, W)
    and updates running stats as new = (1-m)*old + m*batch (biased variance);
    eval mode normalizes by the stored running statistics.

    Returns (output, cache); cache is None in eval mode.
    """
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm expects [N, {layer.channels}, H, W], got {x.shape}")
    if mode == "train":
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"train-mode batchnorm needs >= 2 elements per channel, got {m}"
            )
        mean = x.mean(axis=(0, 2, 3))
        x_hat = x - mean[None, :, None, None]
        # biased variance, computed on the centered copy we already paid for
        var = np.einsum("nchw,nchw->c", x_hat, x_hat) / m
        layer.running_mean = (1.0 - layer.momentum) * layer.running_mean + layer.momentum * mean
        layer.running_var = (1.0 - layer.momentum) * layer.running_var + layer.momentum * var
        inv_std = 1.0 / np.sqrt(var + layer.eps)
        x_hat *= inv_std[None, :, None, None]
        y = x_hat * layer.gamma[None, :, None, None]
        y += layer.beta[None, :, None, None]
        return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std)
    if mode == "eval":
        # fold the whole affine map into one scale and shift per channel
        scale = layer.gamma / np.sqrt(layer.running_var + layer.eps)
        shift = layer.beta - layer.running_mean * scale
        y = x * scale[None, :, None, None]
        y += shift[None, :, None, None]
        return y, None
    raise InvalidModeError(f"mode must be 'train' or 'eval', got {mode!r}")


def batchnorm2d_backward(
    layer: BatchNorm2DLayer, cache: BatchNormCache | None, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients through the train-mode normalization, including the
    coupling through the batch mean and variance."""
    if cache is None:
        raise InvalidModeError("batchnorm backward requires a train-mode forward cache")
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match cache {cache.x_hat.shape}"
        )
    x_hat = cache.x_hat
    m = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = np.einsum("nchw,nchw->c", grad_out, x_hat)
    # grad_x = gamma*inv_std * (g - mean(g) - x_hat*mean(g*x_hat)); the two
    # means reduce to the parameter gradients, so reuse them
    grad_x = grad_out - (grad_beta / m)[None, :, None, None]
    grad_x -= x_hat * (grad_gamma / m)[None, :, None, None]
    grad_x *= (layer.gamma * cache.inv_std)[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# relu


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Masks grad_out where x <= 0 (subgradient 0 at the kink)."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu backward shapes differ: {x.shape} vs {grad_out.shape}")
    return np.where(x > 0.0, grad_out, 0.0)


# ---------------------------------------------------------------------------
# max pooling 2x2 stride 2


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; returns (pooled, argmax).

    argmax holds per-window indices 0..3 in row-major window scan order
    ((0,0), (0,1), (1,0), (1,1)); ties go to the first maximum. Strict
    comparisons between the four strided corner views implement that rule
    without materializing a window tensor.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool input must be 4-d NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool needs even spatial dims, got {h}x{w}")
    tl = x[:, :, 0::2, 0::2]
    tr = x[:, :, 0::2, 1::2]
    bl = x[:, :, 1::2, 0::2]
    br = x[:, :, 1::2, 1::2]
    top = np.maximum(tl, tr)
    bot = np.maximum(bl, br)
    pooled = np.maximum(top, bot)
    arg_top = (tr > tl).astype(np.uint8)  # 0 or 1; tie keeps the earlier slot
    arg_bot = (br > bl).astype(np.uint8) + 2
    argmax = np.where(bot > top, arg_bot, arg_top)
    return pooled, argmax


def maxpool2d_backward(argmax: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Scatter grad_out to the argmax positions of the matching forward."""
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match grad {grad_out.shape}")
    if argmax.size and (argmax.max() > 3):
        raise CorruptCacheError("argmax cache holds indices outside 0..3")
    n, c, h2, w2 = grad_out.shape
    grad_x = np.zeros((n, c, h2 * 2, w2 * 2), dtype=grad_out.dtype)
    for k, (u, v) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        view = grad_x[:, :, u::2, v::2]
        np.copyto(view, grad_out, where=(argmax == k))
    return grad_x


# ---------------------------------------------------------------------------
# flatten


def flatten(x: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [N, C*H*W], row-major."""
    if x.ndim != 4:
        raise ShapeError(f"flatten expects 4-d NCHW, got shape {x.shape}")
    return x.reshape(x.shape[0], -1)


def unflatten(x: np.ndarray, chw: tuple[int, int, int]) -> np.ndarray:
    return x.reshape(x.shape[0], *chw)


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearLayer:
    weights: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"linear weights must be 2-d, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"linear bias must be [{self.weights.shape[0]}]")


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.weights.shape[1]:
        raise ShapeError(
            f"linear expects [N, {layer.weights.shape[1]}], got shape {x.shape}"
        )
    return x @ layer.weights.T + layer.bias


def linear_backward(
    layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], layer.weights.shape[0]):
        raise ShapeError(f"linear grad_out shape {grad_out.shape} mismatch")
    grad_x = grad_out @ layer.weights
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# dropout (inverted)


@dataclass
class DropoutLayer:
    p: float = 0.5
    mode: str = "train"
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise InvalidProbabilityError(f"dropout p must be in [0, 1), got {self.p}")


def dropout_forward(layer: DropoutLayer, x: np.ndarray, rng: PortableRng) -> np.ndarray:
    """Train mode zeroes each element with prob p and rescales survivors by
    1/(1-p); eval mode is the exact identity. The mask is cached on the layer."""
    if layer.mode == "eval":
        return x
    keep = rng.uniform(x.shape) >= layer.p
    layer.mask = keep
    return dropout_apply(x, keep, layer.p)


def dropout_apply(x: np.ndarray, mask: np.ndarray, p: float) -> np.ndarray:
    """Pure masked rescale, shared by forward and backward."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbabilityError(f"dropout p must be in [0, 1), got {p}")
    return x * mask / (1.0 - p)


def dropout_backward(mask: np.ndarray, grad_out: np.ndarray, p: float = 0.5) -> np.ndarray:
    if mask.shape != grad_out.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} mismatches grad {grad_out.shape}")
    return dropout_apply(grad_out, mask, p)


# ---------------------------------------------------------------------------
# softmax and cross-entropy


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax; each row sums to 1 and lies in (0, 1]."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax expects [N, K>=1], got shape {x.shape}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of softmax probabilities.

    Returns (loss, grad_logits) where grad_logits = (probs - onehot) / N is
    the gradient with respect to the logits that produced ``probs``.
    """
    n, k = probs.shape
    labels = _check_labels(labels, k)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused stable softmax + cross-entropy on logits.

    Returns (loss, probs, grad_logits). This is the training path; the loss
    uses log-sum-exp directly so huge logits cannot overflow.
    """
    n, k = logits.shape
    labels = _check_labels(labels, k)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    probs = np.exp(z - lse[:, None])
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, probs, grad / n
