"""Finite-difference verification of every analytic backward pass.

Each check builds a small random problem, runs the analytic backward once,
and compares against central differences of the matching forward-only loss.
Probe points are kept away from ReLU kinks and pooling ties, where the true
gradient is discontinuous and finite differences are meaningless.

Errors are scaled max deviations: max |analytic - numeric| divided by
max(1e-4, |analytic|_max, |numeric|_max). The 1e-4 floor keeps truly-zero
gradient pairs from being graded on the oracle's ~1e-11 arithmetic noise.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import (
    BatchNorm2DLayer,
    Conv2DLayer,
    LinearLayer,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    linear_backward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    softmax_cross_entropy,
)
from .model import CcnnModel, ModelConfig
from .tensor import PortableRng, finite_diff_grad

MODULES = ("conv", "bn", "pool", "linear", "softmax", "model")

LAYER_TOL = 1e-6
MODEL_TOL = 1e-5

# tiny clone of the real architecture: same code path, desk-scale cost.
# dropout off: its mask is resampled per forward, so the finite-difference
# oracle would be probing a different random function at every evaluation.
REDUCED_CONFIG = ModelConfig(
    in_channels=3, image_size=8, conv_channels=(2, 3, 4), fc_width=5, dropout_p=0.0
)


def _scaled_max_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(1e-4, float(np.abs(a).max()), float(np.abs(b).max()))
    return float(np.abs(a - b).max()) / denom


def _probe_param(
    analytic: np.ndarray, param: np.ndarray, loss: Callable[[], float]
) -> float:
    """Central-difference the loss with respect to one parameter array.

    ``loss`` closes over the layer owning ``param``; each probe writes the
    perturbed values into the array, evaluates, and restores.
    """

    def f(flat: np.ndarray) -> float:
        saved = param.copy()
        param[...] = flat.reshape(param.shape)
        try:
            return loss()
        finally:
            param[...] = saved

    fd = finite_diff_grad(f, param.ravel().copy())
    return _scaled_max_err(analytic, fd)


def check_conv(seed: int = 0) -> float:
    rng = PortableRng(seed + 101)
    layer = Conv2DLayer(
        weights=rng.uniform((3, 2, 3, 3), -0.5, 0.5),
        bias=rng.uniform((3,), -0.1, 0.1),
    )
    x = rng.uniform((2, 2, 5, 5), -1.0, 1.0)
    target = rng.uniform((2, 3, 5, 5), -1.0, 1.0)

    def loss_from(v: np.ndarray) -> float:
        y = conv2d_forward(layer, v)
        return 0.5 * float(((y - target) ** 2).sum())

    y = conv2d_forward(layer, x)
    gx, gw, gb = conv2d_backward(layer, x, y - target)

    worst = _scaled_max_err(
        gx, finite_diff_grad(lambda v: loss_from(v.reshape(x.shape)), x.ravel().copy())
    )
    worst = max(worst, _probe_param(gw, layer.weights, lambda: loss_from(x)))
    worst = max(worst, _probe_param(gb, layer.bias, lambda: loss_from(x)))
    return worst


def check_bn(seed: int = 0) -> float:
    rng = PortableRng(seed + 202)
    layer = BatchNorm2DLayer.create(3)
    layer.gamma[:] = rng.uniform((3,), 0.5, 1.5)
    layer.beta[:] = rng.uniform((3,), -0.5, 0.5)
    x = rng.uniform((4, 3, 4, 4), -1.0, 1.0)
    target = rng.uniform((4, 3, 4, 4), -1.0, 1.0)

    def loss_from(v: np.ndarray) -> float:
        # train-mode forward mutates running stats; undo so every probe sees
        # the identical layer state
        saved = layer.running_mean, layer.running_var
        y, _ = batchnorm2d_forward(layer, v, "train")
        layer.running_mean, layer.running_var = saved
        return 0.5 * float(((y - target) ** 2).sum())

    saved = layer.running_mean, layer.running_var
    y, cache = batchnorm2d_forward(layer, x, "train")
    layer.running_mean, layer.running_var = saved
    gx, gg, gb = batchnorm2d_backward(layer, cache, y - target)

    worst = _scaled_max_err(
        gx, finite_diff_grad(lambda v: loss_from(v.reshape(x.shape)), x.ravel().copy())
    )
    worst = max(worst, _probe_param(gg, layer.gamma, lambda: loss_from(x)))
    worst = max(worst, _probe_param(gb, layer.beta, lambda: loss_from(x)))
    return worst


def check_pool(seed: int = 0) -> float:
    rng = PortableRng(seed + 303)
    # distinct integers separated by >= 1: small probes never flip the argmax,
    # so the pooled map is exactly linear around the probe point
    x = rng.permutation(2 * 3 * 6 * 6).astype(np.float64).reshape(2, 3, 6, 6)
    target = rng.uniform((2, 3, 3, 3), -1.0, 1.0)

    pooled, argmax = maxpool2d_forward(x)
    gx = maxpool2d_backward(argmax, pooled - target)

    def loss(v: np.ndarray) -> float:
        p, _ = maxpool2d_forward(v.reshape(x.shape))
        return 0.5 * float(((p - target) ** 2).sum())

    return _scaled_max_err(gx, finite_diff_grad(loss, x.ravel().copy(), step=1e-3))


def check_linear(seed: int = 0) -> float:
    rng = PortableRng(seed + 404)
    layer = LinearLayer(
        weights=rng.uniform((4, 6), -0.5, 0.5), bias=rng.uniform((4,), -0.1, 0.1)
    )
    x = rng.uniform((3, 6), -1.0, 1.0)
    target = rng.uniform((3, 4), -1.0, 1.0)

    def loss_from(v: np.ndarray) -> float:
        y = linear_forward(layer, v)
        return 0.5 * float(((y - target) ** 2).sum())

    y = linear_forward(layer, x)
    gx, gw, gb = linear_backward(layer, x, y - target)

    worst = _scaled_max_err(
        gx, finite_diff_grad(lambda v: loss_from(v.reshape(x.shape)), x.ravel().copy())
    )
    worst = max(worst, _probe_param(gw, layer.weights, lambda: loss_from(x)))
    worst = max(worst, _probe_param(gb, layer.bias, lambda: loss_from(x)))
    return worst


def check_softmax(seed: int = 0) -> float:
    rng = PortableRng(seed + 505)
    logits = rng.uniform((5, 3), -2.0, 2.0)
    labels = np.array([0, 2, 1, 1, 0])

    _, _, grad_logits = softmax_cross_entropy(logits, labels)
    fd = finite_diff_grad(
        lambda v: softmax_cross_entropy(v.reshape(logits.shape), labels)[0],
        logits.ravel().copy(),
    )
    return _scaled_max_err(grad_logits, fd)


def check_model(seed: int = 0) -> float:
    """End-to-end check through all three blocks and both fc layers."""
    model = CcnnModel(REDUCED_CONFIG, seed=seed + 606)
    rng = PortableRng(seed + 707)
    x = rng.uniform((4, 3, 8, 8), 0.05, 1.0)
    labels = np.array([0, 1, 2, 1])

    _, _, grads = model.loss_and_grads(x, labels, None)

    def loss() -> float:
        caches = model.forward_train(x, None)
        return softmax_cross_entropy(caches.logits, labels)[0]

    worst = 0.0
    for name, param in model.parameters():
        worst = max(worst, _probe_param(grads[name], param, loss))
    return worst


CHECKS: dict[str, tuple[Callable[[int], float], float]] = {
    "conv": (check_conv, LAYER_TOL),
    "bn": (check_bn, LAYER_TOL),
    "pool": (check_pool, LAYER_TOL),
    "linear": (check_linear, LAYER_TOL),
    "softmax": (check_softmax, LAYER_TOL),
    "model": (check_model, MODEL_TOL),
}


def run_gradcheck(module: str = "all", seed: int = 0) -> dict[str, tuple[float, float]]:
    """Run one named check or all of them.

    Returns ``{name: (max scaled error, tolerance)}`` in declaration order.
    """
    names = MODULES if module == "all" else (module,)
    return {name: (CHECKS[name][0](seed), CHECKS[name][1]) for name in names}
