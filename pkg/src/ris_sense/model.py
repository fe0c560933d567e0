"""The image classifier: three conv blocks, two fully connected layers.

Each block is conv(3x3, pad 1) -> batchnorm -> relu -> maxpool(2x2, s2), so
spatial dims halve per block while channels grow. The head flattens, applies
a hidden linear layer with relu and inverted dropout, then a linear output
layer; probabilities come from a stable softmax. At the default configuration
(3x224x224 input, channels 32/64/128, hidden 256, 3 classes) the model has
25,784,835 learnable scalars.

All math is float64. Checkpoints store parameters as little-endian float32
in a fixed documented order, so a save/load round trip perturbs values by at
most one float32 ulp.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import (
    BadMagicError,
    InvalidModeError,
    ShapeError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .layers import (
    BatchNorm2DLayer,
    BatchNormCache,
    Conv2DLayer,
    DropoutLayer,
    LinearLayer,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_apply,
    flatten,
    linear_backward,
    linear_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    softmax,
    softmax_cross_entropy,
    unflatten,
)
from .tensor import PortableRng, mix_seed

CHECKPOINT_MAGIC = b"CCNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. The defaults are the full-size model;
    tests use shrunken clones (small image, few channels) so the exact same
    code path can be gradient-checked end to end."""

    in_channels: int = 3
    image_size: int = 224
    conv_channels: tuple[int, ...] = (32, 64, 128)
    fc_width: int = 256
    n_classes: int = 3
    dropout_p: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        down = 2 ** len(self.conv_channels)
        if self.image_size % down:
            raise ShapeError(
                f"image_size {self.image_size} must be divisible by {down} "
                f"for {len(self.conv_channels)} pooling stages"
            )
        if self.image_size < down:
            raise ShapeError("image_size too small for the pooling stages")

    @property
    def feature_map_side(self) -> int:
        return self.image_size // 2 ** len(self.conv_channels)

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.feature_map_side**2


def glorot_uniform(rng: PortableRng, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform[-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(shape, -bound, bound)


@dataclass
class _BlockCache:
    x_in: np.ndarray
    cols: np.ndarray  # im2col of x_in from the forward, reused for grad_w
    bn_cache: BatchNormCache
    relu_mask: np.ndarray  # uint8 over the conv/bn output grid
    pool_argmax: np.ndarray


@dataclass
class ForwardCaches:
    blocks: list[_BlockCache]
    flat: np.ndarray
    fc1_mask: np.ndarray  # uint8
    fc2_in: np.ndarray  # post-relu, post-dropout hidden activations
    dropout_mask: np.ndarray | None
    logits: np.ndarray = field(repr=False, default=None)


class CcnnModel:
    """Owns the layer parameters and wires the forward/backward chain.

    ``mode`` controls batchnorm ("train" uses batch statistics and updates
    running averages, "eval" uses the stored averages). Dropout keeps its own
    mode so the two can be toggled independently.
    """

    def __init__(self, config: ModelConfig, seed: int, dtype: np.dtype = np.float64):
        self.config = config
        self.seed = seed
        self.mode = "eval"
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
            raise InvalidModeError(f"model dtype must be float64 or float32, got {dtype}")

        chans = (config.in_channels, *config.conv_channels)
        self.convs: list[Conv2DLayer] = []
        self.bns: list[BatchNorm2DLayer] = []
        # weight tensors draw from per-layer substreams in a fixed order:
        # conv blocks first (index 0..B-1), then the two linear layers.
        # draws always happen in float64 so both dtypes see the same values
        for i in range(len(config.conv_channels)):
            rng = PortableRng(mix_seed(seed, i))
            c_in, c_out = chans[i], chans[i + 1]
            w = glorot_uniform(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9, fan_out=c_out * 9)
            self.convs.append(
                Conv2DLayer(weights=w.astype(self.dtype), bias=np.zeros(c_out, self.dtype))
            )
            bn = BatchNorm2DLayer.create(c_out, eps=config.bn_eps, momentum=config.bn_momentum)
            bn.gamma = bn.gamma.astype(self.dtype)
            bn.beta = bn.beta.astype(self.dtype)
            bn.running_mean = bn.running_mean.astype(self.dtype)
            bn.running_var = bn.running_var.astype(self.dtype)
            self.bns.append(bn)
        b = len(config.conv_channels)
        rng = PortableRng(mix_seed(seed, b))
        self.fc1 = LinearLayer(
            weights=glorot_uniform(
                rng, (config.fc_width, config.flat_dim),
                fan_in=config.flat_dim, fan_out=config.fc_width,
            ).astype(self.dtype),
            bias=np.zeros(config.fc_width, self.dtype),
        )
        rng = PortableRng(mix_seed(seed, b + 1))
        self.fc2 = LinearLayer(
            weights=glorot_uniform(
                rng, (config.n_classes, config.fc_width),
                fan_in=config.fc_width, fan_out=config.n_classes,
            ).astype(self.dtype),
            bias=np.zeros(config.n_classes, self.dtype),
        )
        self.dropout = DropoutLayer(p=config.dropout_p, mode="eval")

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Learnable parameters in the canonical (checkpoint) order."""
        out: list[tuple[str, np.ndarray]] = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out.append((f"conv{i}.weights", conv.weights))
            out.append((f"conv{i}.bias", conv.bias))
            out.append((f"bn{i}.gamma", bn.gamma))
            out.append((f"bn{i}.beta", bn.beta))
        out.append(("fc1.weights", self.fc1.weights))
        out.append(("fc1.bias", self.fc1.bias))
        out.append(("fc2.weights", self.fc2.weights))
        out.append(("fc2.bias", self.fc2.bias))
        return out

    def running_stats(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for i, bn in enumerate(self.bns, start=1):
            out.append((f"bn{i}.running_mean", bn.running_mean))
            out.append((f"bn{i}.running_var", bn.running_var))
        return out

    @property
    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.parameters())

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise InvalidModeError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.dropout.mode = mode

    # -- forward ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        c, s = self.config.in_channels, self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ShapeError(f"model expects [N, {c}, {s}, {s}], got shape {x.shape}")
        # no-op when the dtype already matches and the array is contiguous
        return np.ascontiguousarray(x, dtype=self.dtype)

    def forward(self, x: np.ndarray, rng: PortableRng | None = None) -> np.ndarray:
        """Inference pass returning class probabilities [N, K].

        Batchnorm follows ``self.mode``; dropout follows its own mode and
        needs ``rng`` only when it is actually sampling (train mode, p > 0).
        """
        h = self._check_input(x)
        for conv, bn in zip(self.convs, self.bns):
            h = conv2d_forward(conv, h)
            h, _ = batchnorm2d_forward(bn, h, self.mode)
            h = np.maximum(h, 0.0)
            h, _ = maxpool2d_forward(h)
        h = flatten(h)
        h = np.maximum(linear_forward(self.fc1, h), 0.0)
        if self.dropout.mode == "train" and self.dropout.p > 0.0:
            if rng is None:
                raise InvalidModeError("dropout in train mode with p > 0 needs an rng")
            keep = rng.uniform(h.shape) >= self.dropout.p
            h = dropout_apply(h, keep, self.dropout.p)
        logits = linear_forward(self.fc2, h)
        return softmax(logits)

    def forward_train(self, x: np.ndarray, rng: PortableRng | None) -> ForwardCaches:
        """Training pass: batch-stat batchnorm, sampled dropout, full caches."""
        h = self._check_input(x)
        blocks: list[_BlockCache] = []
        for conv, bn in zip(self.convs, self.bns):
            x_in = h
            h, cols = conv2d_forward(conv, h, return_cols=True)
            h, bn_cache = batchnorm2d_forward(bn, h, "train")
            mask = (h > 0.0)
            h = h * mask
            h, argmax = maxpool2d_forward(h)
            blocks.append(
                _BlockCache(
                    x_in=x_in,
                    cols=cols,
                    bn_cache=bn_cache,
                    relu_mask=mask.astype(np.uint8),
                    pool_argmax=argmax,
                )
            )
        flat = flatten(h)
        fc1_out = linear_forward(self.fc1, flat)
        fc1_mask = (fc1_out > 0.0)
        hidden = fc1_out * fc1_mask
        if self.dropout.p > 0.0:
            if rng is None:
                raise InvalidModeError("training forward with dropout p > 0 needs an rng")
            keep = rng.uniform(hidden.shape) >= self.dropout.p
            fc2_in = dropout_apply(hidden, keep, self.dropout.p)
            drop_mask = keep
        else:
            fc2_in = hidden
            drop_mask = None
        logits = linear_forward(self.fc2, fc2_in)
        return ForwardCaches(
            blocks=blocks,
            flat=flat,
            fc1_mask=fc1_mask.astype(np.uint8),
            fc2_in=fc2_in,
            dropout_mask=drop_mask,
            logits=logits,
        )

    # -- backward -----------------------------------------------------------

    def backward(
        self, caches: ForwardCaches, grad_logits: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Exact gradients for every learnable parameter plus the input.

        Returns (grads keyed like :meth:`parameters`, grad wrt the input
        batch)."""
        g, gw2, gb2 = linear_backward(self.fc2, caches.fc2_in, grad_logits)
        if caches.dropout_mask is not None:
            g = dropout_apply(g, caches.dropout_mask, self.dropout.p)
        g = g * caches.fc1_mask
        g, gw1, gb1 = linear_backward(self.fc1, caches.flat, g)

        side = self.config.feature_map_side
        g4 = unflatten(g, (self.config.conv_channels[-1], side, side))

        grads: dict[str, np.ndarray] = {
            "fc1.weights": gw1, "fc1.bias": gb1,
            "fc2.weights": gw2, "fc2.bias": gb2,
        }
        for i in range(len(self.convs) - 1, -1, -1):
            blk = caches.blocks[i]
            g4 = maxpool2d_backward(blk.pool_argmax, g4)
            g4 = g4 * blk.relu_mask
            g4, ggamma, gbeta = batchnorm2d_backward(self.bns[i], blk.bn_cache, g4)
            g4, gw, gb = conv2d_backward(self.convs[i], blk.x_in, g4, cols=blk.cols)
            grads[f"conv{i + 1}.weights"] = gw
            grads[f"conv{i + 1}.bias"] = gb
            grads[f"bn{i + 1}.gamma"] = ggamma
            grads[f"bn{i + 1}.beta"] = gbeta
        return grads, g4

    def loss_and_grads(
        self, x: np.ndarray, labels: np.ndarray, rng: PortableRng | None
    ) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
        """One supervised step: (mean cross-entropy, probs, parameter grads)."""
        caches = self.forward_train(x, rng)
        loss, probs, grad_logits = softmax_cross_entropy(caches.logits, labels)
        grads, _ = self.backward(caches, grad_logits)
        return loss, probs, grads

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: str, extra: dict | None = None) -> None:
        """Binary layout: magic "CCNN" | u32 version | u32 header length |
        UTF-8 JSON header | float32 little-endian payload.

        Payload order is parameters() followed by running_stats(); counts are
        recorded in the header and verified on load.
        """
        params = self.parameters()
        stats = self.running_stats()
        payload = np.concatenate([a.ravel() for _, a in params + stats]).astype("<f4")
        header = {
            "config": asdict(self.config),
            "seed": self.seed,
            "learnable_count": int(sum(a.size for _, a in params)),
            "payload_count": int(payload.size),
            "extra": extra or {},
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(payload.tobytes())

    @classmethod
    def load_checkpoint(
        cls, path: str, dtype: np.dtype = np.float64
    ) -> tuple["CcnnModel", dict]:
        """Rebuild a model from a checkpoint; returns (model, header)."""
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
            raise BadMagicError(
                f"not a model checkpoint: expected magic {CHECKPOINT_MAGIC!r}"
            )
        if len(raw) < 12:
            raise TruncatedPayloadError("checkpoint ends inside the fixed header")
        version, header_len = struct.unpack("<II", raw[4:12])
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        if len(raw) < 12 + header_len:
            raise TruncatedPayloadError("checkpoint ends inside the JSON header")
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
        body = raw[12 + header_len :]
        want = header["payload_count"] * 4
        if len(body) != want:
            raise TruncatedPayloadError(
                f"payload holds {len(body)} bytes, header promises {want}"
            )
        cfg_dict = dict(header["config"])
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        config = ModelConfig(**cfg_dict)
        model = cls(config, seed=header.get("seed", 0), dtype=dtype)
        values = np.frombuffer(body, dtype="<f4").astype(model.dtype)
        cursor = 0
        for _, arr in model.parameters() + model.running_stats():
            chunk = values[cursor : cursor + arr.size]
            if chunk.size != arr.size:
                raise TruncatedPayloadError("payload does not cover all parameters")
            arr[...] = chunk.reshape(arr.shape)
            cursor += arr.size
        if cursor != values.size:
            raise TruncatedPayloadError(
                f"payload holds {values.size} values, model needs {cursor}"
            )
        return model, header


def clone_config(config: ModelConfig, **overrides) -> ModelConfig:
    """Convenience for building shrunken test clones of an architecture."""
    return replace(config, **overrides)
