"""Training and evaluation harness: Adam, epoch loop, confusion reports.

The loop is deliberately plain: one Adam step per batch, per-epoch mean loss
recorded. Batches are class-balanced and cut as evenly as possible (never
above the configured batch size): each epoch shuffles every class's indices
and deals them round-robin before slicing. On sets this small that matters.
A skewed batch, in the worst case missing a class outright, gives batchnorm
lopsided statistics and the optimizer a gradient that points away from the
missing class; one such batch early in training shows up as a visible bump
in the loss curve.

All randomness (shuffling, dropout) derives from the config seed through
fixed sub-stream tags, so a rerun with the same seed reproduces every step
bit for bit.

Sub-seed streams: tag 201 -> per-epoch shuffle; tag 202 -> dropout draws.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import load_split, read_manifest, to_model_input
from .errors import InvalidRangeError, LabelError, ShapeError
from .model import CcnnModel
from .tensor import PortableRng, mix_seed

_STREAM_SHUFFLE = 201
_STREAM_DROPOUT = 202

N_CLASSES = 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    shuffle: bool = True
    max_batches_per_epoch: int | None = None  # smoke-run cap; None = no cap

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidRangeError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidRangeError(
                f"batch_size must be >= 2 (batch statistics), got {self.batch_size}"
            )
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise InvalidRangeError("adam betas must lie in [0, 1)")
        if self.lr < 0.0:
            raise InvalidRangeError(f"lr must be >= 0, got {self.lr}")
        if self.max_batches_per_epoch is not None and self.max_batches_per_epoch < 1:
            raise InvalidRangeError("max_batches_per_epoch must be >= 1 or None")


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter list."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: list[tuple[str, np.ndarray]]) -> "AdamState":
        state = cls()
        for name, arr in params:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(
    params: list[tuple[str, np.ndarray]],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    cfg: TrainConfig,
) -> None:
    """One Adam update, in place on the parameter arrays.

    t counts steps from 1 (bias correction needs it). With lr == 0 the
    moments still advance but every parameter stays bitwise unchanged.
    """
    if t < 1:
        raise InvalidRangeError(f"adam step index must be >= 1, got {t}")
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, arr in params:
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(
                f"gradient for {name} has shape {g.shape}, parameter is {arr.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        update = (cfg.lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
        arr -= update


@dataclass
class EvalReport:
    recipe: str
    environment: str
    accuracy: float
    confusion: list[list[int]]  # confusion[true][pred]
    precision: list[float]  # per class; 0.0 when the class was never predicted
    recall: list[float]  # per class; 0.0 when the class has no test items
    runtime_s: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe,
            "environment": self.environment,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "precision": self.precision,
            "recall": self.recall,
            "runtime_s": self.runtime_s,
            "seed": self.seed,
        }


def _predict(model: CcnnModel, pixels_u8: np.ndarray, batch_size: int) -> np.ndarray:
    preds = np.empty(len(pixels_u8), dtype=np.int64)
    for lo in range(0, len(pixels_u8), batch_size):
        batch = to_model_input(pixels_u8[lo : lo + batch_size], dtype=model.dtype)
        probs = model.forward(batch)
        preds[lo : lo + len(batch)] = probs.argmax(axis=1)
    return preds


def evaluate(
    model: CcnnModel,
    manifest_path: str,
    split: str = "test",
    batch_size: int = 16,
    seed: int | None = None,
) -> EvalReport:
    """Run the model over one split and tabulate a confusion report.

    Inference only: parameters, running statistics, and modes are restored
    untouched (verified bitwise by the test suite).
    """
    t0 = time.perf_counter()
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    pixels, labels = load_split(manifest, base, split)

    prev_mode, prev_drop = model.mode, model.dropout.mode
    model.set_mode("eval")
    try:
        preds = _predict(model, pixels, batch_size)
    finally:
        model.mode, model.dropout.mode = prev_mode, prev_drop

    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for true, pred in zip(labels, preds):
        confusion[true, pred] += 1
    if confusion.sum() != len(labels):
        raise LabelError("confusion matrix lost samples")

    diag = np.diag(confusion)
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    precision = [float(diag[k] / col[k]) if col[k] else 0.0 for k in range(N_CLASSES)]
    recall = [float(diag[k] / row[k]) if row[k] else 0.0 for k in range(N_CLASSES)]
    return EvalReport(
        recipe=manifest.recipe,
        environment=manifest.environment,
        accuracy=float(diag.sum() / confusion.sum()),
        confusion=confusion.tolist(),
        precision=precision,
        recall=recall,
        runtime_s=time.perf_counter() - t0,
        seed=manifest.seed if seed is None else seed,
    )


def _balanced_order(labels: np.ndarray, rng: PortableRng) -> np.ndarray:
    """Class-balanced epoch order: shuffle within each class, deal round-robin.

    Consecutive slices of the result hold near-equal counts of every class,
    so no batch is ever starved of one.
    """
    queues = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    queues = [q[rng.permutation(q.size)] for q in queues]
    order = np.empty(labels.size, dtype=np.int64)
    pos = 0
    for r in range(max(q.size for q in queues)):
        for q in queues:
            if r < q.size:
                order[pos] = q[r]
                pos += 1
    return order


def train(
    model: CcnnModel,
    manifest_path: str,
    cfg: TrainConfig,
) -> tuple[CcnnModel, list[float], EvalReport]:
    """Fit the model on the manifest's train split, then report on test.

    Batches are sliced from a class-balanced order into ceil(n / batch_size)
    near-equal pieces, so every batch stays at or under cfg.batch_size and no
    tiny remainder batch is left to skew the batch statistics.

    Returns (model, per-epoch mean losses, final test report).
    """
    manifest = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    pixels, labels = load_split(manifest, base, "train")
    n = len(labels)

    params = model.parameters()
    state = AdamState.for_params(params)
    dropout_rng = PortableRng(mix_seed(cfg.seed, _STREAM_DROPOUT))

    model.set_mode("train")
    losses: list[float] = []
    t = 0
    for epoch in range(cfg.epochs):
        if cfg.shuffle:
            rng = PortableRng(mix_seed(cfg.seed, _STREAM_SHUFFLE, epoch))
            order = _balanced_order(labels, rng)
        else:
            order = np.arange(n)
        epoch_loss = 0.0
        seen = 0
        n_batches = 0
        for idx in np.array_split(order, -(-n // cfg.batch_size)):
            if len(idx) < 2:
                continue  # batch statistics need at least two samples
            x = to_model_input(pixels[idx], dtype=model.dtype)
            loss, _, grads = model.loss_and_grads(x, labels[idx], dropout_rng)
            t += 1
            adam_step(params, grads, state, t, cfg)
            epoch_loss += float(loss) * len(idx)
            seen += len(idx)
            n_batches += 1
            if cfg.max_batches_per_epoch and n_batches >= cfg.max_batches_per_epoch:
                break
        losses.append(epoch_loss / max(seen, 1))

    model.set_mode("eval")
    report = evaluate(model, manifest_path, "test", cfg.batch_size, seed=cfg.seed)
    return model, losses, report
