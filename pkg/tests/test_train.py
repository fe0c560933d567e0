"""Optimizer math, training-loop determinism, and evaluation metrics."""

import os
import shutil

import numpy as np
import pytest

from ris_sense.channel import CHAMBER, SweepConfig, run_campaign
from ris_sense.dataset import DatasetManifest, build_recipe, read_manifest
from ris_sense.errors import (
    EmptySplitError,
    IngestionError,
    InvalidRangeError,
    ShapeError,
)
from ris_sense.model import CcnnModel, ModelConfig
from ris_sense.tensor import PortableRng
from ris_sense.train import (
    AdamState,
    EvalReport,
    TrainConfig,
    _balanced_order,
    adam_step,
    evaluate,
    train,
)

SEED = 7

pytestmark = pytest.mark.filterwarnings("error")


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Chamber measured recipe, built once for every training test."""
    campaign = run_campaign(CHAMBER, SweepConfig(), seed=SEED)
    d = tmp_path_factory.mktemp("trainset")
    build_recipe("measured", CHAMBER, campaign, str(d), SEED)
    return str(d)


@pytest.fixture(scope="session")
def manifest_path(dataset_dir):
    return os.path.join(dataset_dir, "manifest.json")


def fresh_model(seed=SEED):
    return CcnnModel(ModelConfig(), seed=seed, dtype=np.float32)


def param_bytes(model):
    return [arr.tobytes() for _, arr in model.parameters()]


# ---------------------------------------------------------------------------
# TrainConfig validation


class TestTrainConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.epochs == 30
        assert cfg.batch_size == 16

    def test_epochs_must_be_positive(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig(epochs=0)

    def test_batch_size_needs_two_for_batch_stats(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig(batch_size=1)

    def test_negative_lr_rejected(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig(lr=-1e-3)

    def test_betas_must_lie_in_unit_interval(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig(beta1=1.0)
        with pytest.raises(InvalidRangeError):
            TrainConfig(beta2=-0.1)

    def test_smoke_cap_must_be_positive(self):
        with pytest.raises(InvalidRangeError):
            TrainConfig(max_batches_per_epoch=0)


# ---------------------------------------------------------------------------
# Adam


def toy_params(rng):
    return [
        ("w", rng.normal((4, 3))),
        ("b", rng.normal((3,))),
    ]


class TestAdamStep:
    def test_zero_lr_is_bitwise_noop(self):
        rng = PortableRng(1)
        params = toy_params(rng)
        before = [arr.tobytes() for _, arr in params]
        grads = {name: rng.normal(arr.shape) for name, arr in params}
        state = AdamState.for_params(params)
        adam_step(params, grads, state, 1, TrainConfig(lr=0.0))
        assert [arr.tobytes() for _, arr in params] == before

    def test_first_step_matches_hand_evaluated_update(self):
        # t=1: m_hat = g, v_hat = g**2, update = lr * g / (|g| + eps)
        rng = PortableRng(2)
        params = toy_params(rng)
        old = {name: arr.copy() for name, arr in params}
        grads = {name: rng.normal(arr.shape) for name, arr in params}
        cfg = TrainConfig(lr=1e-3)
        adam_step(params, grads, AdamState.for_params(params), 1, cfg)
        for name, arr in params:
            g = grads[name]
            expect = cfg.lr * g / (np.abs(g) + cfg.eps)
            assert np.allclose(old[name] - arr, expect, rtol=1e-12, atol=0)

    def test_first_step_magnitude_is_roughly_lr(self):
        rng = PortableRng(3)
        params = toy_params(rng)
        old = {name: arr.copy() for name, arr in params}
        grads = {name: np.full(arr.shape, 0.37) for name, arr in params}
        cfg = TrainConfig(lr=1e-3)
        adam_step(params, grads, AdamState.for_params(params), 1, cfg)
        for name, arr in params:
            step = np.abs(old[name] - arr)
            assert np.all(np.abs(step - cfg.lr) < 1e-6)

    def test_zero_gradient_leaves_params_and_decays_moments(self):
        rng = PortableRng(4)
        params = toy_params(rng)
        state = AdamState.for_params(params)
        grads = {name: rng.normal(arr.shape) for name, arr in params}
        adam_step(params, grads, state, 1, TrainConfig())
        zeros = {name: np.zeros_like(arr) for name, arr in params}
        snapshot = [arr.tobytes() for _, arr in params]
        m_norms = [np.abs(state.m["w"]).sum()]
        for t in (2, 3, 4):
            adam_step(params, zeros, state, t, TrainConfig(lr=0.0))
            m_norms.append(np.abs(state.m["w"]).sum())
        assert [arr.tobytes() for _, arr in params] == snapshot
        assert all(b < a for a, b in zip(m_norms, m_norms[1:]))

    def test_step_index_starts_at_one(self):
        rng = PortableRng(5)
        params = toy_params(rng)
        grads = {name: np.zeros_like(arr) for name, arr in params}
        with pytest.raises(InvalidRangeError):
            adam_step(params, grads, AdamState.for_params(params), 0, TrainConfig())

    def test_mismatched_gradient_shape_rejected(self):
        rng = PortableRng(6)
        params = toy_params(rng)
        grads = {"w": np.zeros((4, 3)), "b": np.zeros((4,))}
        with pytest.raises(ShapeError):
            adam_step(params, grads, AdamState.for_params(params), 1, TrainConfig())

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            rng = PortableRng(7)
            params = toy_params(rng)
            grads = {name: rng.normal(arr.shape) for name, arr in params}
            state = AdamState.for_params(params)
            for t in (1, 2):
                adam_step(params, grads, state, t, TrainConfig())
            outs.append([arr.tobytes() for _, arr in params])
        assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# metric assembly (model predictions stubbed out)


def stub_eval(monkeypatch, labels, preds):
    """Run evaluate() against synthetic labels/predictions."""
    import ris_sense.train as train_mod

    manifest = DatasetManifest(
        recipe="measured", environment="chamber", seed=SEED, entries=()
    )
    monkeypatch.setattr(train_mod, "read_manifest", lambda path: manifest)
    monkeypatch.setattr(
        train_mod,
        "load_split",
        lambda man, base, split: (np.zeros((len(labels), 1, 1, 3), np.uint8), labels),
    )
    monkeypatch.setattr(train_mod, "_predict", lambda model, px, bs: preds)
    model = object.__new__(CcnnModel)  # never touched by the stubs
    model.mode = "eval"
    model.dropout = type("D", (), {"mode": "eval"})()
    return evaluate(model, "unused/manifest.json")


class TestMetricAssembly:
    def test_perfect_predictor(self, monkeypatch):
        labels = np.repeat(np.arange(3), 10).astype(np.int64)
        report = stub_eval(monkeypatch, labels, labels.copy())
        assert report.accuracy == 1.0
        assert np.array_equal(
            np.array(report.confusion), np.diag([10, 10, 10])
        )
        assert report.precision == [1.0, 1.0, 1.0]
        assert report.recall == [1.0, 1.0, 1.0]

    def test_uniform_random_predictor_near_chance(self, monkeypatch):
        # binomial 3-sigma bound at n=600: |acc - 1/3| <= 0.06
        labels = np.repeat(np.arange(3), 200).astype(np.int64)
        rng = PortableRng(8)
        preds = (rng.uniform((600,)) * 3).astype(np.int64)
        report = stub_eval(monkeypatch, labels, preds)
        assert abs(report.accuracy - 1.0 / 3.0) <= 0.06

    def test_confusion_rows_sum_to_class_counts(self, monkeypatch):
        labels = np.array([0] * 5 + [1] * 7 + [2] * 3, dtype=np.int64)
        rng = PortableRng(9)
        preds = (rng.uniform((15,)) * 3).astype(np.int64)
        report = stub_eval(monkeypatch, labels, preds)
        assert [sum(row) for row in report.confusion] == [5, 7, 3]

    def test_accuracy_is_trace_over_total(self, monkeypatch):
        labels = np.repeat(np.arange(3), 20).astype(np.int64)
        rng = PortableRng(10)
        preds = (rng.uniform((60,)) * 3).astype(np.int64)
        report = stub_eval(monkeypatch, labels, preds)
        trace = sum(report.confusion[k][k] for k in range(3))
        assert report.accuracy == trace / 60

    def test_absent_class_yields_zero_division_free_metrics(self, monkeypatch):
        labels = np.array([0, 0, 1, 1], dtype=np.int64)
        preds = np.array([0, 0, 0, 0], dtype=np.int64)
        report = stub_eval(monkeypatch, labels, preds)
        assert report.precision[2] == 0.0
        assert report.recall[2] == 0.0

    def test_report_round_trips_to_dict(self, monkeypatch):
        labels = np.repeat(np.arange(3), 4).astype(np.int64)
        report = stub_eval(monkeypatch, labels, labels.copy())
        d = report.to_dict()
        assert d["recipe"] == "measured"
        assert d["accuracy"] == 1.0
        assert EvalReport(**d).confusion == report.confusion


# ---------------------------------------------------------------------------
# evaluate() on a real model and dataset


class TestEvaluate:
    def test_inference_leaves_model_bitwise_untouched(self, manifest_path):
        model = fresh_model()
        model.set_mode("train")
        before = param_bytes(model)
        stats = [
            (bn.running_mean.tobytes(), bn.running_var.tobytes())
            for bn in model.bns
        ]
        evaluate(model, manifest_path)
        assert param_bytes(model) == before
        assert [
            (bn.running_mean.tobytes(), bn.running_var.tobytes())
            for bn in model.bns
        ] == stats
        assert model.mode == "train"
        assert model.dropout.mode == "train"

    def test_report_shape_against_manifest(self, manifest_path):
        model = fresh_model()
        manifest = read_manifest(manifest_path)
        report = evaluate(model, manifest_path)
        per_class = [manifest.count("test", c) for c in range(3)]
        assert [sum(row) for row in report.confusion] == per_class
        assert report.recipe == "measured"
        assert report.environment == "chamber"
        assert report.seed == SEED
        assert report.runtime_s > 0.0

    def test_seed_override(self, manifest_path):
        report = evaluate(fresh_model(), manifest_path, seed=123)
        assert report.seed == 123

    def test_empty_split_rejected(self, tmp_path, manifest_path):
        from ris_sense.dataset import write_manifest

        manifest = read_manifest(manifest_path)
        train_only = DatasetManifest(
            recipe=manifest.recipe,
            environment=manifest.environment,
            seed=manifest.seed,
            entries=tuple(e for e in manifest.entries if e.split == "train"),
        )
        write_manifest(train_only, str(tmp_path))
        for e in train_only.entries:
            src = os.path.join(os.path.dirname(manifest_path), e.path)
            shutil.copy(src, tmp_path / e.path)
        with pytest.raises(EmptySplitError):
            evaluate(fresh_model(), str(tmp_path / "manifest.json"))


# ---------------------------------------------------------------------------
# train()


def smoke_cfg(**kw):
    base = dict(epochs=1, batch_size=4, max_batches_per_epoch=1, seed=SEED)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainLoop:
    def test_zero_lr_training_changes_nothing(self, manifest_path):
        model = fresh_model()
        before = param_bytes(model)
        untrained_acc = evaluate(model, manifest_path).accuracy
        model, losses, report = train(model, manifest_path, smoke_cfg(lr=0.0))
        assert param_bytes(model) == before
        assert report.accuracy == untrained_acc
        assert len(losses) == 1

    def test_same_seed_same_curve_and_params(self, manifest_path):
        runs = []
        for _ in range(2):
            model, losses, _ = train(
                fresh_model(), manifest_path, smoke_cfg(epochs=2)
            )
            runs.append((losses, param_bytes(model)))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_loss_curve_length_is_epochs(self, manifest_path):
        _, losses, _ = train(fresh_model(), manifest_path, smoke_cfg(epochs=3))
        assert len(losses) == 3

    def test_shuffle_seed_changes_curve(self, manifest_path):
        _, a, _ = train(fresh_model(), manifest_path, smoke_cfg(epochs=2))
        _, b, _ = train(fresh_model(), manifest_path, smoke_cfg(epochs=2, seed=99))
        assert a != b

    def test_model_finishes_in_eval_mode(self, manifest_path):
        model, _, _ = train(fresh_model(), manifest_path, smoke_cfg())
        assert model.mode == "eval"
        assert model.dropout.mode == "eval"

    def test_unreadable_image_names_the_path(self, dataset_dir, tmp_path):
        clone = tmp_path / "broken"
        shutil.copytree(dataset_dir, clone)
        manifest = read_manifest(str(clone / "manifest.json"))
        victim = next(e.path for e in manifest.entries if e.split == "train")
        (clone / victim).write_bytes(b"not a png")
        with pytest.raises(IngestionError, match=victim):
            train(fresh_model(), str(clone / "manifest.json"), smoke_cfg())


# ---------------------------------------------------------------------------
# batch composition


class TestBalancedOrder:
    def order(self, labels, seed=0):
        return _balanced_order(np.asarray(labels), PortableRng(seed))

    def test_is_a_permutation(self):
        labels = np.repeat([0, 1, 2], 19)
        order = self.order(labels)
        assert sorted(order.tolist()) == list(range(57))

    def test_equal_classes_interleave_exactly(self):
        labels = np.repeat([0, 1, 2], 8)
        dealt = labels[self.order(labels)]
        assert dealt.tolist() == [0, 1, 2] * 8

    def test_unequal_classes_deal_until_exhausted(self):
        labels = np.asarray([0] * 5 + [1] * 2)
        dealt = labels[self.order(labels)]
        assert dealt.tolist() == [0, 1, 0, 1, 0, 0, 0]

    def test_every_batch_covers_every_class(self):
        labels = np.repeat([0, 1, 2], 19)
        order = self.order(labels, seed=3)
        for idx in np.array_split(order, -(-57 // 16)):
            counts = np.bincount(labels[idx], minlength=3)
            assert counts.min() >= 4  # 57/16 -> slices of 15/14, ~5 per class

    def test_batch_sizes_even_and_capped(self):
        order = self.order(np.repeat([0, 1, 2], 19), seed=1)
        sizes = [len(b) for b in np.array_split(order, -(-57 // 16))]
        assert sizes == [15, 14, 14, 14]
        assert max(sizes) <= 16

    def test_seed_changes_within_class_order_only(self):
        labels = np.repeat([0, 1, 2], 19)
        a = self.order(labels, seed=0)
        b = self.order(labels, seed=1)
        assert a.tolist() != b.tolist()
        assert labels[a].tolist() == labels[b].tolist()  # class pattern fixed
