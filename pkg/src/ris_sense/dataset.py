"""Dataset recipes: turn a channel campaign into labeled PNG image sets.

Four recipes, mirroring four data genres:

* measured        -- 72 images: 24 turntable angles per class, rendered
                     straight from the simulator.
* synthetic       -- 720 images: 240 augmented variants per class, grown
                     from one seed image per class per split.
* mixed_measured  -- 144 images: 96 measured + 48 slightly-noisy augmented
                     (2:1, keeping measured data in the majority).
* mixed_synthetic -- 725 images: 653 heavily-noisy augmented + 72 measured
                     (keeping noisy synthetic data in the majority).

Train/test splits are stratified 80/20 by class and assigned at the SOURCE
level: every source angle is placed in exactly one split, and augmented or
noisy variants inherit the split of the source image they derive from. No
test image ever descends from a train source, so augmentation cannot leak
training content into the test set.

Sub-seed streams (all derived with mix_seed from the recipe seed):
tag 101 -> per-class source split shuffle; tag 102 -> per-variant
augmentation/noise chain. Class totals that do not divide by three leave
their remainder with the lowest class indexes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from .augment import add_noise, augment
from .channel import SCENARIO_ORDER, ChannelSweep, EnvironmentProfile, sweep_to_cir
from .errors import (
    CapacityError,
    EmptySplitError,
    IngestionError,
    InvalidModeError,
    LabelError,
)
from .spectro import IMAGE_SIDE, SpectrogramImage, cir_to_spectrogram
from .tensor import PortableRng, mix_seed

RECIPES = ("measured", "synthetic", "mixed_measured", "mixed_synthetic")

RECIPE_SIZES = {
    "measured": 72,
    "synthetic": 720,
    "mixed_measured": 144,
    "mixed_synthetic": 725,
}

TRAIN_FRACTION = 0.8

_STREAM_SPLIT = 101
_STREAM_VARIANT = 102

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest file
    label: int
    provenance: str  # measured | augmented | noisy-augmented
    split: str  # train | test
    source_angle_deg: float


@dataclass
class DatasetManifest:
    recipe: str
    environment: str
    seed: int
    entries: list[ManifestEntry]

    def count(self, split: str | None = None, label: int | None = None) -> int:
        return sum(
            1
            for e in self.entries
            if (split is None or e.split == split)
            and (label is None or e.label == label)
        )


# ---------------------------------------------------------------------------
# PNG io


def save_png(pixels: np.ndarray, path: str) -> None:
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path!r}: {exc}") from exc
    if arr.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
        raise IngestionError(f"image {path!r} has shape {arr.shape}, "
                             f"expected {(IMAGE_SIDE, IMAGE_SIDE, 3)}")
    return arr


# ---------------------------------------------------------------------------
# manifest io


def write_manifest(manifest: DatasetManifest, directory: str) -> str:
    path = os.path.join(directory, MANIFEST_NAME)
    doc = {
        "recipe": manifest.recipe,
        "environment": manifest.environment,
        "seed": manifest.seed,
        "entries": [asdict(e) for e in manifest.entries],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"cannot read manifest {path!r}: {exc}") from exc
    entries = [ManifestEntry(**e) for e in doc["entries"]]
    return DatasetManifest(
        recipe=doc["recipe"],
        environment=doc["environment"],
        seed=doc["seed"],
        entries=entries,
    )


# ---------------------------------------------------------------------------
# recipe construction


def _campaign_lookup(campaign: list[ChannelSweep]) -> tuple[int, list[ChannelSweep]]:
    if len(campaign) % len(SCENARIO_ORDER):
        raise CapacityError("campaign does not cover all scenarios evenly")
    return len(campaign) // len(SCENARIO_ORDER), campaign


def _subsample_indexes(n_angles: int, need: int) -> list[int]:
    """`need` distinct angle indexes spread evenly over the sweep circle."""
    if need > n_angles:
        raise CapacityError(
            f"recipe needs {need} source angles per class, campaign has {n_angles}"
        )
    return [(j * n_angles) // need for j in range(need)]


def _split_pool(pool: list[int], seed: int, label: int) -> tuple[list[int], list[int]]:
    """Stratified source split: shuffle the class pool, take 80% for train."""
    rng = PortableRng(mix_seed(seed, _STREAM_SPLIT, label))
    perm = rng.permutation(len(pool))
    k = round(TRAIN_FRACTION * len(pool))
    train = sorted(pool[i] for i in perm[:k])
    test = sorted(pool[i] for i in perm[k:])
    return train, test


def _render_source(
    campaign: list[ChannelSweep], n_angles: int, label: int, angle_idx: int
) -> SpectrogramImage:
    sweep = campaign[label * n_angles + angle_idx]
    cir = sweep_to_cir(sweep, "hann")
    # slide the arrivals to mid-record: at delay ~0 they sit under the STFT
    # window's edge taper and render as a dim left-edge sliver
    cir = np.roll(cir, cir.size // 2)
    return cir_to_spectrogram(
        cir,
        label=label,
        environment=sweep.environment,
        source_angle_deg=sweep.angle_deg,
        seed=sweep.seed,
    )


def _random_variant(base: SpectrogramImage, rng: PortableRng) -> SpectrogramImage:
    """One randomized augmentation chain: coin-flip flips, then every
    parametric op with a parameter drawn from its documented range."""
    ops: list[str] = []
    flips = rng.uniform((2,))
    if flips[0] < 0.5:
        ops.append("hflip")
    if flips[1] < 0.5:
        ops.append("vflip")
    ops += ["rotate", "resize_crop", "saturation", "brightness", "contrast", "hue"]
    return augment(base, ops, rng)


def _variant_counts(total: int) -> tuple[int, int]:
    train = round(TRAIN_FRACTION * total)
    return train, total - train


def build_recipe(
    recipe: str,
    env: EnvironmentProfile,
    campaign: list[ChannelSweep],
    out_dir: str,
    seed: int,
) -> DatasetManifest:
    """Write one recipe's PNGs plus manifest.json under out_dir.

    Emission order is deterministic: class-major, split train-before-test,
    measured entries before derived ones, then variant index.
    """
    if recipe not in RECIPES:
        raise InvalidModeError(f"unknown recipe {recipe!r}")
    n_angles, campaign = _campaign_lookup(campaign)
    os.makedirs(out_dir, exist_ok=True)

    entries: list[ManifestEntry] = []
    counter = 0

    def emit(img: SpectrogramImage, split: str) -> None:
        nonlocal counter
        name = f"{img.label}_{img.provenance.replace('-', '_')}_{split}_{counter:04d}.png"
        save_png(img.pixels, os.path.join(out_dir, name))
        entries.append(
            ManifestEntry(
                path=name,
                label=img.label,
                provenance=img.provenance,
                split=split,
                source_angle_deg=img.source_angle_deg,
            )
        )
        counter += 1

    def emit_measured(label: int, pool_train: list[int], pool_test: list[int]) -> None:
        for split, pool in (("train", pool_train), ("test", pool_test)):
            for a_idx in pool:
                emit(_render_source(campaign, n_angles, label, a_idx), split)

    def emit_variants(
        label: int, seed_angle_idx: int, split: str, count: int,
        noise: str | None, start: int,
    ) -> int:
        """Grow `count` variants from one source angle; returns next index."""
        base = _render_source(campaign, n_angles, label, seed_angle_idx)
        for k in range(count):
            rng = PortableRng(mix_seed(seed, _STREAM_VARIANT, label, start + k))
            img = _random_variant(base, rng)
            if noise is not None:
                img = add_noise(img, noise, rng)
            emit(img, split)
        return start + count

    for label in range(len(SCENARIO_ORDER)):
        if recipe == "measured":
            pool = _subsample_indexes(n_angles, 24)
            train, test = _split_pool(pool, seed, label)
            emit_measured(label, train, test)

        elif recipe == "synthetic":
            pool = _subsample_indexes(n_angles, 24)
            train, test = _split_pool(pool, seed, label)
            n_train, n_test = _variant_counts(240)  # 192 / 48
            nxt = emit_variants(label, train[0], "train", n_train, None, 0)
            emit_variants(label, test[0], "test", n_test, None, nxt)

        elif recipe == "mixed_measured":
            pool = _subsample_indexes(n_angles, 32)
            train, test = _split_pool(pool, seed, label)
            emit_measured(label, train, test)
            n_train, n_test = _variant_counts(16)  # 13 / 3
            nxt = emit_variants(label, train[0], "train", n_train, "slight", 0)
            emit_variants(label, test[0], "test", n_test, "slight", nxt)

        elif recipe == "mixed_synthetic":
            pool = _subsample_indexes(n_angles, 24)
            train, test = _split_pool(pool, seed, label)
            emit_measured(label, train, test)
            # 653 = 218 + 218 + 217: the remainder shorts the last class
            per_class = 218 if label < 2 else 217
            n_train, n_test = _variant_counts(per_class)
            nxt = emit_variants(label, train[0], "train", n_train, "heavy", 0)
            emit_variants(label, test[0], "test", n_test, "heavy", nxt)

    manifest = DatasetManifest(
        recipe=recipe, environment=env.name, seed=seed, entries=entries
    )
    write_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# loading for the trainer


def load_split(
    manifest: DatasetManifest, base_dir: str, split: str
) -> tuple[np.ndarray, np.ndarray]:
    """All images of one split as (pixels uint8 [N, H, W, 3], labels int64).

    Kept in byte form; convert per batch with :func:`to_model_input` so a
    whole dataset stays small in memory.
    """
    picked = [e for e in manifest.entries if e.split == split]
    if not picked:
        raise EmptySplitError(f"manifest has no {split!r} entries")
    pixels = np.empty((len(picked), IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.uint8)
    labels = np.empty(len(picked), dtype=np.int64)
    for i, entry in enumerate(picked):
        pixels[i] = load_png(os.path.join(base_dir, entry.path))
        if not 0 <= entry.label < 3:
            raise LabelError(f"manifest label {entry.label} out of range")
        labels[i] = entry.label
    return pixels, labels


def to_model_input(pixels_u8: np.ndarray, dtype: np.dtype = np.float64) -> np.ndarray:
    """uint8 [N, H, W, 3] -> float [N, 3, H, W] scaled to [0, 1]."""
    x = np.ascontiguousarray(pixels_u8.transpose(0, 3, 1, 2)).astype(dtype)
    x /= 255.0
    return x
