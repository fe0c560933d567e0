"""Recipe x environment evaluation grid with CSV, JSON, and SVG reporting.

Twelve cells: each of the four dataset recipes trained and tested in each of
the three environment profiles. Reference accuracy columns carry the
published numbers for the same cell so the CSV reads side by side; they are
context, not a target this harness is graded against.

Byte-determinism contract: rerunning the grid with the same seed must
reproduce the CSV exactly. Wall-clock runtimes therefore live only in the
JSON report; the CSV's runtime_s column is left empty on purpose.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .channel import ENVIRONMENTS, SweepConfig, run_campaign
from .dataset import RECIPES, build_recipe, read_manifest
from .errors import InvalidModeError
from .model import CcnnModel, ModelConfig
from .train import EvalReport, TrainConfig, train

GRID_ENVIRONMENTS = ("chamber", "meeting", "hflab")

# Published accuracy (percent) for the same recipe/environment cell:
# reference CNN first, transfer-learned VGG16 second.
PAPER_REFERENCE_CNN = {
    ("measured", "chamber"): 99.9,
    ("measured", "meeting"): 95.0,
    ("measured", "hflab"): 86.0,
    ("synthetic", "chamber"): 94.0,
    ("synthetic", "meeting"): 93.0,
    ("synthetic", "hflab"): 92.0,
    ("mixed_measured", "chamber"): 94.0,
    ("mixed_measured", "meeting"): 94.0,
    ("mixed_measured", "hflab"): 93.0,
    ("mixed_synthetic", "chamber"): 88.0,
    ("mixed_synthetic", "meeting"): 88.0,
    ("mixed_synthetic", "hflab"): 86.0,
}
PAPER_REFERENCE_VGG16 = {
    ("measured", "chamber"): 64.0,
    ("measured", "meeting"): 71.0,
    ("measured", "hflab"): 29.0,
    ("synthetic", "chamber"): 51.2,
    ("synthetic", "meeting"): 50.0,
    ("synthetic", "hflab"): 38.0,
    ("mixed_measured", "chamber"): 86.0,
    ("mixed_measured", "meeting"): 86.0,
    ("mixed_measured", "hflab"): 75.0,
    ("mixed_synthetic", "chamber"): 88.0,
    ("mixed_synthetic", "meeting"): 88.0,
    ("mixed_synthetic", "hflab"): 85.5,
}

CSV_COLUMNS = (
    "recipe", "environment", "set_size", "train_n", "test_n", "accuracy",
    "paper_reference_cnn", "paper_reference_vgg16", "runtime_s", "seed",
)

_BAR_COLORS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52")


def resolve_workers(requested: int | None = None) -> int:
    """Worker cap: RIS_SENSE_THREADS wins, 0 or unset means auto."""
    raw = os.environ.get("RIS_SENSE_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise InvalidModeError(f"RIS_SENSE_THREADS must be an integer, got {raw!r}") from exc
    if cap < 0:
        raise InvalidModeError(f"RIS_SENSE_THREADS must be >= 0, got {cap}")
    auto = os.cpu_count() or 1
    if cap == 0:
        cap = auto
    if requested is None or requested <= 0:
        requested = auto
    return max(1, min(requested, cap))


@dataclass
class GridCell:
    recipe: str
    environment: str
    set_size: int = 0
    train_n: int = 0
    test_n: int = 0
    report: EvalReport | None = None
    losses: list[float] = field(default_factory=list)
    train_runtime_s: float = 0.0
    checkpoint: str = ""
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class GridResult:
    cells: list[GridCell]
    csv_path: str
    json_path: str
    svg_path: str


def _cell_dataset_dir(data_dir: str, env_name: str, recipe: str) -> str:
    return os.path.join(data_dir, f"{env_name}_{recipe}")


def _ensure_dataset(
    recipe: str, env_name: str, data_dir: str, seed: int, campaigns: dict
) -> str:
    """Build the cell's dataset unless a matching one is already on disk."""
    cell_dir = _cell_dataset_dir(data_dir, env_name, recipe)
    manifest_path = os.path.join(cell_dir, "manifest.json")
    if os.path.exists(manifest_path):
        existing = read_manifest(manifest_path)
        if (
            existing.recipe == recipe
            and existing.environment == env_name
            and existing.seed == seed
        ):
            return manifest_path
    env = ENVIRONMENTS[env_name]
    if env_name not in campaigns:
        campaigns[env_name] = run_campaign(env, SweepConfig(), seed=seed)
    build_recipe(recipe, env, campaigns[env_name], cell_dir, seed)
    return manifest_path


def _train_cell(
    cell: GridCell, manifest_path: str, ckpt_dir: str, cfg: TrainConfig
) -> None:
    manifest = read_manifest(manifest_path)
    cell.set_size = len(manifest.entries)
    cell.train_n = manifest.count(split="train")
    cell.test_n = manifest.count(split="test")

    model = CcnnModel(ModelConfig(), seed=cfg.seed, dtype=np.float32)
    t0 = time.perf_counter()
    model, losses, report = train(model, manifest_path, cfg)
    cell.train_runtime_s = time.perf_counter() - t0
    cell.losses = losses
    cell.report = report

    ckpt = os.path.join(ckpt_dir, f"{cell.environment}_{cell.recipe}.ccnn")
    model.save_checkpoint(
        ckpt, extra={"recipe": cell.recipe, "environment": cell.environment}
    )
    cell.checkpoint = ckpt


def run_grid(
    out_dir: str,
    seed: int = 42,
    epochs: int | None = None,
    batch_size: int | None = None,
    lr: float | None = None,
    max_batches: int | None = None,
    data_dir: str | None = None,
    workers: int | None = None,
) -> GridResult:
    """Train and evaluate all twelve cells; write CSV + JSON + SVG.

    A cell that raises is recorded as failed and the sweep continues.
    Datasets land in data_dir (default out_dir/data) and are reused when a
    manifest with the same recipe/environment/seed already exists there.
    """
    os.makedirs(out_dir, exist_ok=True)
    data_dir = data_dir or os.path.join(out_dir, "data")
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    defaults = TrainConfig()
    cfg = TrainConfig(
        epochs=epochs if epochs is not None else defaults.epochs,
        batch_size=batch_size if batch_size is not None else defaults.batch_size,
        lr=lr if lr is not None else defaults.lr,
        seed=seed,
        max_batches_per_epoch=max_batches,
    )

    cells = [
        GridCell(recipe=recipe, environment=env_name)
        for recipe in RECIPES
        for env_name in GRID_ENVIRONMENTS
    ]

    # datasets are built sequentially (deterministic bytes on disk), training
    # may fan out over a small worker pool
    manifest_paths: dict[int, str] = {}
    campaigns: dict[str, list] = {}
    for i, cell in enumerate(cells):
        try:
            manifest_paths[i] = _ensure_dataset(
                cell.recipe, cell.environment, data_dir, seed, campaigns
            )
        except Exception as exc:  # noqa: BLE001 - cell isolation is the point
            cell.error = f"dataset: {exc}"
    del campaigns

    def run_one(i: int) -> None:
        cell = cells[i]
        if cell.failed:
            return
        try:
            _train_cell(cell, manifest_paths[i], ckpt_dir, cfg)
        except Exception as exc:  # noqa: BLE001
            cell.error = f"train: {exc}"

    n_workers = resolve_workers(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(run_one, range(len(cells))))
    else:
        for i in range(len(cells)):
            run_one(i)

    csv_path = os.path.join(out_dir, "grid_results.csv")
    _write_csv(cells, seed, csv_path)
    json_path = os.path.join(out_dir, "grid_report.json")
    _write_json(cells, cfg, json_path)
    svg_path = os.path.join(out_dir, "grid_accuracy.svg")
    _write_svg(cells, svg_path)
    return GridResult(cells=cells, csv_path=csv_path, json_path=json_path, svg_path=svg_path)


# ---------------------------------------------------------------------------
# reporting


def _write_csv(cells: list[GridCell], seed: int, path: str) -> None:
    """One data row per cell. runtime_s stays empty: wall-clock output would
    break the byte-determinism contract (it lives in the JSON report)."""
    lines = [",".join(CSV_COLUMNS)]
    for cell in cells:
        key = (cell.recipe, cell.environment)
        acc = f"{cell.report.accuracy:.4f}" if cell.report else ""
        lines.append(
            ",".join(
                (
                    cell.recipe,
                    cell.environment,
                    str(cell.set_size),
                    str(cell.train_n),
                    str(cell.test_n),
                    acc,
                    f"{PAPER_REFERENCE_CNN[key]:.1f}",
                    f"{PAPER_REFERENCE_VGG16[key]:.1f}",
                    "",
                    str(seed),
                )
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(cells: list[GridCell], cfg: TrainConfig, path: str) -> None:
    """Top-level array, one item per cell: the full evaluation report's
    fields verbatim, plus the cell's bookkeeping and training config."""
    items = []
    for c in cells:
        if c.report is not None:
            item = c.report.to_dict()
        else:
            item = {
                "recipe": c.recipe,
                "environment": c.environment,
                "accuracy": None,
                "confusion": None,
                "precision": None,
                "recall": None,
                "runtime_s": None,
                "seed": cfg.seed,
            }
        key = (c.recipe, c.environment)
        item.update(
            {
                "set_size": c.set_size,
                "train_n": c.train_n,
                "test_n": c.test_n,
                "paper_reference_cnn": PAPER_REFERENCE_CNN[key],
                "paper_reference_vgg16": PAPER_REFERENCE_VGG16[key],
                "losses": c.losses,
                "train_runtime_s": c.train_runtime_s,
                "checkpoint": os.path.basename(c.checkpoint) if c.checkpoint else "",
                "error": c.error,
                "train_config": {
                    "epochs": cfg.epochs,
                    "batch_size": cfg.batch_size,
                    "lr": cfg.lr,
                    "beta1": cfg.beta1,
                    "beta2": cfg.beta2,
                    "eps": cfg.eps,
                    "shuffle": cfg.shuffle,
                    "max_batches_per_epoch": cfg.max_batches_per_epoch,
                },
            }
        )
        items.append(item)
    with open(path, "w") as fh:
        json.dump(items, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_svg(cells: list[GridCell], path: str) -> None:
    """Grouped bar chart, one group per environment, one bar per recipe.

    Plain SVG 1.1 markup with fixed float formatting so identical results
    serialize to identical bytes."""
    width, height = 720, 420
    left, right, top, bottom = 60, 20, 40, 70
    plot_w = width - left - right
    plot_h = height - top - bottom

    by_cell = {(c.recipe, c.environment): c for c in cells}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">Test accuracy by environment and recipe</text>',
    ]
    # y axis: 0..100 percent, gridline every 20
    for pct in range(0, 101, 20):
        y = top + plot_h * (1.0 - pct / 100.0)
        parts.append(
            f'<line x1="{left}" y1="{y:.1f}" x2="{width - right}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{pct}</text>'
        )
    parts.append(
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" '
        f'stroke="#333333" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{width - right}" '
        f'y2="{top + plot_h}" stroke="#333333" stroke-width="1"/>'
    )

    n_groups = len(GRID_ENVIRONMENTS)
    group_w = plot_w / n_groups
    bar_w = group_w / (len(RECIPES) + 1)
    for gi, env_name in enumerate(GRID_ENVIRONMENTS):
        gx = left + gi * group_w
        for ri, recipe in enumerate(RECIPES):
            cell = by_cell[(recipe, env_name)]
            x = gx + bar_w * (ri + 0.5)
            if cell.report is None:
                label, bar_h = "x", 0.0
            else:
                pct = cell.report.accuracy * 100.0
                label, bar_h = f"{pct:.1f}", plot_h * pct / 100.0
            y = top + plot_h - bar_h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                f'height="{bar_h:.1f}" fill="{_BAR_COLORS[ri]}"/>'
            )
            parts.append(
                f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{label}</text>'
            )
        parts.append(
            f'<text x="{gx + group_w / 2:.1f}" y="{top + plot_h + 18}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="13">{env_name}</text>'
        )
    # legend along the bottom
    lx = left
    ly = height - 28
    for ri, recipe in enumerate(RECIPES):
        parts.append(
            f'<rect x="{lx}" y="{ly}" width="12" height="12" fill="{_BAR_COLORS[ri]}"/>'
        )
        parts.append(
            f'<text x="{lx + 16}" y="{ly + 10}" font-family="sans-serif" '
            f'font-size="12">{recipe}</text>'
        )
        lx += 16 + 8 * len(recipe) + 40
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
