"""Shared session fixtures.

The smoke-scale grid pair is the expensive one: it renders every recipe's
PNGs for all three environments once into a shared dataset cache, then runs
the full 12-cell grid twice. Grid orchestration tests, CLI round-trip tests,
and the determinism acceptance checks all read from the same pair instead of
paying that cost repeatedly.
"""

from dataclasses import dataclass

import pytest

from ris_sense.grid import GridResult, run_grid

GRID_SEED = 11
GRID_SMOKE = dict(epochs=1, batch_size=4, max_batches=1, workers=1)


@dataclass
class GridRuns:
    data_dir: str
    outs: list[tuple[str, GridResult]]
    seed: int


@pytest.fixture(scope="session")
def grid_runs(tmp_path_factory) -> GridRuns:
    """The same smoke grid twice, sharing one dataset directory."""
    data_dir = str(tmp_path_factory.mktemp("grid_data"))
    outs = []
    for name in ("run_a", "run_b"):
        out = str(tmp_path_factory.mktemp(name))
        result = run_grid(out, seed=GRID_SEED, data_dir=data_dir, **GRID_SMOKE)
        outs.append((out, result))
    return GridRuns(data_dir=data_dir, outs=outs, seed=GRID_SEED)
