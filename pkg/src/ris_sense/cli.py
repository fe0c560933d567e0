"""Command-line front end for the whole pipeline.

Subcommands mirror the workflow: simulate a sweep campaign, build a dataset
recipe from it, train, evaluate, run the full 12-cell grid, or verify the
backward passes against finite differences.

Exit codes: 0 success, 1 usage error (argparse message on stderr), 2 runtime
failure (typed "ErrorClass: message" on stderr). Every run prints the seed
it resolved so any result can be reproduced from its log.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .channel import (
    ENVIRONMENTS,
    SCENARIO_ORDER,
    SweepConfig,
    load_sweep,
    run_campaign,
    save_sweep,
)
from .dataset import RECIPES, build_recipe
from .errors import (
    IngestionError,
    InvalidModeError,
    RisSenseError,
)
from .gradcheck import MODULES, run_gradcheck
from .grid import run_grid
from .model import CcnnModel, ModelConfig
from .train import TrainConfig, evaluate, train

DEFAULT_SEED = 42


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cmd_simulate(args) -> int:
    print(f"seed {args.seed}")
    env = ENVIRONMENTS[args.env]
    cfg = SweepConfig(n_points=args.points, angle_step_deg=args.angle_step)
    sweeps = run_campaign(env, cfg, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    n_angles = cfg.n_angles
    for i, sweep in enumerate(sweeps):
        s_idx, a_idx = divmod(i, n_angles)
        name = f"s{s_idx}_{sweep.scenario}_a{a_idx:04d}.cir"
        save_sweep(sweep, os.path.join(args.out, name))
    print(f"wrote {len(sweeps)} sweeps ({args.env}, {n_angles} angles x "
          f"{len(SCENARIO_ORDER)} scenarios) to {args.out}")
    return 0


def _load_campaign(campaign_dir: str, env_name: str):
    """Read every .cir file and restore scenario-major, angle-minor order."""
    names = sorted(f for f in os.listdir(campaign_dir) if f.endswith(".cir"))
    if not names:
        raise IngestionError(f"no .cir sweep files in {campaign_dir}")
    sweeps = [load_sweep(os.path.join(campaign_dir, n)) for n in names]
    rank = {s.kind: i for i, s in enumerate(SCENARIO_ORDER)}
    for sweep in sweeps:
        if sweep.environment != env_name:
            raise InvalidModeError(
                f"campaign sweep is for {sweep.environment!r}, requested {env_name!r}"
            )
        if sweep.scenario not in rank:
            raise InvalidModeError(f"unknown scenario {sweep.scenario!r} in campaign")
    sweeps.sort(key=lambda s: (rank[s.scenario], s.angle_deg))
    return sweeps


def _cmd_dataset_build(args) -> int:
    print(f"seed {args.seed}")
    campaign = _load_campaign(args.campaign, args.env)
    manifest = build_recipe(
        args.recipe, ENVIRONMENTS[args.env], campaign, args.out, seed=args.seed
    )
    n_train = manifest.count(split="train")
    n_test = manifest.count(split="test")
    print(f"wrote {len(manifest.entries)} entries "
          f"({n_train} train / {n_test} test) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    print(f"seed {args.seed}")
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed
    )
    model = CcnnModel(ModelConfig(), seed=args.seed, dtype=np.float32)
    model, losses, report = train(model, args.manifest, cfg)
    for i, loss in enumerate(losses, start=1):
        print(f"epoch {i}/{cfg.epochs} loss {loss:.4f}")
    print(f"test accuracy {report.accuracy:.3f}")
    model.save_checkpoint(args.out)
    print(f"checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = CcnnModel.load_checkpoint(args.model, dtype=np.float32)
    report = evaluate(model, args.manifest, "test")
    print(f"seed {report.seed}")
    with open(args.json, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"test accuracy {report.accuracy:.3f}")
    print(f"report {args.json}")
    return 0


def _cmd_grid(args) -> int:
    print(f"seed {args.seed}")
    result = run_grid(
        args.out,
        seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        max_batches=args.max_batches,
        data_dir=args.data_dir,
        workers=args.workers,
    )
    for cell in result.cells:
        if cell.failed:
            print(f"{cell.environment}/{cell.recipe}: FAILED ({cell.error})")
        else:
            print(f"{cell.environment}/{cell.recipe}: "
                  f"accuracy {cell.report.accuracy:.3f}")
    print(f"csv  {result.csv_path}")
    print(f"json {result.json_path}")
    print(f"svg  {result.svg_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    print(f"seed {DEFAULT_SEED}")
    results = run_gradcheck(args.module, seed=DEFAULT_SEED)
    ok = True
    for name, (err, tol) in results.items():
        status = "ok" if err <= tol else "FAIL"
        print(f"{name:8s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
        ok = ok and err <= tol
    return 0 if ok else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="ris-sense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run a synthetic sweep campaign")
    p.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    p.add_argument("--out", required=True, help="directory for .cir sweep files")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--points", type=int, default=SweepConfig.n_points,
                   help="frequency points per sweep")
    p.add_argument("--angle-step", type=float, default=SweepConfig.angle_step_deg,
                   help="turntable step in degrees (must divide 360)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("dataset", help="dataset operations")
    dsub = p.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    p = dsub.add_parser("build", help="render a recipe from a campaign")
    p.add_argument("--recipe", required=True, choices=RECIPES)
    p.add_argument("--env", required=True, choices=sorted(ENVIRONMENTS))
    p.add_argument("--campaign", required=True, help="directory of .cir files")
    p.add_argument("--out", required=True, help="directory for PNGs + manifest")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=_cmd_dataset_build)

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.ccnn)")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", required=True, help="where to write the report")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grid", help="train + evaluate all 12 recipe/env cells")
    p.add_argument("--out", required=True, help="directory for artifacts")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-batches", type=int, default=None,
                   help="cap batches per epoch (smoke runs)")
    p.add_argument("--data-dir", default=None,
                   help="dataset cache directory (default OUT/data)")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("gradcheck", help="verify backward passes numerically")
    p.add_argument("--module", default="all", choices=("all",) + MODULES)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RisSenseError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
