"""Command-line entry point.

Settings are resolved lowest-precedence first: preset, ``--config`` JSON
file, then individual flags. Artifacts go to
``<root>/<name>/<seed>/``, where the root is ``--out``, else the config's
``out_dir``, else ``$LOFO_OUT``, else ``./out``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import PRESETS, ExperimentConfig, deep_merge, preset
from .envs import Phase
from .loca import (
    CURVE_HEADER,
    LearningCurve,
    build_env,
    build_locality,
    optimal_return_oracle,
    run_experiment,
    train_locality,
    write_pgm,
)
from .locality import ContrastiveEmbedding

log = logging.getLogger("lofo")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "LOFO_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--name")
    p.add_argument("--env", choices=["mountaincar", "minigrid"])
    p.add_argument("--buffer", choices=["fifo", "reservoir", "lofo"])
    p.add_argument("--capacity", type=int)
    p.add_argument("--d-local", type=float)
    p.add_argument("--n-local", type=int)
    p.add_argument("--locality", choices=["learned", "handcrafted", "snapshot", "none"])
    p.add_argument("--snapshot", help="embedding snapshot for --locality snapshot")
    p.add_argument("--locality-seed", type=int)
    p.add_argument("--phase1-steps", type=int)
    p.add_argument("--phase2-steps", type=int)
    p.add_argument("--eval-period", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output root")


def _overrides(args) -> dict:
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("name",), args.name)
    put(("env",), args.env)
    if args.buffer is not None:
        # switching buffer kind drops the other kind's parameters
        o["buffer"] = {"kind": args.buffer}
        if args.buffer != "lofo":
            o.setdefault("locality", {})["source"] = "none"
    put(("buffer", "capacity"), args.capacity)
    put(("buffer", "d_local"), args.d_local)
    put(("buffer", "n_local"), args.n_local)
    put(("locality", "source"), args.locality)
    put(("locality", "snapshot"), args.snapshot)
    put(("locality", "seed"), args.locality_seed)
    put(("schedule", "phase1_steps"), args.phase1_steps)
    put(("schedule", "phase2_steps"), args.phase2_steps)
    put(("schedule", "eval_period"), args.eval_period)
    put(("schedule", "eval_episodes"), args.eval_episodes)
    if args.seeds is not None:
        try:
            o["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"bad --seeds {args.seeds!r}") from None
    put(("workers",), args.workers)
    put(("out_dir",), args.out)
    return o


def resolve_config(args) -> ExperimentConfig:
    if args.config is None and args.preset is None:
        raise UsageError("give --preset and/or --config")
    doc = preset(args.preset) if args.preset else {}
    if args.config is not None:
        doc = deep_merge(doc, json.loads(Path(args.config).read_text()))
    overrides = _overrides(args)
    buffer = overrides.pop("buffer", None)
    doc = deep_merge(doc, overrides)
    if buffer is not None:
        if buffer.get("kind", doc.get("buffer", {}).get("kind")) != doc.get("buffer", {}).get("kind"):
            doc["buffer"] = buffer  # a new kind starts from a clean slate
        else:
            doc["buffer"] = deep_merge(doc.get("buffer", {}), buffer)
    return ExperimentConfig.model_validate(doc)


def output_root(config: ExperimentConfig) -> Path:
    return Path(config.out_dir or os.environ.get(OUT_ENV) or "out")


# --- workers -----------------------------------------------------------------

def _load_embedding(path):
    return None if path is None else ContrastiveEmbedding.load(path)


def _run_one(config_doc: dict, seed: int, snapshot, run_dir: str) -> dict:
    """One seed in a worker. Only plain data crosses the process boundary."""
    config = ExperimentConfig.model_validate(config_doc)
    embed = _load_embedding(snapshot) if snapshot else None
    if embed is None and config.buffer.kind == "lofo":
        embed = build_locality(config)
    result = run_experiment(config, seed, embed=embed, out_dir=run_dir)
    return {"seed": seed, "steps": result.steps, "phases": result.phases,
            "returns": result.returns}


class _Curve:
    def __init__(self, d):
        self.steps, self.phases, self.returns = d["steps"], d["phases"], d["returns"]


def _prepare_locality(config: ExperimentConfig, root: Path):
    """Train the learned embedding once per experiment and share it."""
    if config.buffer.kind != "lofo" or config.locality.source != "learned":
        return config.locality.snapshot if config.locality.source == "snapshot" else None
    path = root / config.name / "locality.json"
    if not path.exists():
        log.info("training locality -> %s", path)
        path.parent.mkdir(parents=True, exist_ok=True)
        train_locality(config).save(path, meta={"config": config.resolved()})
    return str(path)


def run_seeds(config: ExperimentConfig, root: Path, name: str | None = None) -> LearningCurve:
    name = name or config.name
    snapshot = _prepare_locality(config, root)
    doc = config.resolved()
    jobs = [(doc, seed, snapshot, str(root / name / str(seed))) for seed in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(jobs))) as pool:
            futures = [pool.submit(_run_one, *job) for job in jobs]
            results = [f.result() for f in futures]
    else:
        results = []
        for job in jobs:
            log.info("run %s seed %d", name, job[1])
            results.append(_run_one(*job))
    curve = LearningCurve.aggregate([_Curve(r) for r in results])
    curve.to_csv(root / name / "curve.csv")
    (root / name / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return curve


# --- commands ----------------------------------------------------------------

def cmd_train_locality(args) -> int:
    config = resolve_config(args)
    if config.locality.source == "handcrafted":
        raise UsageError("the handcrafted locality needs no training")
    path = Path(args.output) if args.output else output_root(config) / config.name / "locality.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    train_locality(config).save(path, meta={"config": config.resolved()})
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    config = resolve_config(args)
    root = output_root(config)
    curve = run_seeds(config, root)
    print(root / config.name)
    if curve.mean:
        print(f"final return {curve.mean[-1]:.4f} over {curve.n_runs} run(s)")
    return EXIT_OK


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise UsageError(f"bad grid entry {item!r}; expected key=v1,v2")
        grid[key] = [_parse_value(v) for v in values.split(",")]
    return grid


def _set_dotted(doc: dict, key: str, value):
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    node[parts[-1]] = value


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    grid = parse_grid(args.grid)
    if not grid:
        print("empty grid: nothing to run")
        return EXIT_OK
    root = output_root(config)
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        doc = config.resolved()
        for k, v in zip(keys, combo):
            _set_dotted(doc, k, v)
        tag = ",".join(f"{k}={v}" for k, v in zip(keys, combo))
        doc["name"] = f"{config.name}/{tag}"
        cells.append((tag, combo, ExperimentConfig.model_validate(doc)))
    rows, failures = [], []
    for tag, combo, cell in cells:
        try:
            curve = run_seeds(cell, root)
        except Exception as exc:  # one bad cell must not sink the sweep
            log.error("cell %s failed: %s", tag, exc)
            failures.append({"cell": tag, "error": repr(exc)})
            continue
        for s, p, m, e in zip(curve.steps, curve.phases, curve.mean, curve.stderr):
            rows.append(list(combo) + [s, p, m, e, curve.n_runs])
    out = root / config.name / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + CURVE_HEADER.split(","))
        w.writerows(rows)
    print(out)
    if failures:
        (root / config.name / "sweep_failures.json").write_text(json.dumps(failures, indent=2))
        print(f"{len(failures)} of {len(cells)} cells failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = resolve_config(args)
    env = build_env(config)
    report = {"env": config.env, "gamma": config.agent.gamma}
    for phase in (Phase.A, Phase.B):
        r = optimal_return_oracle(env, phase, config.agent.gamma)
        report[f"task_{phase.value}"] = {"value": r.value, "method": r.method}
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _read_grid_csv(path: Path) -> np.ndarray:
    with path.open() as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        raise ValueError(f"{path} has no rows")
    ix = np.array([[int(r[0]), int(r[1])] for r in rows])
    out = np.zeros(ix.max(axis=0) + 1)
    for (i, j), r in zip(ix, rows):
        out[i, j] = float(r[2])
    return out


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"no such run directory: {run_dir}")
    written = []
    for stem in ("hist_p1", "hist_p2", "reward_p1", "reward_p2"):
        src = run_dir / f"{stem}.csv"
        if src.exists():
            written.append(write_pgm(run_dir / f"{stem}.pgm", _read_grid_csv(src), args.scale))
    if not written:
        raise UsageError(f"no histogram or reward CSVs in {run_dir}")
    for p in written:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lofo", description="Local-forgetting replay experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-locality", help="train and save the state embedding")
    _add_config_flags(p)
    p.add_argument("--output", help="snapshot path (default <root>/<name>/locality.json)")
    p.set_defaults(func=cmd_train_locality)

    p = sub.add_parser("run", help="run a two-phase experiment for every seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a cartesian grid of configs")
    _add_config_flags(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="dotted config key and values, e.g. buffer.n_local=50,100")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="print the optimal returns of both tasks")
    _add_config_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("export", help="render a run's CSV grids as PGM images")
    p.add_argument("run_dir")
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"lofo: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValidationError, KeyError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"lofo: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.exception("run failed")
        print(f"lofo: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
