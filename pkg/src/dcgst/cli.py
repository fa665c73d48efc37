"""Command-line experiment runner: seed sweeps over one method, CSV metrics out.

    dcgst --dataset data/sbm --label-rate 0.02 --bias ppr --method dcgst --seeds 0..4 --out-dir out/

Values resolve as: command-line flag, then ``--config`` file (JSON or YAML,
keys spelled like the flags with underscores), then dataset preset, then
built-in defaults.  Two files are written to ``--out-dir``: ``stages.csv``
with one row per stage per seed and ``summary.csv`` with one row per run.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from dcgst.errors import DcgstError, RunAborted
from dcgst.graphdata import Graph, load_graph, load_split_override, make_split
from dcgst.selftrain import METHODS, RunResult, StageReport, TrainConfig

log = logging.getLogger(__name__)

STAGES_HEADER = ["run_id", "seed", "stage", "cmd", "acc_train", "acc_val", "acc_test", "aug_size", "loss", "seconds"]
SUMMARY_HEADER = ["run_id", "method", "label_rate", "mean_acc", "std_acc", "n_seeds"]

PRESETS = {
    "cora": {"alpha": 8.0, "beta": 0.3, "gamma": 0.1},
    "citeseer": {"alpha": 18.0, "beta": 0.6, "gamma": 0.4},
}

# flag name -> TrainConfig field
_TRAIN_FLAGS = {
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "lambda": "lam",
    "tau": "tau",
    "hidden": "hidden",
    "lr": "lr",
    "l2": "l2",
    "max_stages": "max_stages",
    "patience": "patience",
    "m": "m",
    "e": "e",
    "q_steps": "q_steps",
    "freeze_gumbel": "freeze_gumbel",
}


@dataclass
class RunSpec:
    dataset_dir: Path
    label_rate: float
    split_mode: str
    method: str
    seeds: list[int]
    out_dir: Path
    overrides: dict = field(default_factory=dict)
    preset: str = "cora"
    timing: bool = False
    verbose: bool = False

    def __post_init__(self):
        if not 0.0 < self.label_rate <= 0.5:
            raise ValueError(f"label rate must lie in (0, 0.5], got {self.label_rate}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def train_config(self, seed: int) -> TrainConfig:
        values = {**PRESETS[self.preset], **self.overrides, "seed": seed}
        return TrainConfig(**values)

    @property
    def run_id(self) -> str:
        return f"{self.method}_{self.split_mode}_{self.label_rate:g}"


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive), ``"1,3,7"`` or a mix such as ``"0..2,9"``."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = (int(x) for x in part.split("..", 1))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    return seeds


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcgst", description="Run graph self-training experiments.")
    p.add_argument("--dataset", help="dataset directory (edges.tsv, features.csv, labels.csv)")
    p.add_argument("--label-rate", type=float)
    p.add_argument("--bias", choices=["random", "ppr"])
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--preset", choices=sorted(PRESETS), help="alpha/beta/gamma defaults (inferred from dataset name)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--max-stages", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--e", type=int)
    p.add_argument("--q-steps", type=int)
    p.add_argument("--seeds", help="e.g. 0..9 or 1,2,5")
    p.add_argument("--out-dir")
    p.add_argument("--config", help="JSON or YAML file with default values")
    p.add_argument("--freeze-gumbel", action="store_true", default=None, help="test mode: zero Gumbel noise")
    p.add_argument("--timing", action="store_true", default=None,
                   help="record wall-clock seconds (otherwise 0, keeping CSVs reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def parse_config(argv: list[str] | None = None) -> RunSpec:
    """Flags override config-file values, which override preset and built-in defaults.

    Bad input exits through ``argparse`` with a usage message and status 2.
    """
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        conf = _read_config(args.config)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        parser.error(f"cannot read config: {exc}")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "verbose")}
    known = {a.dest for a in parser._actions}
    unknown = set(conf) - known
    if unknown:
        parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {**conf, **flags}

    dataset = merged.get("dataset")
    if not dataset:
        parser.error("--dataset is required")
    preset = merged.get("preset") or ("citeseer" if "citeseer" in Path(dataset).name.lower() else "cora")
    overrides = {_TRAIN_FLAGS[k]: v for k, v in merged.items() if k in _TRAIN_FLAGS}
    try:
        spec = RunSpec(
            dataset_dir=Path(dataset),
            label_rate=float(merged.get("label_rate", 0.02)),
            split_mode="ppr_bias" if merged.get("bias", "random") == "ppr" else "random",
            method=merged.get("method", "dcgst"),
            seeds=parse_seeds(merged.get("seeds", "0")),
            out_dir=Path(merged.get("out_dir", "results")),
            overrides=overrides,
            preset=preset,
            timing=bool(merged.get("timing", False)),
            verbose=args.verbose,
        )
        spec.train_config(spec.seeds[0])
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))
    return spec


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "{:.6g}".format(float(x))


def _stage_rows(run_id: str, seed: int, reports: list[StageReport], timing: bool) -> list[list[str]]:
    rows = []
    for r in reports:
        seconds = r.seconds if timing else 0.0
        rows.append([run_id, str(seed), str(r.stage), _fmt(r.cmd), _fmt(r.acc_train), _fmt(r.acc_val),
                     _fmt(r.acc_test), str(r.aug_size), _fmt(r.loss), _fmt(seconds)])
    return rows


@dataclass
class SeedOutcome:
    seed: int
    rows: list[list[str]]
    result: RunResult | None = None
    error: str | None = None


def _run_seed(spec: RunSpec, g: Graph, seed: int) -> SeedOutcome:
    run_id = f"{spec.run_id}_s{seed}"
    try:
        split = load_split_override(spec.dataset_dir, g) or make_split(g, spec.label_rate, spec.split_mode, seed)
        result = METHODS[spec.method](g, split, spec.train_config(seed))
    except RunAborted as exc:
        return SeedOutcome(seed, _stage_rows(run_id, seed, exc.reports, spec.timing), error=str(exc))
    except (DcgstError, ValueError) as exc:
        return SeedOutcome(seed, [], error=str(exc))
    return SeedOutcome(seed, _stage_rows(run_id, seed, result.reports, spec.timing), result)


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def run_experiment(spec: RunSpec, graph: Graph | None = None) -> int:
    """Run every seed, write ``stages.csv`` and ``summary.csv``; 0 iff all seeds finished."""
    g = graph if graph is not None else load_graph(spec.dataset_dir)
    workers = max(1, min(int(os.environ.get("DCGST_THREADS", "1")), len(spec.seeds)))
    if workers == 1:
        outcomes = [_run_seed(spec, g, s) for s in spec.seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: _run_seed(spec, g, s), spec.seeds))

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(spec.out_dir / "stages.csv", STAGES_HEADER, [row for o in outcomes for row in o.rows])
    accs = np.array([o.result.test_accuracy for o in outcomes if o.result is not None])
    std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
    summary = []
    if accs.size:
        summary.append([spec.run_id, spec.method, _fmt(spec.label_rate), _fmt(accs.mean()), _fmt(std),
                        str(accs.size)])
    _write_csv(spec.out_dir / "summary.csv", SUMMARY_HEADER, summary)

    failed = [o for o in outcomes if o.error is not None]
    for o in failed:
        log.error("seed %d failed: %s", o.seed, o.error)
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    spec = parse_config(argv)
    logging.basicConfig(level=logging.INFO if spec.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = run_experiment(spec)
    except (DcgstError, OSError) as exc:
        log.error("%s", exc)
        return 1
    print(f"wrote {spec.out_dir / 'stages.csv'} and {spec.out_dir / 'summary.csv'}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
