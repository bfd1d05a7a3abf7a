"""Ablation suites over loss terms, cycle counts and distillation chains.

Suites:

``losses``       the six loss assemblies at N=2, scored on the cycle-1 prediction
``cycles``       (L, N) grid trained with last-cycle supervision only, scored on
                 the last cycle
``distil_chain`` N=1 baseline, N=2 (2->1) and N=3 (3->2, 2->1), scored on cycle 1

Every row uses the same data split and the same list of training seeds; the
final model of each run is evaluated.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig, __version__, config_hash, to_dict
from .cycles import VARIANTS
from .data import make_split
from .metrics import PCK_RADII, EvalReport
from .train import train

log = logging.getLogger(__name__)

SUITES = ("losses", "cycles", "distil_chain")
LOSS_ROWS = ("last_cycle_pose_only", "pose_only", "pose+kt", "pose+vt", "kt+vt_only", "full")


@dataclass
class RowSpec:
    row_id: str
    num_layers: int
    num_cycles: int
    loss_variant: str
    eval_cycle: int  # 1-based; -1 means last
    distil: str = "-"


@dataclass
class AblationRow:
    spec: RowSpec
    per_seed: List[dict]
    mean: dict

    def pck(self, r: float = 0.1) -> float:
        return self.mean["pck"][str(r)]


@dataclass
class AblationReport:
    suite: str
    rows: List[AblationRow]
    metadata: dict = field(default_factory=dict)

    def row(self, row_id: str) -> AblationRow:
        for r in self.rows:
            if r.spec.row_id == row_id:
                return r
        raise KeyError(row_id)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "metadata": self.metadata,
                "rows": [{"spec": asdict(r.spec), "per_seed": r.per_seed, "mean": r.mean} for r in self.rows]}

    def write(self, out_dir) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pj = out / f"ablation_{self.suite}.json"
        pj.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        pc = out / f"ablation_{self.suite}.csv"
        with open(pc, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["config_hash", "tool_version", "suite", "row_id", "layers", "cycles", "loss_variant",
                        "distil", "eval_cycle", "num_seeds"] + [f"pck@{r}" for r in PCK_RADII]
                       + ["mean_pixel_error"])
            for r in self.rows:
                s = r.spec
                w.writerow([self.metadata.get("config_hash", ""), __version__, self.suite, s.row_id, s.num_layers,
                            s.num_cycles, s.loss_variant, s.distil, s.eval_cycle, len(r.per_seed)]
                           + [repr(r.mean["pck"][str(x)]) for x in PCK_RADII] + [repr(r.mean["mean_pixel_error"])])
        return [pj, pc]


def suite_rows(suite_id: str, base: RunConfig) -> List[RowSpec]:
    L0 = base.model.num_layers
    if suite_id == "losses":
        n = max(2, base.model.num_cycles)
        return [RowSpec(v, L0, n, v, 1) for v in LOSS_ROWS]
    if suite_id == "cycles":
        ls = max(1, L0 // 3)
        grid = [(L0, 1), (L0, 2), (L0, 3), (ls, 2), (ls, 3)]
        return [RowSpec(f"L{l}_N{n}", l, n, "last_cycle_pose_only", -1) for l, n in grid]
    if suite_id == "distil_chain":
        return [RowSpec("N1", L0, 1, "full", 1, "-"),
                RowSpec("N2_2to1", L0, 2, "full", 1, "2->1"),
                RowSpec("N3_3to2_2to1", L0, 3, "full", 1, "3->2,2->1")]
    raise ValueError(f"unknown suite {suite_id!r}; choose from {SUITES}")


def run_key(run: RunConfig) -> str:
    return config_hash({"model": to_dict(run.model), "train": to_dict(run.train), "data": to_dict(run.data)})


def run_row_seed(base: RunConfig, spec: RowSpec, seed: int, data, cache: Optional[dict] = None,
                 out_dir=None) -> EvalReport:
    """Train one (row, seed) cell and return the final EvalReport. ``cache`` maps run keys to reports."""
    run = base.replace(model=base.model.replace(num_layers=spec.num_layers, num_cycles=spec.num_cycles,
                                                loss_variant=spec.loss_variant, seed=seed),
                       train=base.train.replace(seed=seed))
    key = run_key(run)
    if cache is not None and key in cache:
        return cache[key]
    res = train(run.model, run.train, data, out_dir=out_dir)
    log.info("row %s seed %d: pck@0.1 cycle1 %.3f last %.3f (%.0fs)", spec.row_id, seed,
             res.final_report.pck_at(0.1), res.final_report.pck_at(0.1, -1), res.wall_clock_s)
    if cache is not None:
        cache[key] = res.final_report
    return res.final_report


def _cell(report: EvalReport, eval_cycle: int) -> dict:
    c = report.per_cycle[eval_cycle - 1] if eval_cycle > 0 else report.per_cycle[-1]
    return {"cycle": c["cycle"], "pck": dict(c["pck"]), "mean_pixel_error": c["mean_pixel_error"]}


def run_ablation(suite_id: str, base: RunConfig, seeds: Sequence[int], out_dir=None,
                 cache: Optional[Dict[str, EvalReport]] = None,
                 rows: Optional[Sequence[str]] = None) -> AblationReport:
    """Train every row of a suite for every seed and average the scored cycle's metrics.

    ``rows`` restricts the suite to the named row ids.
    """
    specs = suite_rows(suite_id, base)
    if rows is not None:
        wanted = set(rows)
        unknown = wanted - {s.row_id for s in specs}
        if unknown:
            raise ValueError(f"unknown row id(s) for suite {suite_id!r}: {sorted(unknown)}")
        specs = [s for s in specs if s.row_id in wanted]
    d = base.data
    data = make_split(d.n_train, d.n_val, d.base_seed, d)
    out_rows = []
    for spec in specs:
        cells = []
        for seed in seeds:
            sub = None if out_dir is None else Path(out_dir) / "runs" / f"{spec.row_id}_seed{seed}"
            cells.append(_cell(run_row_seed(base, spec, seed, data, cache, sub), spec.eval_cycle))
        mean = {
            "pck": {str(r): float(np.mean([c["pck"][str(r)] for c in cells])) for r in PCK_RADII},
            "mean_pixel_error": float(np.mean([c["mean_pixel_error"] for c in cells])),
        }
        out_rows.append(AblationRow(spec, cells, mean))
    meta = {
        "tool_version": __version__,
        "config_hash": config_hash(base.to_dict()),
        "seeds": [int(s) for s in seeds],
        "data_seeds": {"train": [int(data[0].seeds[0]), int(data[0].seeds[-1]) + 1],
                       "val": [int(data[1].seeds[0]), int(data[1].seeds[-1]) + 1]},
        "data_config_hash": config_hash(d),
        "train_budget": to_dict(base.train),
        "loss_variants": {k: asdict(v) for k, v in VARIANTS.items()},
    }
    report = AblationReport(suite_id, out_rows, meta)
    if out_dir is not None:
        report.write(out_dir)
    return report
