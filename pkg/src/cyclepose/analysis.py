"""Attention-map export and weight-distribution statistics."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .config import DataConfig, __version__
from .cycles import forward_cycles
from .data import KEYPOINT_NAMES, gen_sample
from .model import PoseTransformer, load_checkpoint

LAYER_WEIGHTS = ("attn.qkv.weight", "attn.proj.weight", "mlp.fc1.weight", "mlp.fc2.weight")


def _load(model_or_path):
    if isinstance(model_or_path, PoseTransformer):
        from .config import config_hash
        return model_or_path, config_hash(model_or_path.config)
    model, meta = load_checkpoint(model_or_path)
    return model, meta["config_hash"]


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def export_attention(model_or_path, sample_seed: int, out_dir, cycles: Optional[Sequence[int]] = None,
                     per_head: bool = False, data_config: Optional[DataConfig] = None) -> List[Path]:
    """Write keypoint attention maps for one synthetic sample.

    Per requested cycle and layer: one CSV per keypoint with its attention over
    visual tokens laid out on the patch grid, and one CSV with the K x K
    keypoint-to-keypoint block. Heads are averaged unless ``per_head``.
    """
    model, chash = _load(model_or_path)
    cfg = model.config
    n_max = cfg.num_cycles
    cycles = list(range(1, n_max + 1)) if cycles is None else [int(c) for c in cycles]
    bad = [c for c in cycles if not 1 <= c <= n_max]
    if bad or not cycles:
        raise ValueError(f"invalid cycle(s) {bad or cycles}: checkpoint was trained with {n_max} cycle(s)")
    dcfg = data_config or DataConfig(image_size=cfg.image_size, heatmap_size=cfg.heatmap_size,
                                     num_keypoints=cfg.num_keypoints)
    sample = gen_sample(sample_seed, dcfg)
    with ag.no_grad():
        forward_cycles(model, sample.image[None], max(cycles), train_mode=False)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.num_keypoints
    gh, gw = cfg.grid
    names = list(KEYPOINT_NAMES) if k == len(KEYPOINT_NAMES) else [f"kp{i}" for i in range(k)]
    written = []
    prefix = ["config_hash", "tool_version", "sample_seed", "cycle", "layer", "head"]
    for c in cycles:
        for layer in range(cfg.num_layers):
            att = model.attention_weights(layer, c)[0]  # heads x T x T
            maps = [("mean", att.mean(axis=0))] if not per_head else [(str(h), att[h]) for h in range(len(att))]
            base = [chash, __version__, int(sample_seed), c, layer]
            for q in range(k):
                rows = []
                for hname, a in maps:
                    grid = a[q, k:].reshape(gh, gw)
                    rows += [base + [hname, q, names[q], r, col, _fmt(grid[r, col])]
                             for r in range(gh) for col in range(gw)]
                p = out / f"attn_c{c}_l{layer}_kp{q}_{names[q]}_visual.csv"
                _write_csv(p, prefix + ["keypoint", "keypoint_name", "grid_row", "grid_col", "weight"], rows)
                written.append(p)
            rows = []
            for hname, a in maps:
                rows += [base + [hname, q, kk, _fmt(a[q, kk])] for q in range(k) for kk in range(k)]
            p = out / f"attn_c{c}_l{layer}_keypoints.csv"
            _write_csv(p, prefix + ["query_keypoint", "key_keypoint", "weight"], rows)
            written.append(p)
    return written


def weight_stats(values, tau: float = 0.01, edges: Optional[np.ndarray] = None, bins: int = 50) -> dict:
    """std, fraction with |w| < tau, and a histogram whose counts cover every value."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if edges is None:
        lim = float(np.abs(v).max()) if v.size else 1.0
        lim = lim if lim > 0 else 1.0
        edges = np.linspace(-lim, lim, bins + 1)
    counts, edges = np.histogram(np.clip(v, edges[0], edges[-1]), bins=edges)
    return {
        "count": int(v.size),
        "std": float(v.std()) if v.size else 0.0,
        "near_zero_fraction": float(np.mean(np.abs(v) < tau)) if v.size else 0.0,
        "hist_edges": [float(e) for e in edges],
        "hist_counts": [int(c) for c in counts],
    }


def layer_weights(model: PoseTransformer, layer: int) -> np.ndarray:
    return np.concatenate([model.params[f"layers.{layer}.{n}"].data.ravel() for n in LAYER_WEIGHTS])


def param_stats(checkpoint_a, checkpoint_b=None, layer_filter: Optional[Sequence[int]] = None,
                tau: float = 0.01, bins: int = 50) -> dict:
    """Per-layer weight statistics of one checkpoint, or side by side for two.

    Comparison requires identical architectures; both sides share histogram edges.
    """
    ma, ha = _load(checkpoint_a)
    mb, hb = _load(checkpoint_b) if checkpoint_b is not None else (None, None)
    if mb is not None:
        shapes_a = {k: v.shape for k, v in ma.params.items()}
        shapes_b = {k: v.shape for k, v in mb.params.items()}
        if shapes_a != shapes_b:
            raise ValueError("architecture mismatch between checkpoints")
    layers = range(ma.config.num_layers) if layer_filter is None else list(layer_filter)
    result = {"tool_version": __version__, "tau": tau, "config_hash_a": ha, "layers": []}
    if mb is not None:
        result["config_hash_b"] = hb
    tot_a = tot_b = n_tot = 0.0
    for layer in layers:
        wa = layer_weights(ma, layer)
        wb = layer_weights(mb, layer) if mb is not None else None
        lim = float(np.abs(wa).max())
        if wb is not None:
            lim = max(lim, float(np.abs(wb).max()))
        edges = np.linspace(-lim, lim, bins + 1) if lim > 0 else np.linspace(-1, 1, bins + 1)
        row = {"layer": int(layer), "a": weight_stats(wa, tau, edges)}
        tot_a += row["a"]["near_zero_fraction"] * wa.size
        n_tot += wa.size
        if wb is not None:
            row["b"] = weight_stats(wb, tau, edges)
            tot_b += row["b"]["near_zero_fraction"] * wb.size
        result["layers"].append(row)
    result["near_zero_fraction_a"] = tot_a / n_tot if n_tot else 0.0
    if mb is not None:
        result["near_zero_fraction_b"] = tot_b / n_tot if n_tot else 0.0
        result["b_has_fewer_near_zero"] = result["near_zero_fraction_b"] < result["near_zero_fraction_a"]
    return result


def write_param_stats(stats: dict, out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pj = out / "param_stats.json"
    pj.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    sides = [s for s in ("a", "b") if f"config_hash_{s}" in stats]
    rows, hrows = [], []
    for row in stats["layers"]:
        for s in sides:
            st = row[s]
            h = stats[f"config_hash_{s}"]
            rows.append([h, stats["tool_version"], row["layer"], s, st["count"], _fmt(st["std"]),
                         _fmt(stats["tau"]), _fmt(st["near_zero_fraction"])])
            e = st["hist_edges"]
            hrows += [[h, stats["tool_version"], row["layer"], s, _fmt(e[i]), _fmt(e[i + 1]), c]
                      for i, c in enumerate(st["hist_counts"])]
    p1, p2 = out / "param_stats.csv", out / "param_hist.csv"
    _write_csv(p1, ["config_hash", "tool_version", "layer", "checkpoint", "count", "std", "tau",
                    "near_zero_fraction"], rows)
    _write_csv(p2, ["config_hash", "tool_version", "layer", "checkpoint", "bin_left", "bin_right", "count"], hrows)
    return [pj, p1, p2]
