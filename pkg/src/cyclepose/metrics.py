"""Heatmap decoding, PCK and model evaluation."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .cycles import forward_cycles

PCK_RADII = (0.05, 0.1, 0.2)


def decode_heatmap(heatmaps, image_size) -> np.ndarray:
    """Argmax decode (..., K, Hh, Wh) -> (..., K, 2) image (x, y).

    Ties go to the smallest row-major index. A cell maps to its centre in
    image pixels: ``x = (u + 0.5) * W / Wh - 0.5``.
    """
    hm = np.asarray(heatmaps)
    hh, hw = hm.shape[-2:]
    h, w = image_size
    flat = hm.reshape(hm.shape[:-2] + (hh * hw,))
    idx = np.argmax(flat, axis=-1)
    v, u = np.divmod(idx, hw)
    x = (u + 0.5) * (w / hw) - 0.5
    y = (v + 0.5) * (h / hh) - 0.5
    return np.stack([x, y], axis=-1).astype(np.float64)


def pck(pred, gt, r: float, image_size) -> float:
    """Fraction of keypoints with Euclidean error <= r * max(H, W)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    err = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(err <= r * max(image_size)))


def _metrics(pred, gt, image_size) -> dict:
    err = np.linalg.norm(pred - gt, axis=-1)
    return {
        "pck": {str(r): pck(pred, gt, r, image_size) for r in PCK_RADII},
        "mean_pixel_error": float(err.mean()),
    }


@dataclass
class EvalReport:
    """Metrics of the single-pass (cycle 1) prediction plus every cycle.

    ``pck`` maps radius (as string) to score.
    """

    pck: dict
    mean_pixel_error: float
    per_cycle: List[dict] = field(default_factory=list)
    num_samples: int = 0
    step: int = 0
    wall_clock_s: float = 0.0

    def pck_at(self, r: float, cycle: Optional[int] = None) -> float:
        """PCK at radius ``r`` for ``cycle`` (1-based; default cycle 1, -1 = last)."""
        if cycle is None:
            return self.pck[str(r)]
        c = self.per_cycle[cycle - 1] if cycle > 0 else self.per_cycle[cycle]
        return c["pck"][str(r)]

    def metrics(self) -> dict:
        """Everything except timing, for exact comparisons."""
        d = asdict(self)
        d.pop("wall_clock_s")
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list:
        rows = []
        for c in self.per_cycle:
            row = {"cycle": c["cycle"]}
            row.update({f"pck@{r}": c["pck"][str(r)] for r in PCK_RADII})
            row["mean_pixel_error"] = c["mean_pixel_error"]
            rows.append(row)
        return rows


def predict_cycles(model, images, num_cycles: Optional[int] = None, batch_size: int = 64) -> list:
    """Decoded coordinates per cycle: list of (B, K, 2). Never records a graph."""
    n = model.config.num_cycles if num_cycles is None else num_cycles
    outs: List[list] = [[] for _ in range(n)]
    with ag.no_grad():
        for s in range(0, len(images), batch_size):
            trace = forward_cycles(model, images[s:s + batch_size], n, train_mode=False)
            for i, c in enumerate(trace):
                outs[i].append(decode_heatmap(c.heatmaps.data, model.config.image_size))
    return [np.concatenate(o) for o in outs]


def evaluate(model, dataset, num_cycles: Optional[int] = None, batch_size: int = 64,
             step: int = 0) -> EvalReport:
    """Evaluate on a :class:`~cyclepose.data.SyntheticDataset` (or arrays dict)."""
    t0 = time.perf_counter()
    arrays = dataset if isinstance(dataset, dict) else dataset.arrays()
    images, gt = arrays["images"], arrays["keypoints"]
    preds = predict_cycles(model, images, num_cycles, batch_size)
    size = model.config.image_size
    per = []
    for i, p in enumerate(preds):
        m = _metrics(p, gt, size)
        m["cycle"] = i + 1
        per.append(m)
    return EvalReport(pck=dict(per[0]["pck"]), mean_pixel_error=per[0]["mean_pixel_error"],
                      per_cycle=per, num_samples=int(len(images)), step=int(step),
                      wall_clock_s=time.perf_counter() - t0)


def pck_monotone(report: EvalReport, radii: Sequence[float] = PCK_RADII) -> bool:
    rs = sorted(radii)
    return all(report.pck[str(a)] <= report.pck[str(b)] for a, b in zip(rs, rs[1:]))
