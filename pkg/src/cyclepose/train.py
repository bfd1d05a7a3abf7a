"""Adam, step learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .config import ModelConfig, TrainConfig, __version__, config_hash, to_dict
from .cycles import forward_cycles, total_loss
from .metrics import EvalReport, evaluate
from .model import PoseTransformer

log = logging.getLogger(__name__)

FULL_SCHEDULE = TrainConfig(epochs=300, lr_decay_epochs=(200, 260), lr_decay_factor=0.1, base_lr=1e-3)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient counts as zero.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  lr, self.beta1, self.beta2, self.eps)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``lr_decay_factor`` at each epoch in ``lr_decay_epochs``."""
    n = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.base_lr * cfg.lr_decay_factor ** n


def scaled_decay_epochs(epochs: int, reference: TrainConfig = FULL_SCHEDULE) -> tuple:
    """Decay epochs for a shorter run, keeping their fractions of the reference run."""
    return tuple(int(round(e * epochs / reference.epochs)) for e in reference.lr_decay_epochs)


class _Sampler:
    """Endless deterministic stream of batch indices over ``n`` samples."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.default_rng([seed, 7])
        self.buf = np.empty(0, dtype=np.int64)

    def next(self, batch: int) -> np.ndarray:
        while len(self.buf) < batch:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:batch], self.buf[batch:]
        return out


@dataclass
class TrainResult:
    model: PoseTransformer
    final_report: EvalReport
    best_report: EvalReport
    best_step: int
    log: List[dict] = field(default_factory=list)
    eval_log: List[dict] = field(default_factory=list)
    out_dir: Optional[Path] = None
    wall_clock_s: float = 0.0

    @property
    def checkpoint_path(self) -> Optional[Path]:
        return None if self.out_dir is None else self.out_dir / "checkpoint.ckpt"


def _check_finite(lb, step: int, lr: float) -> None:
    rec = lb.as_record()
    if not all(math.isfinite(v) for v in (rec["total"], rec["l_pose"], rec["l_kt"], rec["l_vt"])):
        raise TrainingError(f"non-finite loss at step {step} (lr={lr:g}): {json.dumps(rec)}")


def train(model_config: ModelConfig, train_config: TrainConfig, data, out_dir=None,
          extra_meta: Optional[dict] = None) -> TrainResult:
    """Train an N-cycle model on ``data = (train_ds, val_ds)``.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one record per step),
    ``eval_log.jsonl``, ``checkpoint.ckpt`` (best single-pass PCK@0.1),
    ``final.ckpt`` and ``summary.json``.
    """
    ag.set_deterministic(True)
    t0 = time.perf_counter()
    train_ds, val_ds = data
    tc, mc = train_config, model_config
    out = None if out_dir is None and not tc.checkpoint_path else Path(out_dir or Path(tc.checkpoint_path).parent)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {"train_config": to_dict(tc), "run_hash": config_hash({"model": to_dict(mc), "train": to_dict(tc)})}
    if extra_meta:
        meta.update(extra_meta)

    model = PoseTransformer(mc)
    opt = Adam(model.parameters(), tc.beta1, tc.beta2, tc.adam_eps)
    arrays = train_ds.arrays()
    images, heatmaps = arrays["images"], arrays["heatmaps"]
    sampler = _Sampler(len(images), tc.seed)

    records: List[dict] = []
    evals: List[dict] = []
    best_pck, best_report, best_step = -1.0, None, 0
    report = None
    fh = open(out / "train_log.jsonl", "w") if out is not None else None
    if fh is not None:
        fh.write(json.dumps({"event": "header", "tool_version": __version__, **meta}, sort_keys=True) + "\n")
    try:
        step = 0
        for epoch in range(tc.epochs):
            lr = lr_schedule(epoch, tc)
            for _ in range(tc.steps_per_epoch):
                step += 1
                idx = sampler.next(tc.batch_size)
                model.zero_grad()
                trace = forward_cycles(model, images[idx], mc.num_cycles, train_mode=True)
                lb = total_loss(trace, heatmaps[idx], mc)
                _check_finite(lb, step, lr)
                ag.backward(lb.total)
                opt.step(lr)
                rec = {"step": step, "epoch": epoch, "lr": lr, **lb.as_record()}
                records.append(rec)
                if fh is not None:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if (epoch + 1) % tc.eval_every == 0 or epoch + 1 == tc.epochs:
                report = evaluate(model, val_ds, mc.num_cycles, step=step)
                evals.append({"epoch": epoch, **report.metrics()})
                score = report.pck_at(0.1)
                log.info("epoch %d step %d loss %.5f pck@0.1 cycle1 %.3f last %.3f", epoch + 1, step,
                         rec["total"], score, report.pck_at(0.1, -1))
                if score > best_pck:
                    best_pck, best_report, best_step = score, report, step
                    if out is not None:
                        model.save(out / "checkpoint.ckpt", {**meta, "step": step})
    finally:
        if fh is not None:
            fh.close()

    if out is not None:
        model.save(out / "final.ckpt", {**meta, "step": step})
        with open(out / "eval_log.jsonl", "w") as f:
            for e in evals:
                f.write(json.dumps(e, sort_keys=True) + "\n")
        summary = {"model_config": to_dict(mc), **meta, "best_step": best_step,
                   "best_report": best_report.metrics(), "final_report": report.metrics()}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TrainResult(model=model, final_report=report, best_report=best_report, best_step=best_step,
                       log=records, eval_log=evals, out_dir=out, wall_clock_s=time.perf_counter() - t0)
