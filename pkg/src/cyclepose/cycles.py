"""Multi-cycle forward through the shared stack and the cycle self-distillation losses.

Cycle ``i`` consumes the tokens produced by cycle ``i - 1`` (cycle 1 consumes
the embedded image), using the same layer weights every time. Every cycle's
keypoint tokens go through the one shared heatmap head.

Loss for an N-cycle trace (MSE = mean over elements)::

    l_kt   = sum_{i=1}^{N-1} MSE(KT_i, T(KT_{i+1}))
    l_vt   = sum_{i=1}^{N-1} MSE(VT_i, T(VT_{i+1}))
    l_pose = sum_{i=1}^{N}   MSE(P_i, GT)
    total  = l_pose + alpha_kt * l_kt + alpha_vt * l_vt

``T`` is a stop-gradient when ``detach_teacher`` is set, identity otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .model import PoseTransformer, TokenBatch


@dataclass
class CycleOutput:
    visual: Tensor
    keypoint: Tensor
    heatmaps: Tensor


@dataclass
class CycleTrace:
    """Per-cycle outputs; ``trace[0]`` is cycle 1."""

    cycles: List[CycleOutput]

    def __len__(self) -> int:
        return len(self.cycles)

    def __getitem__(self, i) -> CycleOutput:
        return self.cycles[i]

    def __iter__(self):
        return iter(self.cycles)


@dataclass
class LossBreakdown:
    l_pose: Tensor
    l_kt: Tensor
    l_vt: Tensor
    total: Tensor
    l_pose_cycles: List[float] = field(default_factory=list)
    variant: str = "full"

    def as_record(self) -> dict:
        return {
            "l_pose": float(self.l_pose.data),
            "l_pose_cycles": [float(x) for x in self.l_pose_cycles],
            "l_kt": float(self.l_kt.data),
            "l_vt": float(self.l_vt.data),
            "total": float(self.total.data),
        }


@dataclass(frozen=True)
class LossAssembly:
    """Which loss terms a variant keeps. ``pose_cycles`` is ``"all"`` or ``"last"``."""

    pose_cycles: str
    use_kt: bool
    use_vt: bool


# The pose column of the loss ablation distinguishes supervising every cycle
# from supervising only the last one; rows without it keep last-cycle supervision.
VARIANTS = {
    "full": LossAssembly("all", True, True),
    "pose_only": LossAssembly("all", False, False),
    "pose+kt": LossAssembly("all", True, False),
    "pose+vt": LossAssembly("all", False, True),
    "kt+vt_only": LossAssembly("last", True, True),
    "last_cycle_pose_only": LossAssembly("last", False, False),
}


def ablation_variant(config: ModelConfig, variant_id: Optional[str] = None) -> LossAssembly:
    vid = config.loss_variant if variant_id is None else variant_id
    try:
        return VARIANTS[vid]
    except KeyError:
        raise ValueError(f"unknown loss variant {vid!r}; choose from {sorted(VARIANTS)}") from None


def mct_forward(model: PoseTransformer, tokens: TokenBatch, num_cycles: int,
                train_mode: bool = False) -> CycleTrace:
    if num_cycles < 1:
        raise ValueError("num_cycles must be >= 1")
    out = []
    for i in range(num_cycles):
        tokens = model.stack_forward(tokens, train_mode, cycle_index=i)
        out.append(CycleOutput(visual=tokens.visual, keypoint=tokens.keypoint,
                               heatmaps=model.heatmap_head(tokens.keypoint)))
    return CycleTrace(out)


def forward_cycles(model: PoseTransformer, images, num_cycles: Optional[int] = None,
                   train_mode: bool = False) -> CycleTrace:
    n = model.config.num_cycles if num_cycles is None else num_cycles
    return mct_forward(model, model.initial_tokens(images), n, train_mode)


def single_pass_inference(model: PoseTransformer, images) -> tuple:
    """Deployment forward: one cycle, eval mode. Returns ``(heatmaps, coords)``."""
    from .metrics import decode_heatmap

    with ag.no_grad():
        trace = forward_cycles(model, images, num_cycles=1, train_mode=False)
    hm = trace[0].heatmaps.data
    return hm, decode_heatmap(hm, model.config.image_size)


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _teacher(x: Tensor, detach_teacher: bool) -> Tensor:
    return ag.detach(x) if detach_teacher else x


def loss_kt(trace: CycleTrace, detach_teacher: bool = True) -> Tensor:
    terms = [ag.mse(trace[i].keypoint, _teacher(trace[i + 1].keypoint, detach_teacher))
             for i in range(len(trace) - 1)]
    return ag.add_scalars(terms) if terms else _zero(trace[0].keypoint.dtype)


def loss_vt(trace: CycleTrace, detach_teacher: bool = True) -> Tensor:
    terms = [ag.mse(trace[i].visual, _teacher(trace[i + 1].visual, detach_teacher))
             for i in range(len(trace) - 1)]
    return ag.add_scalars(terms) if terms else _zero(trace[0].visual.dtype)


def _as_tensor(gt, dtype) -> Tensor:
    if isinstance(gt, Tensor):
        return gt
    return Tensor(np.asarray(gt, dtype=dtype))


def loss_pose(trace: CycleTrace, gt, cycles: str = "all") -> tuple:
    """``(sum of supervised per-cycle MSE, per-cycle MSE list for every cycle)``."""
    gt = _as_tensor(gt, trace[0].heatmaps.dtype)
    per = [ag.mse(c.heatmaps, gt) for c in trace]
    if cycles == "all":
        used = per
    elif cycles == "last":
        used = per[-1:]
    else:
        raise ValueError(f"cycles must be 'all' or 'last', got {cycles!r}")
    return ag.add_scalars(used), per


def compose_total(l_pose: Tensor, l_kt: Tensor, l_vt: Tensor, alpha_kt: float, alpha_vt: float) -> Tensor:
    return ag.add_scalars([l_pose, l_kt, l_vt], [1.0, alpha_kt, alpha_vt])


def total_loss(trace: CycleTrace, gt, config: ModelConfig, variant_id: Optional[str] = None) -> LossBreakdown:
    asm = ablation_variant(config, variant_id)
    dtype = trace[0].heatmaps.dtype
    l_pose, per = loss_pose(trace, gt, asm.pose_cycles)
    lkt = loss_kt(trace, config.detach_teacher) if asm.use_kt else _zero(dtype)
    lvt = loss_vt(trace, config.detach_teacher) if asm.use_vt else _zero(dtype)
    total = compose_total(l_pose, lkt, lvt, config.alpha_kt, config.alpha_vt)
    return LossBreakdown(l_pose=l_pose, l_kt=lkt, l_vt=lvt, total=total,
                         l_pose_cycles=[float(p.data) for p in per],
                         variant=variant_id or config.loss_variant)
