"""Keypoint-token pose transformer.

Block equations (pre-norm), for token matrix ``x`` of shape (B, K+M, D)::

    x = x + proj(MHSA(LN1(x)))
    x = x + fc2(gelu(fc1(LN2(x))))

Keypoint tokens come first in the sequence, visual tokens after. There is
no final norm: a stack's output lives in the same space as its input, so it
can be fed straight back in for another cycle.

Parameter count (C channels, patch p, D, hidden F, M patches, K keypoints,
L layers, heatmap Hh x Wh)::

    (C p^2 + 1) D + M D + K D
      + L (4 D + 3 D^2 + 3 D + D^2 + D + D F + F + F D + D)
      + (D + 1) Hh Wh
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .blob import read_blob, write_blob
from .config import ModelConfig, __version__, config_hash, to_dict

INIT_STD = 0.02
CHECKPOINT_FORMAT = "cyclepose-checkpoint"


class ModelStateError(RuntimeError):
    pass


@dataclass
class TokenBatch:
    keypoint: Tensor  # B x K x D
    visual: Tensor  # B x M x D


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(dtype)


def param_count(cfg: ModelConfig) -> int:
    c, p, d, f = cfg.in_channels, cfg.patch_size, cfg.embed_dim, cfg.hidden_dim
    m, k, L = cfg.num_patches, cfg.num_keypoints, cfg.num_layers
    hh, hw = cfg.heatmap_size
    per_layer = 4 * d + 3 * d * d + 3 * d + d * d + d + d * f + f + f * d + d
    return (c * p * p + 1) * d + m * d + k * d + L * per_layer + (d + 1) * hh * hw


def inference_cost(cfg: ModelConfig) -> dict:
    """Parameters and multiply-accumulate count of one single-pass forward (batch 1).

    Independent of ``num_cycles``: deployment runs the stack once.
    """
    c, p, d, f = cfg.in_channels, cfg.patch_size, cfg.embed_dim, cfg.hidden_dim
    m, k, L = cfg.num_patches, cfg.num_keypoints, cfg.num_layers
    t = m + k
    hh, hw = cfg.heatmap_size
    embed = m * c * p * p * d
    attn = t * d * 3 * d + 2 * t * t * d + t * d * d
    mlp = 2 * t * d * f
    head = k * d * hh * hw
    return {"params": param_count(cfg), "macs": embed + L * (attn + mlp) + head}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, M, C*p*p); patches row-major, each flattened in (c, dy, dx) order."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise ag.ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


class PoseTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: Dict[str, Tensor] = {}
        self._dropout_rng = np.random.default_rng([config.seed, 1])
        self.last_attention: List[List[np.ndarray]] = []
        self._init_params()

    # -- parameters

    def _init_params(self) -> None:
        cfg, dt = self.config, self.dtype
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.embed_dim, cfg.hidden_dim
        pin = cfg.in_channels * cfg.patch_size ** 2
        nh = cfg.heatmap_size[0] * cfg.heatmap_size[1]

        def tn(name, shape):
            self.params[name] = Tensor(truncated_normal(rng, shape, INIT_STD, dt), True, name)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value, dtype=dt), True, name)

        tn("patch_embed.weight", (pin, d))
        const("patch_embed.bias", (d,), 0.0)
        tn("pos_embed", (cfg.num_patches, d))
        tn("keypoint_tokens", (cfg.num_keypoints, d))
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            const(pre + "ln1.gamma", (d,), 1.0)
            const(pre + "ln1.beta", (d,), 0.0)
            tn(pre + "attn.qkv.weight", (d, 3 * d))
            const(pre + "attn.qkv.bias", (3 * d,), 0.0)
            tn(pre + "attn.proj.weight", (d, d))
            const(pre + "attn.proj.bias", (d,), 0.0)
            const(pre + "ln2.gamma", (d,), 1.0)
            const(pre + "ln2.beta", (d,), 0.0)
            tn(pre + "mlp.fc1.weight", (d, f))
            const(pre + "mlp.fc1.bias", (f,), 0.0)
            tn(pre + "mlp.fc2.weight", (f, d))
            const(pre + "mlp.fc2.bias", (d,), 0.0)
        tn("head.weight", (d, nh))
        const("head.bias", (nh,), 0.0)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ModelStateError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ModelStateError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    # -- forward pieces

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def patch_embed(self, images) -> Tensor:
        """Images (B, C, H, W) -> visual tokens (B, M, D) with positional rows added."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.in_channels,) + tuple(cfg.image_size):
            raise ag.ShapeError(f"expected images (B, {cfg.in_channels}, {cfg.image_size[0]}, "
                                f"{cfg.image_size[1]}), got {images.shape}")
        patches = Tensor(patchify(images, cfg.patch_size))
        tok = ag.linear(patches, self._p("patch_embed.weight"), self._p("patch_embed.bias"))
        return ag.add(tok, self._p("pos_embed"))

    def keypoint_tokens(self) -> Tensor:
        return self._p("keypoint_tokens")

    def initial_tokens(self, images) -> TokenBatch:
        vis = self.patch_embed(images)
        kp = ag.expand_batch(self.keypoint_tokens(), vis.shape[0])
        return TokenBatch(keypoint=kp, visual=vis)

    def _attention(self, x: Tensor, i: int, train_mode: bool, record: list) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        h = cfg.num_heads
        dh = d // h
        pre = f"layers.{i}.attn."
        qkv = ag.linear(x, self._p(pre + "qkv.weight"), self._p(pre + "qkv.bias"))
        qkv = ag.transpose(ag.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = (ag.reshape(ag.take(qkv, j, j + 1, 0), (b, h, t, dh)) for j in range(3))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        record.append(attn.data)
        if train_mode:
            attn = ag.dropout(attn, cfg.dropout, self._dropout_rng)
        out = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return ag.linear(out, self._p(pre + "proj.weight"), self._p(pre + "proj.bias"))

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        pre = f"layers.{i}.mlp."
        hid = ag.gelu(ag.linear(x, self._p(pre + "fc1.weight"), self._p(pre + "fc1.bias")))
        return ag.linear(hid, self._p(pre + "fc2.weight"), self._p(pre + "fc2.bias"))

    def stack_forward(self, tokens: TokenBatch, train_mode: bool = False, *, cycle_index: int = 0) -> TokenBatch:
        """Run all encoder layers once over [keypoint || visual].

        ``cycle_index`` 0 starts a fresh attention record; later indices append to it.
        """
        cfg = self.config
        kp, vis = tokens.keypoint, tokens.visual
        k, d = cfg.num_keypoints, cfg.embed_dim
        if kp.ndim != 3 or vis.ndim != 3 or kp.shape[1:] != (k, d) or vis.shape[2] != d \
                or vis.shape[1] != cfg.num_patches or kp.shape[0] != vis.shape[0]:
            raise ag.ShapeError(f"token shapes {kp.shape} / {vis.shape} do not match config (K={k}, "
                                f"M={cfg.num_patches}, D={d})")
        if cycle_index == 0:
            self.last_attention = []
        record: List[np.ndarray] = []
        self.last_attention.append(record)
        drop = train_mode and cfg.dropout > 0
        x = ag.concat([kp, vis], axis=1)
        eps = cfg.ln_eps
        for i in range(cfg.num_layers):
            pre = f"layers.{i}."
            a = self._attention(ag.layer_norm(x, self._p(pre + "ln1.gamma"), self._p(pre + "ln1.beta"), eps),
                                i, train_mode, record)
            if drop:
                a = ag.dropout(a, cfg.dropout, self._dropout_rng)
            x = ag.add(x, a)
            m = self._mlp(ag.layer_norm(x, self._p(pre + "ln2.gamma"), self._p(pre + "ln2.beta"), eps), i)
            if drop:
                m = ag.dropout(m, cfg.dropout, self._dropout_rng)
            x = ag.add(x, m)
        t = x.shape[1]
        return TokenBatch(keypoint=ag.take(x, 0, k, 1), visual=ag.take(x, k, t, 1))

    def heatmap_head(self, keypoint: Tensor) -> Tensor:
        """Shared linear map of each keypoint token to a (Hh, Wh) heatmap."""
        out = ag.linear(keypoint, self._p("head.weight"), self._p("head.bias"))
        b, k = keypoint.shape[:2]
        return ag.reshape(out, (b, k) + tuple(self.config.heatmap_size))

    def attention_weights(self, layer_index: int, cycle: int = 1) -> np.ndarray:
        """Post-softmax attention (B, heads, K+M, K+M) of the most recent forward."""
        if not self.last_attention:
            raise ModelStateError("no forward pass recorded yet")
        if not 1 <= cycle <= len(self.last_attention):
            raise ModelStateError(f"cycle {cycle} not recorded (have {len(self.last_attention)})")
        if not 0 <= layer_index < self.config.num_layers:
            raise IndexError(f"layer_index {layer_index} out of range [0, {self.config.num_layers})")
        return self.last_attention[cycle - 1][layer_index]

    # -- persistence

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "tool_version": __version__,
            "model_config": to_dict(self.config),
            "config_hash": config_hash(self.config),
        }
        if extra_meta:
            meta.update(extra_meta)
        write_blob(path, meta, self.params_as_arrays())

    def params_as_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def load_checkpoint(path) -> tuple:
    """Return ``(model, meta)`` rebuilt from a checkpoint file."""
    meta, arrays = read_blob(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ModelStateError(f"{path}: not a model checkpoint")
    model = PoseTransformer(ModelConfig(**meta["model_config"]))
    model.load_state_dict(arrays)
    return model, meta
