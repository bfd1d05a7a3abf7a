"""Deterministic synthetic stick-figure keypoint dataset.

Each sample is a coloured stick figure (head, torso, two jointed arms and
two jointed legs) drawn over a noisy background with a few distractor
strokes and blobs in the same palette. Keypoints, in order::

    0 head, 1 left hand, 2 right hand, 3 left foot, 4 right foot

Pixel coordinates put pixel ``i``'s centre at ``i``; heatmap cell ``u``
covers image coordinate ``(u + 0.5) * stride - 0.5`` at its centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .blob import read_blob, write_blob
from .config import ConfigError, DataConfig, config_hash, to_dict

KEYPOINT_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
DATASET_FORMAT = "cyclepose-dataset"

HEAD_RGB = (0.95, 0.95, 0.95)
LIMB_RGB = {
    "left_arm": (1.0, 0.25, 0.2),
    "right_arm": (0.2, 0.5, 1.0),
    "left_leg": (1.0, 0.75, 0.1),
    "right_leg": (0.25, 0.9, 0.3),
}
PALETTE = np.array([HEAD_RGB] + list(LIMB_RGB.values()))
LIMB_WIDTH = 1.6


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticSample:
    image: np.ndarray  # C x H x W, float32 in [0, 1]
    keypoints: np.ndarray  # K x 2, (x, y) pixels
    visibility: np.ndarray  # K bools
    sample_seed: int


def _rot(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _skeleton(rng: np.random.Generator, scale: float) -> dict:
    """Joint positions in a body frame (y down, neck at origin)."""
    torso = rng.uniform(10, 14)
    head_r = rng.uniform(2.5, 3.5)
    j = {"neck": np.zeros(2), "pelvis": np.array([0.0, torso])}
    j["head"] = np.array([0.0, -head_r - 1.0])
    down = np.array([0.0, 1.0])
    for side, sgn in (("left", -1.0), ("right", 1.0)):
        # arms swing outward from the neck, legs from the pelvis
        a = math.radians(rng.uniform(30, 150)) * -sgn
        bend = math.radians(rng.uniform(-60, 60))
        l1, l2 = rng.uniform(5, 8), rng.uniform(5, 8)
        elbow = j["neck"] + l1 * _rot(down, a)
        j[f"{side}_elbow"] = elbow
        j[f"{side}_hand"] = elbow + l2 * _rot(down, a + bend)
        a = math.radians(rng.uniform(5, 40)) * -sgn
        bend = math.radians(rng.uniform(-30, 30))
        l1, l2 = rng.uniform(6, 9), rng.uniform(6, 9)
        knee = j["pelvis"] + l1 * _rot(down, a)
        j[f"{side}_knee"] = knee
        j[f"{side}_foot"] = knee + l2 * _rot(down, a + bend)
    out = {k: v * scale for k, v in j.items()}
    out["_head_r"] = head_r * scale
    return out


def _draw_segment(img, yy, xx, p0, p1, rgb, width):
    d = np.asarray(p1) - np.asarray(p0)
    L2 = float(d @ d)
    px, py = xx - p0[0], yy - p0[1]
    t = np.clip((px * d[0] + py * d[1]) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    dist = np.hypot(px - t * d[0], py - t * d[1])
    _blend(img, np.clip(width / 2 + 0.5 - dist, 0.0, 1.0), rgb)


def _draw_disk(img, yy, xx, c, r, rgb):
    dist = np.hypot(xx - c[0], yy - c[1])
    _blend(img, np.clip(r + 0.5 - dist, 0.0, 1.0), rgb)


def _blend(img, alpha, rgb):
    for ch in range(3):
        img[ch] = img[ch] * (1.0 - alpha) + rgb[ch] * alpha


def gen_sample(seed: int, cfg: DataConfig = DataConfig()) -> SyntheticSample:
    """Render one sample; fully determined by ``seed`` and ``cfg``."""
    if cfg.num_keypoints != len(KEYPOINT_NAMES):
        raise ConfigError(f"stick-figure template has {len(KEYPOINT_NAMES)} keypoints, "
                          f"config asks for {cfg.num_keypoints}")
    h, w = cfg.image_size
    rng = np.random.default_rng(int(seed))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    bg = rng.uniform(0.0, 0.3, size=3)
    img = np.empty((3, h, w))
    img[:] = bg[:, None, None]
    img += rng.normal(0.0, 0.03, size=img.shape)

    for _ in range(int(rng.integers(cfg.clutter_min, cfg.clutter_max + 1))):
        rgb = PALETTE[rng.integers(len(PALETTE))]
        c = rng.uniform([0, 0], [w - 1, h - 1])
        if rng.random() < 0.6:
            ang = rng.uniform(0, 2 * math.pi)
            p1 = c + rng.uniform(6, 20) * np.array([math.cos(ang), math.sin(ang)])
            _draw_segment(img, yy, xx, c, p1, rgb, LIMB_WIDTH)
        else:
            _draw_disk(img, yy, xx, c, rng.uniform(1.5, 3.0), rgb)

    scale = rng.uniform(0.8, 1.15) * min(h, w) / 64.0
    j = _skeleton(rng, scale)
    rot = math.radians(rng.uniform(-45, 45))
    head_r = j.pop("_head_r")
    j = {k: _rot(v, rot) for k, v in j.items()}
    pts = np.stack(list(j.values()))
    margin = head_r + 2.0
    lo = pts.min(axis=0) - margin
    hi = pts.max(axis=0) + margin
    span = hi - lo
    room = np.array([w - 1, h - 1]) - span
    if np.any(room < 0):  # only for images too small for the figure
        raise ConfigError("image too small for stick figure")
    shift = rng.uniform([0, 0], room) - lo
    j = {k: v + shift for k, v in j.items()}

    for side in ("left", "right"):
        arm, leg = LIMB_RGB[f"{side}_arm"], LIMB_RGB[f"{side}_leg"]
        _draw_segment(img, yy, xx, j["neck"], j[f"{side}_elbow"], arm, LIMB_WIDTH)
        _draw_segment(img, yy, xx, j[f"{side}_elbow"], j[f"{side}_hand"], arm, LIMB_WIDTH)
        _draw_segment(img, yy, xx, j["pelvis"], j[f"{side}_knee"], leg, LIMB_WIDTH)
        _draw_segment(img, yy, xx, j[f"{side}_knee"], j[f"{side}_foot"], leg, LIMB_WIDTH)
    _draw_segment(img, yy, xx, j["neck"], j["pelvis"], HEAD_RGB, LIMB_WIDTH)
    _draw_disk(img, yy, xx, j["head"], head_r, HEAD_RGB)

    kps = np.stack([j[n] for n in KEYPOINT_NAMES])
    return SyntheticSample(
        image=np.clip(img, 0.0, 1.0).astype(np.float32),
        keypoints=kps,
        visibility=np.ones(len(KEYPOINT_NAMES), dtype=bool),
        sample_seed=int(seed),
    )


def to_heatmap_coords(keypoints: np.ndarray, heatmap_size, image_size) -> np.ndarray:
    """Image pixel coordinates -> heatmap cell coordinates (pixel-centre aligned)."""
    (hh, hw), (h, w) = heatmap_size, image_size
    kp = np.asarray(keypoints, dtype=np.float64)
    scale = np.array([hw / w, hh / h])
    return (kp + 0.5) * scale - 0.5


def render_heatmap(keypoints, sigma: float, heatmap_size, image_size) -> np.ndarray:
    """Unnormalised Gaussian per keypoint: exp(-((u-x')^2 + (v-y')^2) / (2 sigma^2)).

    Returns (K, Hh, Wh) float32 with values in [0, 1]; sigma in heatmap pixels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    hh, hw = heatmap_size
    c = to_heatmap_coords(keypoints, heatmap_size, image_size)
    u = np.arange(hw, dtype=np.float64)
    v = np.arange(hh, dtype=np.float64)
    gx = np.exp(-((u[None, :] - c[:, 0:1]) ** 2) / (2 * sigma ** 2))  # K x Wh
    gy = np.exp(-((v[None, :] - c[:, 1:2]) ** 2) / (2 * sigma ** 2))  # K x Hh
    return (gy[:, :, None] * gx[:, None, :]).astype(np.float32)


class SyntheticDataset:
    """Samples for a fixed list of seeds, generated on first access and cached."""

    def __init__(self, seeds, cfg: DataConfig, name: str = ""):
        self.seeds = np.asarray(seeds, dtype=np.int64)
        self.cfg = cfg
        self.name = name
        self._arrays: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, i: int) -> SyntheticSample:
        return gen_sample(int(self.seeds[i]), self.cfg)

    def arrays(self) -> dict:
        """Materialised ``images``, ``keypoints``, ``heatmaps`` and ``seeds`` arrays."""
        if self._arrays is None:
            cfg = self.cfg
            imgs, kps, hms = [], [], []
            for s in self.seeds:
                smp = gen_sample(int(s), cfg)
                imgs.append(smp.image)
                kps.append(smp.keypoints)
                hms.append(render_heatmap(smp.keypoints, cfg.sigma, cfg.heatmap_size, cfg.image_size))
            self._arrays = {
                "images": np.stack(imgs),
                "keypoints": np.stack(kps),
                "heatmaps": np.stack(hms),
                "seeds": self.seeds.copy(),
            }
        return self._arrays

    def batches(self, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[np.ndarray]:
        """Yield index arrays; order fixed by ``shuffle_seed`` (None keeps seed order)."""
        idx = np.arange(len(self))
        if shuffle_seed is not None:
            idx = np.random.default_rng(shuffle_seed).permutation(len(self))
        for s in range(0, len(idx), batch_size):
            yield idx[s:s + batch_size]

    def dump(self, path) -> None:
        a = self.arrays()
        meta = {
            "format": DATASET_FORMAT,
            "split": self.name,
            "data_config": to_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "num_samples": len(self),
        }
        write_blob(path, meta, a)

    @classmethod
    def load(cls, path, cfg: DataConfig) -> "SyntheticDataset":
        meta, arrays = read_blob(path)
        if meta.get("format") != DATASET_FORMAT:
            raise DatasetError(f"{path}: not a dataset dump")
        if meta["config_hash"] != config_hash(cfg):
            raise DatasetError(f"{path}: config hash {meta['config_hash']} != expected {config_hash(cfg)}")
        ds = cls(arrays["seeds"], cfg, meta.get("split", ""))
        ds._arrays = arrays
        return ds


def make_split(n_train: int, n_val: int, base_seed: int, cfg: DataConfig,
               val_base_seed: Optional[int] = None) -> tuple:
    """Train seeds ``[base, base+n_train)``; val seeds start at ``val_base_seed``
    (default right after train). Overlapping ranges raise."""
    if n_train < 1 or n_val < 0:
        raise DatasetError("n_train must be >= 1 and n_val >= 0")
    vb = base_seed + n_train if val_base_seed is None else val_base_seed
    if n_val and vb < base_seed + n_train and base_seed < vb + n_val:
        raise DatasetError(f"seed ranges overlap: train [{base_seed}, {base_seed + n_train}) "
                           f"val [{vb}, {vb + n_val})")
    train = SyntheticDataset(np.arange(base_seed, base_seed + n_train), cfg, "train")
    val = SyntheticDataset(np.arange(vb, vb + n_val), cfg, "val")
    return train, val
