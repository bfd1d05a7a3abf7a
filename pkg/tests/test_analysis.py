import csv
import json

import numpy as np
import pytest

from cyclepose.analysis import LAYER_WEIGHTS, export_attention, param_stats, weight_stats, write_param_stats
from cyclepose.config import config_hash
from cyclepose.model import PoseTransformer


def _read(path):
    raw = path.read_bytes()
    assert b"\r\n" in raw
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- weight statistics

def test_near_zero_fraction_example():
    st = weight_stats([0.005, -0.5, 0.02], tau=0.01)
    assert st["near_zero_fraction"] == pytest.approx(1 / 3)
    assert st["count"] == 3


def test_all_zero_tensor():
    st = weight_stats(np.zeros(10), tau=0.01)
    assert st["near_zero_fraction"] == 1.0
    assert st["std"] == 0.0
    assert sum(st["hist_counts"]) == 10


def test_threshold_is_strict():
    assert weight_stats([0.01, -0.01, 0.0099], tau=0.01)["near_zero_fraction"] == pytest.approx(1 / 3)


def test_histogram_exact_counts():
    st = weight_stats([-1.0, -0.6, 0.0, 0.2, 0.7, 1.0], edges=np.array([-1.0, -0.5, 0.0, 0.5, 1.0]))
    # numpy bins: [-1,-0.5) [-0.5,0) [0,0.5) [0.5,1]
    assert st["hist_counts"] == [2, 0, 2, 2]


def test_histogram_clips_out_of_range_values():
    st = weight_stats([-5.0, 0.0, 5.0], edges=np.array([-1.0, 0.0, 1.0]))
    assert st["hist_counts"] == [1, 2]


def _perturbed(cfg, seed, scale):
    m = PoseTransformer(cfg.replace(seed=seed))
    r = np.random.default_rng(seed)
    for p in m.parameters():
        p.data += r.normal(0, scale, p.shape)
    return m


def test_param_stats_histograms_cover_every_weight(tiny_config):
    m = _perturbed(tiny_config, 0, 0.05)
    st = param_stats(m, bins=17)
    per_layer = sum(m.params[f"layers.0.{n}"].data.size for n in LAYER_WEIGHTS)
    assert len(st["layers"]) == tiny_config.num_layers
    for row in st["layers"]:
        assert sum(row["a"]["hist_counts"]) == row["a"]["count"] == per_layer
        assert len(row["a"]["hist_counts"]) == 17
        assert 0.0 <= row["a"]["near_zero_fraction"] <= 1.0


def test_param_stats_on_constructed_weights(tiny_config):
    m = PoseTransformer(tiny_config)
    for n in LAYER_WEIGHTS:
        w = m.params[f"layers.1.{n}"].data
        w[:] = 0.5
        w.reshape(-1)[::4] = 0.001
    st = param_stats(m, layer_filter=[1], tau=0.01)
    row = st["layers"][0]["a"]
    total = sum(m.params[f"layers.1.{n}"].data.size for n in LAYER_WEIGHTS)
    small = sum(len(m.params[f"layers.1.{n}"].data.reshape(-1)[::4]) for n in LAYER_WEIGHTS)
    assert row["near_zero_fraction"] == small / total
    assert st["near_zero_fraction_a"] == small / total


def test_param_stats_comparison(tmp_path, tiny_config):
    a = _perturbed(tiny_config, 0, 0.005)
    b = _perturbed(tiny_config, 1, 0.2)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    st = param_stats(tmp_path / "a.ckpt", tmp_path / "b.ckpt")
    assert st["b_has_fewer_near_zero"] is True
    for row in st["layers"]:
        assert row["a"]["hist_edges"] == row["b"]["hist_edges"]
    files = write_param_stats(st, tmp_path / "out")
    again = write_param_stats(param_stats(tmp_path / "a.ckpt", tmp_path / "b.ckpt"), tmp_path / "out2")
    for f, g in zip(files, again):
        assert f.read_bytes() == g.read_bytes()
    rows = _read(tmp_path / "out" / "param_stats.csv")
    assert len(rows) == 2 * tiny_config.num_layers
    assert {r["config_hash"] for r in rows} == {config_hash(a.config), config_hash(b.config)}


def test_param_stats_architecture_mismatch(tiny_config):
    with pytest.raises(ValueError, match="architecture"):
        param_stats(PoseTransformer(tiny_config), PoseTransformer(tiny_config.replace(num_layers=1)))


# ---------------------------------------------------------------- attention export

def test_export_file_count_and_shapes(tmp_path, tiny_config):
    m = PoseTransformer(tiny_config.replace(num_cycles=3))
    files = export_attention(m, 7, tmp_path, cycles=[1, 3])
    k, L = tiny_config.num_keypoints, tiny_config.num_layers
    assert len(files) == 2 * L * (k + 1)
    assert len(list(tmp_path.iterdir())) == len(files)
    gh, gw = tiny_config.grid
    rows = _read(tmp_path / "attn_c3_l1_kp0_head_visual.csv")
    assert len(rows) == gh * gw
    assert {(int(r["grid_row"]), int(r["grid_col"])) for r in rows} == {(i, j) for i in range(gh) for j in range(gw)}
    assert rows[0]["config_hash"] == config_hash(m.config)


def test_exported_rows_sum_to_one(tmp_path, tiny_config):
    m = _perturbed(tiny_config, 3, 0.3)
    export_attention(m, 0, tmp_path)
    k = tiny_config.num_keypoints
    for c in (1, 2):
        for layer in range(tiny_config.num_layers):
            kk = _read(tmp_path / f"attn_c{c}_l{layer}_keypoints.csv")
            for q in range(k):
                total = sum(float(r["weight"]) for r in kk if int(r["query_keypoint"]) == q)
                vis = next(tmp_path.glob(f"attn_c{c}_l{layer}_kp{q}_*_visual.csv"))
                total += sum(float(r["weight"]) for r in _read(vis))
                assert total == pytest.approx(1.0, abs=1e-6)


def test_zero_query_key_projection_exports_uniform_maps(tmp_path, tiny_config):
    m = PoseTransformer(tiny_config)
    d = tiny_config.embed_dim
    for i in range(tiny_config.num_layers):
        m.params[f"layers.{i}.attn.qkv.weight"].data[:, :2 * d] = 0
    export_attention(m, 1, tmp_path, per_head=True)
    expect = 1.0 / (tiny_config.num_keypoints + tiny_config.num_patches)
    for f in tmp_path.glob("*.csv"):
        for r in _read(f):
            assert float(r["weight"]) == pytest.approx(expect, rel=1e-12)


def test_export_is_byte_identical(tmp_path, tiny_config):
    m = PoseTransformer(tiny_config)
    m.save(tmp_path / "m.ckpt")
    a = export_attention(tmp_path / "m.ckpt", 2, tmp_path / "a")
    b = export_attention(tmp_path / "m.ckpt", 2, tmp_path / "b")
    assert [f.read_bytes() for f in a] == [f.read_bytes() for f in b]


@pytest.mark.parametrize("cycles", [[0], [3], []])
def test_export_invalid_cycle(tmp_path, tiny_config, cycles):
    with pytest.raises(ValueError):
        export_attention(PoseTransformer(tiny_config), 0, tmp_path, cycles=cycles)


def test_param_stats_json_is_parseable(tmp_path, tiny_config):
    write_param_stats(param_stats(PoseTransformer(tiny_config)), tmp_path)
    data = json.loads((tmp_path / "param_stats.json").read_text())
    assert data["tau"] == 0.01 and "config_hash_a" in data
