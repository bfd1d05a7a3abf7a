import json

import pytest

from cyclepose.ablation import LOSS_ROWS, run_ablation, suite_rows
from cyclepose.config import RunConfig, TrainConfig
from cyclepose.data import make_split
from cyclepose.train import train


@pytest.fixture
def tiny_run(tiny_config, tiny_data_config):
    return RunConfig(model=tiny_config, data=tiny_data_config.replace(n_train=32, n_val=16),
                     train=TrainConfig(epochs=1, steps_per_epoch=3, batch_size=8, lr_decay_epochs=(), eval_every=1))


def test_losses_suite_has_six_rows(tiny_run):
    rows = suite_rows("losses", tiny_run)
    assert [r.row_id for r in rows] == list(LOSS_ROWS)
    assert len(rows) == 6
    assert all(r.num_cycles == 2 and r.eval_cycle == 1 for r in rows)


def test_cycles_suite_grid():
    rows = suite_rows("cycles", RunConfig())
    assert [(r.num_layers, r.num_cycles) for r in rows] == [(4, 1), (4, 2), (4, 3), (1, 2), (1, 3)]
    assert all(r.loss_variant == "last_cycle_pose_only" and r.eval_cycle == -1 for r in rows)


def test_distil_chain_rows():
    rows = suite_rows("distil_chain", RunConfig())
    assert [r.num_cycles for r in rows] == [1, 2, 3]


def test_unknown_suite():
    with pytest.raises(ValueError):
        suite_rows("nope", RunConfig())


def test_unknown_row(tiny_run):
    with pytest.raises(ValueError):
        run_ablation("losses", tiny_run, [0], rows=["bogus"])


def test_cycles_single_cycle_row_equals_baseline(tiny_run):
    rep = run_ablation("cycles", tiny_run, [4], rows=["L2_N1"])
    d = tiny_run.data
    res = train(tiny_run.model.replace(num_cycles=1, seed=4), tiny_run.train.replace(seed=4),
                make_split(d.n_train, d.n_val, d.base_seed, d))
    cell = rep.row("L2_N1").per_seed[0]
    assert cell["pck"] == res.final_report.pck
    assert cell["mean_pixel_error"] == res.final_report.mean_pixel_error


def test_losses_report_and_outputs(tmp_path, tiny_run):
    cache = {}
    rep = run_ablation("losses", tiny_run, [0, 1], out_dir=tmp_path, cache=cache)
    assert [r.spec.row_id for r in rep.rows] == list(LOSS_ROWS)
    assert all(len(r.per_seed) == 2 for r in rep.rows)
    assert rep.metadata["seeds"] == [0, 1]
    assert rep.metadata["data_seeds"] == {"train": [0, 32], "val": [32, 48]}
    assert len(cache) == 12
    data = json.loads((tmp_path / "ablation_losses.json").read_text())
    assert len(data["rows"]) == 6
    lines = (tmp_path / "ablation_losses.csv").read_bytes().split(b"\r\n")
    assert len([x for x in lines if x]) == 7
    # second pass is served entirely from the cache
    again = run_ablation("losses", tiny_run, [0, 1], cache=cache)
    assert again.to_dict()["rows"] == rep.to_dict()["rows"]
