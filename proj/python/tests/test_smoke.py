import numpy as np
import pytest

import ambient_layers as al

TINY = """seed=4
model.preset=toyS
model.num_layers=2
task.num_classes=4
task.feature_dim=6
task.frames=8
task.train_examples=32
task.eval_examples=32
task.transfer_train_examples=16
task.transfer_eval_examples=16
train.batch_size=8
train.total_steps=4
train.snapshot_steps=2
ablation.seeds=101,102
fl.num_clients=2
fl.clients_per_round=2
fl.num_rounds=1
fl.client_steps=1
fl.client_batch_size=4
fl.schedules=amb-1@0.5,crit-1@0.5
"""


@pytest.fixture
def config():
    return al.Config.parse(TINY)


def test_config_round_trip(config):
    again = al.Config.parse(config.serialize())
    assert again.serialize() == config.serialize()
    assert config.seed == 4
    assert config.total_steps == 4


def test_bad_config_raises():
    with pytest.raises(al.ConfigError):
        al.Config.parse("model.no_such_field=1\n")
    assert issubclass(al.ConfigError, al.AmbientError)


def test_pipeline(config, tmp_path):
    summary = al.train(config, tmp_path)
    names = [p.name for p in summary["checkpoints"]]
    assert names == ["step_0.ambp", "step_2.ambp", "step_4.ambp"]

    ckpt = al.load_checkpoint(summary["checkpoints"][-1])
    assert ckpt["step"] == 4
    w = ckpt["tensors"]["0/mhsa_query/weight"]
    assert isinstance(w, np.ndarray) and w.ndim == 2 and np.all(np.isfinite(w))

    abl = al.ablate(config, summary["checkpoints"][-1], tmp_path, summary["checkpoints"][0])
    assert abl["mode"] == "rerand"
    assert len(abl["layer_errors"]) == 2
    assert abl["seeds"] == [101, 102]
    assert all(0.0 <= e <= 1.0 for e in abl["layer_errors"])

    ch = al.churn(config, summary["checkpoints"][-1], tmp_path)
    for row in ch["churn"].values():
        assert len(row) == 2
        assert max(row) in (0.0, 1.0)

    rows = al.fl(config, tmp_path, summary["checkpoints"][-1])
    assert [r["schedule"] for r in rows] == ["none", "amb-1@0.5", "crit-1@0.5"]
    assert rows[0]["params_dropped"] == 0.0

    stability = al.report(tmp_path, tmp_path)
    assert [r["layer"] for r in stability][-2:] == ["0", "1"]
    assert all(r["min"] <= r["mean"] <= r["max"] for r in stability)
    assert (tmp_path / "csv" / "stability.csv").exists()


def test_preset_writes_configs(tmp_path):
    assert "table3_analog" in al.preset_names()
    runs = al.preset("bn_vs_gn", tmp_path)
    assert runs == ["group", "batch"]
    for run in runs:
        assert al.Config.load(tmp_path / run / "config.txt").total_steps == al.Config().total_steps


def test_missing_checkpoint_raises(config, tmp_path):
    with pytest.raises(al.AmbientError):
        al.load_checkpoint(tmp_path / "missing.ambp")
