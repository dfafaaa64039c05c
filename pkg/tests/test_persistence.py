import json
import os

import numpy as np
import pytest

from sdmp import checkpoint as C
from sdmp import trainer as Tr
from sdmp.config import RunConfig
from sdmp.metrics import METRICS_HEADER, MetricsError, MetricsWriter, append_eval, read_evals, read_metrics

CFG = dict(widths=(4, 8), image_size=16, proj_hidden=8, proj_dim=4, out_dim=8, n_classes=4,
           samples_per_class=4, test_per_class=2, batch_size=8, epochs=2, warmup_epochs=1)


@pytest.fixture(params=["contrastive", "distillation"])
def trained(request, tmp_path):
    cfg = RunConfig(**CFG, framework=request.param, n_local_views=2)
    state, _ = Tr.run_training(cfg, tmp_path)
    return cfg, state, tmp_path / "ep2.ckpt"


def test_round_trip_bit_exact(trained):
    cfg, state, path = trained
    loaded, cfg2 = C.load_checkpoint(path)
    assert cfg2 == cfg
    assert loaded.step == state.step and loaded.epoch == state.epoch
    assert loaded.loss_history == state.loss_history
    for group in ("student", "teacher"):
        a = state.student if group == "student" else state.teacher.params
        b = loaded.student if group == "student" else loaded.teacher.params
        assert a.names() == b.names()
        for (_, x), (_, y) in zip(a, b):
            assert x.data.dtype == y.data.dtype
            np.testing.assert_array_equal(x.data, y.data)
    for k in state.adam_m:
        np.testing.assert_array_equal(state.adam_m[k], loaded.adam_m[k])
        np.testing.assert_array_equal(state.adam_v[k], loaded.adam_v[k])
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
    if state.teacher.center is not None:
        np.testing.assert_array_equal(loaded.teacher.center, state.teacher.center)


def test_save_load_save_byte_identical(trained, tmp_path):
    cfg, _, path = trained
    loaded, _ = C.load_checkpoint(path)
    again = C.save_checkpoint(tmp_path / "again.ckpt", loaded, cfg)
    assert again.read_bytes() == path.read_bytes()


def test_truncated_blob_is_corruption(trained, tmp_path):
    _, _, path = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(C.CheckpointError, match="corrupt blob"):
        C.load_checkpoint(bad)


def test_flipped_byte_is_corruption(trained, tmp_path):
    _, _, path = trained
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(C.CheckpointError, match="sha256"):
        C.load_checkpoint(bad)


def test_bad_magic_and_config_mismatch(trained, tmp_path):
    cfg, _, path = trained
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(C.CheckpointError, match="magic"):
        C.load_checkpoint(bad)
    with pytest.raises(C.CheckpointError, match="does not match"):
        C.load_checkpoint(path, expect_config=cfg.replace(seed=99))


def test_manifest_layout(trained):
    cfg, _, path = trained
    m = C.load_manifest(path)
    assert m["config_hash"] == cfg.config_hash()
    offsets = [e["offset"] for e in m["tensors"]]
    counts = [e["count"] for e in m["tensors"]]
    assert offsets == list(np.cumsum([0] + counts[:-1]))
    assert m["blob_bytes"] == 8 * sum(counts)


def test_summary_hash_matches_manifest(trained):
    cfg, _, path = trained
    summary = json.loads((path.parent / "summary.json").read_text())
    assert summary["config_hash"] == C.load_manifest(path)["config_hash"]
    assert summary["config"]["batch_size"] == cfg.batch_size


def test_latest_checkpoint(tmp_path):
    for e in (1, 10, 2):
        (tmp_path / f"ep{e}.ckpt").write_bytes(b"")
    assert C.latest_checkpoint(tmp_path).name == "ep10.ckpt"
    assert C.latest_checkpoint(tmp_path / "empty") is None


# ---------------------------------------------------------------- metrics

def test_metrics_three_epochs_four_lines(tmp_path):
    w = MetricsWriter(tmp_path, RunConfig())
    for e in (1, 2, 3):
        w.append({"epoch": e, "train_loss": 1.0 / e, "lr": 0.1, "wall_time_s": 0.5})
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == ",".join(METRICS_HEADER)
    assert lines[1].split(",")[3:5] == ["", ""]


def test_metrics_no_duplicate_epochs(tmp_path):
    w = MetricsWriter(tmp_path, RunConfig())
    for e in (1, 2, 3):
        w.append({"epoch": e, "train_loss": 1.0, "lr": 0.1, "wall_time_s": 0.0})
    with pytest.raises(MetricsError, match="already logged"):
        w.append({"epoch": 2, "train_loss": 1.0, "lr": 0.1, "wall_time_s": 0.0})
    w.truncate_after(2)
    w.append({"epoch": 3, "train_loss": 2.0, "lr": 0.1, "wall_time_s": 0.0})
    assert [r["epoch"] for r in read_metrics(tmp_path)] == [1, 2, 3]


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_dir_fails_eagerly(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(MetricsError, match="not writable"):
        MetricsWriter(ro / "run", RunConfig())


def test_unwritable_path_fails_before_training(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = RunConfig(**CFG)
    with pytest.raises(MetricsError, match="not writable"):
        Tr.run_training(cfg, blocker / "run")


def test_eval_records(tmp_path):
    append_eval(tmp_path, {"kind": "probe", "checkpoint": "ep1.ckpt", "accuracy": 0.5, "setting": "a;b"})
    append_eval(tmp_path, {"kind": "knn", "checkpoint": "ep1.ckpt", "accuracy": 0.25})
    rows = read_evals(tmp_path)
    assert [r["kind"] for r in rows] == ["probe", "knn"] and rows[0]["accuracy"] == "0.5"
