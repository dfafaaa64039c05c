import logging

import numpy as np
import pytest

from sdmp.config import ConfigError, RunConfig, dump_config, parse_config, parse_kv_text
from sdmp.data import (
    RECORD_BYTES,
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    load_cifar10,
    load_cifar10_file,
    stratified_subset,
    write_cifar10_file,
)


# ---------------------------------------------------------------- config

def test_empty_file_gives_defaults_and_echoes(tmp_path, caplog):
    p = tmp_path / "c.cfg"
    p.write_text("")
    with caplog.at_level(logging.INFO, logger="sdmp.config"):
        cfg = parse_config(p)
    assert cfg == RunConfig()
    assert "config batch_size = 64" in caplog.text


def test_odd_batch_named_error(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("batch_size = 15\n")
    with pytest.raises(ConfigError, match="batch_size: must be even"):
        parse_config(p)


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("alpha = 1.0  # file value\n")
    assert parse_config(p, {"alpha": "0.5"}).alpha == 0.5
    assert parse_config(p).alpha == 1.0


@pytest.mark.parametrize("text,match", [
    ("alpha = 0\n", "alpha"),
    ("alpha = -2\n", "alpha"),
    ("strategies =\nmixing = true\n", "no strategy"),
    ("bogus = 1\n", "unknown key 'bogus'"),
    ("epochs 3\n", "expected 'key = value'"),
    ("epochs = three\n", "epochs: cannot parse"),
    ("framework = byol\n", "framework"),
    ("strategies = cutout\n", "unknown strategy"),
])
def test_validation_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig(**parse_kv_text(text))


def test_types_and_comments():
    d = parse_kv_text("# header\nwidths = 8, 16\nmixing = off\nstrategies = mixup,cutmix\ntau = 0.3 # x\n")
    assert d == {"widths": (8, 16), "mixing": False, "strategies": ("mixup", "cutmix"), "tau": 0.3}


def test_dump_parse_round_trip():
    cfg = RunConfig(strategies=("cutmix",), widths=(4, 8), alpha=0.7, mixing=False)
    assert RunConfig(**parse_kv_text(dump_config(cfg))) == cfg


def test_config_hash_stable_and_sensitive():
    assert RunConfig().config_hash() == RunConfig().config_hash()
    assert RunConfig(seed=1).config_hash() != RunConfig().config_hash()
    assert len(RunConfig().config_hash()) == 16


def test_mix_spec_defaults():
    cfg = RunConfig()
    assert cfg.mix_spec("mixup").alpha == 0.8
    assert RunConfig(alpha=0.3).mix_spec("cutmix").alpha == 0.3


def test_peak_lr():
    assert RunConfig(batch_size=256).peak_lr == 0.0005


# ---------------------------------------------------------------- cifar

def _fixture(path, n=3):
    recs = np.zeros((n, RECORD_BYTES), dtype=np.uint8)
    recs[0, 0] = 7
    recs[0, 1:] = 255
    recs[1, 0] = 2
    recs[1, 1:1025] = 10  # red plane only
    recs.tofile(path)


def test_cifar_fixture_record_values(tmp_path):
    p = tmp_path / "b.bin"
    _fixture(p)
    ds = load_cifar10_file(p)
    assert ds.labels[0] == 7
    assert np.all(ds.images[0] == 1.0)
    assert ds.labels[1] == 2
    np.testing.assert_allclose(ds.images[1, 0], 10 / 255)
    assert np.all(ds.images[1, 1:] == 0)
    assert ds.images.shape == (3, 3, 32, 32)


def test_cifar_truncated_file_reports_offset(tmp_path):
    p = tmp_path / "b.bin"
    _fixture(p, n=2)
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(DatasetError, match=f"byte offset {RECORD_BYTES}"):
        load_cifar10_file(p)


def test_cifar_load_twice_identical(tmp_path):
    p = tmp_path / "b.bin"
    _fixture(p)
    np.testing.assert_array_equal(load_cifar10_file(p).images, load_cifar10_file(p).images)


def test_cifar_directory_requires_full_files(tmp_path):
    _fixture(tmp_path / "test_batch.bin", n=4)
    with pytest.raises(DatasetError, match="expected 10000 records"):
        load_cifar10(tmp_path, "test")
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path / "missing")


def test_cifar_write_read_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(5, 3, 32, 32)) / 255
    write_cifar10_file(tmp_path / "x.bin", imgs, np.arange(5))
    ds = load_cifar10_file(tmp_path / "x.bin", dtype=np.float64)
    np.testing.assert_allclose(ds.images, imgs, atol=1e-12)
    np.testing.assert_array_equal(ds.labels, np.arange(5))


# ---------------------------------------------------------------- synthetic

def test_zero_noise_samples_equal_template():
    train, test = generate_synthetic(SyntheticSpec(noise_sigma=0.0, samples_per_class=5, test_per_class=2), 0)
    for c in range(10):
        members = train.images[train.labels == c]
        assert np.all(members == members[0])
        np.testing.assert_array_equal(test.images[test.labels == c][0], members[0])


def test_synthetic_deterministic_and_disjoint_noise():
    spec = SyntheticSpec(samples_per_class=4, test_per_class=4)
    a, at = generate_synthetic(spec, 3)
    b, _ = generate_synthetic(spec, 3)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(np.sort(a.images.ravel()), np.sort(at.images.ravel()))
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_synthetic_errors():
    with pytest.raises(DatasetError, match="non-negative"):
        generate_synthetic(SyntheticSpec(noise_sigma=-0.1), 0)
    with pytest.raises(DatasetError, match="at least 2"):
        generate_synthetic(SyntheticSpec(n_classes=1), 0)


def test_raw_pixel_probe_separable_at_low_noise():
    from sdmp.evaluation import train_linear

    train, test = generate_synthetic(SyntheticSpec(noise_sigma=0.05, samples_per_class=50, test_per_class=20), 0)
    clf = train_linear(train.images.reshape(len(train), -1).astype(float), train.labels, 10, epochs=20)
    acc = np.mean(clf.predict(test.images.reshape(len(test), -1).astype(float)) == test.labels)
    assert acc > 0.95


def test_stratified_subset_proportions():
    labels = np.repeat(np.arange(4), [10, 20, 30, 40])
    idx = stratified_subset(labels, 0.1, np.random.default_rng(0))
    np.testing.assert_array_equal(np.bincount(labels[idx]), [1, 2, 3, 4])
    with pytest.raises(DatasetError, match="no sample"):
        stratified_subset(labels, 0.01, np.random.default_rng(0))
