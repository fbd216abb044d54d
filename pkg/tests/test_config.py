import pytest

from f4.config import RunConfig, build_config, parse_config_file
from f4.errors import DataFormatError


def test_parse_types_and_comments(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        """
        # a comment
        lam = 0.002     # inline comment
        epochs_pretrain = 3
        batchnorm = true
        preset = custom
        dims = 12,8,4
        """
    )
    values = parse_config_file(cfg_file)
    assert values == {
        "lam": 0.002,
        "epochs_pretrain": 3,
        "batchnorm": True,
        "preset": "custom",
        "dims": "12,8,4",
    }
    cfg = build_config(cfg_file)
    assert cfg.lam == 0.002 and cfg.model_dims() == (12, 8, 4)


def test_flags_override_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("lam = 0.5\nseed = 3\n")
    cfg = build_config(cfg_file, {"lam": 0.25, "seed": None})
    assert cfg.lam == 0.25  # flag wins
    assert cfg.seed == 3  # None means not set on the command line


def test_unknown_key_rejected(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("lamda = 0.5\n")
    with pytest.raises(DataFormatError, match="unknown config key"):
        parse_config_file(cfg_file)


def test_bad_values_rejected(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("batchnorm = maybe\n")
    with pytest.raises(DataFormatError, match="boolean"):
        parse_config_file(cfg_file)
    cfg_file.write_text("seed = one\n")
    with pytest.raises(DataFormatError):
        parse_config_file(cfg_file)
    cfg_file.write_text("just a line\n")
    with pytest.raises(DataFormatError, match="key = value"):
        parse_config_file(cfg_file)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(DataFormatError, match="not found"):
        parse_config_file(tmp_path / "nope.cfg")


def test_snapshot_roundtrips(tmp_path):
    cfg = RunConfig(lam=0.125, preset="mlp-hr", batchnorm=True, out="x/y")
    snap = tmp_path / "snap.cfg"
    snap.write_text(cfg.to_text())
    back = build_config(snap)
    assert back == cfg


def test_custom_dims_validation():
    with pytest.raises(DataFormatError):
        RunConfig(preset="custom", dims="784").model_dims()
    with pytest.raises(DataFormatError):
        RunConfig(preset="custom", dims="a,b").model_dims()
    assert RunConfig(preset="custom", dims=" 784, 300 ,10").model_dims() == (784, 300, 10)


def test_effective_omega_lr():
    assert RunConfig(lr=0.01).effective_omega_lr() == 0.01
    assert RunConfig(lr=0.01, omega_lr=0.002).effective_omega_lr() == 0.002
