import json

import pytest

from mcl_okd.config import TrainConfig, from_dict, load_config, parse_override, read_config_file
from mcl_okd.errors import ConfigError


def _write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_and_paper_values():
    c = TrainConfig()
    assert (c.M, c.T, c.beta, c.tau, c.K, c.d, c.rho) == (4, 3.0, 0.025, 0.1, 256, 128, 0.5)
    assert c.kl_detach and c.contrastive_enabled and c.kl_enabled


def test_missing_required_field_names_it(tmp_path):
    p = _write(tmp_path, 'dataset = "synthetic"\nepochs = 1\n')
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert info.value.field == "M" and "M" in str(info.value)


def test_unknown_key_rejected(tmp_path):
    p = _write(tmp_path, 'dataset = "synthetic"\nM = 2\nepochs = 1\nbetta = 0.1\n')
    with pytest.raises(ConfigError, match="betta"):
        load_config(p)


@pytest.mark.parametrize("text, field", [
    ("tau = 0.0", "tau"), ("beta = -1.0", "beta"), ("M = 0", "M"), ('schedule = "linear"', "schedule"),
    ("rho = 1.5", "rho"), ('M = "four"', "M"), ("widths = [8, 16]", "widths"), ("use_kl = 1", "use_kl"),
])
def test_invalid_values(tmp_path, text, field):
    base = 'dataset = "synthetic"\nM = 2\nepochs = 1\n'
    p = _write(tmp_path, base.replace(f"{field} = ", "#") + text + "\n")
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert info.value.field == field


def test_precedence_file_override_flag(tmp_path):
    p = _write(tmp_path, 'dataset = "synthetic"\nM = 2\nepochs = 5\nseed = 3\nbeta = 0.5\n')
    c = load_config(p, ["seed=4", "beta=0.1", "widths=[4, 8, 16]"], seed=7)
    assert (c.seed, c.beta, c.epochs, c.widths) == (7, 0.1, 5, (4, 8, 16))
    assert load_config(p, ["seed=4"]).seed == 4
    assert load_config(p, [], seed=None).seed == 3


def test_override_parsing():
    assert parse_override("positive=bank") == ("positive", "bank")
    assert parse_override("lr = 0.2") == ("lr", 0.2)
    assert parse_override("data_root=none") == ("data_root", None)
    with pytest.raises(ConfigError):
        parse_override("lr")
    with pytest.raises(ConfigError):
        parse_override("nope=1")


def test_json_and_manifest_roundtrip(tmp_path):
    cfg = TrainConfig(M=3, epochs=2, widths=(4, 8, 8))
    p = _write(tmp_path, json.dumps({"config": cfg.to_dict(), "seed": 0}), "manifest.json")
    assert load_config(p) == cfg
    assert from_dict(read_config_file(p)) == cfg


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "M = = 2"))


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.toml")):
        load_config(path)
