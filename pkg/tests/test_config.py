import pytest

from fedsilo.config import apply_overrides, from_dict, parse_config, parse_value, to_dict
from fedsilo.errors import ConfigError

MINIMAL = {"scenario": {"kind": "motivating"}, "scheme": {"name": "hcct"}}


def write(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    return path


def test_minimal_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, '[scenario]\nkind = "motivating"\n[scheme]\nname = "hcct"\n'))
    assert (cfg.batch_size, cfg.lr, cfg.decay) == (64, 0.1, 0.995)
    assert (cfg.alpha, cfg.beta, cfg.seeds) == (1.0, 2.0, (0,))
    assert cfg.lr_at(2) == pytest.approx(0.1 * 0.995**2)


def test_negative_alpha_names_key():
    with pytest.raises(ConfigError, match="alpha"):
        from_dict({**MINIMAL, "hcct": {"alpha": -1.0}})


def test_unknown_key_suggestion():
    with pytest.raises(ConfigError, match="did you mean 'alpha'"):
        from_dict({**MINIMAL, "hcct": {"alhpa": 1.0}})
    with pytest.raises(ConfigError, match="did you mean 'train'"):
        from_dict({**MINIMAL, "trian": {}})


def test_missing_required():
    with pytest.raises(ConfigError, match="scheme.name"):
        from_dict({"scenario": {"kind": "motivating"}})
    with pytest.raises(ConfigError, match="scenario.kind"):
        from_dict({"scheme": {"name": "hcct"}})


def test_missing_file_and_syntax_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_config(tmp_path / "nope.toml")
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path, "[scenario\nkind="))


def test_overrides():
    data = apply_overrides(MINIMAL, ["scheme=global", "train.epochs=7", "run.seeds=[1, 2]"])
    cfg = from_dict(data)
    assert (cfg.scheme, cfg.epochs, cfg.seeds) == ("global", 7, (1, 2))
    assert MINIMAL["scheme"]["name"] == "hcct"
    with pytest.raises(ConfigError):
        apply_overrides(MINIMAL, ["nosection=1"])


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5
    assert parse_value("true") is True and parse_value("global") == "global"


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("FEDSILO_SEED", "4,5")
    assert from_dict(MINIMAL).seeds == (4, 5)
    monkeypatch.setenv("FEDSILO_SEED", "x")
    with pytest.raises(ConfigError):
        from_dict(MINIMAL)


def test_constraints():
    for bad in ({"train": {"epochs": -1}}, {"run": {"seeds": []}},
                {"scheme": {"name": "ifca", "n_groups": 0}}, {"scheme": {"name": "nope"}},
                {"arrivals": {"x": 1}}):
        with pytest.raises(ConfigError):
            from_dict({**MINIMAL, **bad})


def test_round_trip():
    cfg = from_dict({**MINIMAL, "hcct": {"alpha": 100.0}, "arrivals": {"3": 1}})
    assert from_dict(to_dict(cfg)) == cfg
