import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disengen.config import RunConfig, apply_overrides, config_from_dict, parse_config, read_config_file
from disengen.errors import ConfigError


def test_defaults():
    cfg = parse_config(env={})
    assert cfg.seed == 0 and cfg.stage == "visual"
    assert cfg.diffusion.num_timesteps == 200 and cfg.hffm.la == 4 and cfg.dit.lora


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError, match="dit.hiddenn"):
        parse_config(flags=["dit.hiddenn=8"], env={})
    with pytest.raises(ConfigError, match="nosuch"):
        parse_config(flags=["nosuch.key=1"], env={})


@pytest.mark.parametrize("flag", ["dit.hidden_dim=abc", "dit.lora=maybe", "diffusion.lr=fast",
                                  "data.radius_range=0.1", "dit.hidden_dim=1.5", "stage=sampling"])
def test_bad_values(flag):
    with pytest.raises(ConfigError):
        parse_config(flags=[flag], env={})


def test_flag_without_equals():
    with pytest.raises(ConfigError):
        parse_config(flags=["dit.hidden_dim"], env={})


def test_coercions():
    cfg = parse_config(flags=["dit.lora=false", "data.radius_range=0.1,0.2", "diffusion.lr=3e-4",
                              "metrics.extractors=rp"], env={})
    assert cfg.dit.lora is False and cfg.data.radius_range == (0.1, 0.2)
    assert cfg.diffusion.lr == 3e-4 and cfg.metrics.extractors == "rp"


def test_dataclass_validation_becomes_config_error():
    with pytest.raises(ConfigError):
        parse_config(flags=["dit.hidden_dim=30", "dit.heads=4"], env={})


def test_precedence_flags_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\ndit.depth = 2\ndiffusion.lr=0.5  # trailing\nseed=4\n")
    cfg = parse_config(f, ["diffusion.lr=0.25"], env={"DISENGEN_SEED": "9"})
    assert cfg.dit.depth == 2 and cfg.diffusion.lr == 0.25 and cfg.seed == 4


def test_env_seed_only_as_fallback(tmp_path):
    assert parse_config(env={"DISENGEN_SEED": "9"}).seed == 9
    assert parse_config(flags=["seed=3"], env={"DISENGEN_SEED": "9"}).seed == 3


def test_json_file_nested_and_dotted(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"dit": {"depth": 3}, "hffm.la": 2}))
    cfg = parse_config(f, env={})
    assert cfg.dit.depth == 3 and cfg.hffm.la == 2


def test_bad_files(tmp_path):
    (tmp_path / "a.json").write_text("{oops")
    with pytest.raises(ConfigError, match="a.json"):
        read_config_file(tmp_path / "a.json")
    (tmp_path / "b.cfg").write_text("just words\n")
    with pytest.raises(ConfigError, match="b.cfg:1"):
        read_config_file(tmp_path / "b.cfg")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.cfg")


@given(st.integers(1, 8), st.floats(1e-6, 1.0), st.booleans(), st.integers(0, 2**31 - 1))
def test_dict_roundtrip(depth, lr, lora, seed):
    cfg = apply_overrides(RunConfig(), {"dit.depth": depth, "diffusion.lr": lr, "dit.lora": lora, "seed": seed})
    assert config_from_dict(cfg.to_dict()) == cfg
    assert cfg.flat()["dit.depth"] == depth
