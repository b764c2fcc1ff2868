import pytest

from finite_calderon.config import ExperimentConfig, load_config, parse_config
from finite_calderon.errors import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.m == 24 and cfg.w_kind == "prolate" and cfg.tol == 1e-9 and cfg.max_iters == 200


def test_types_and_lists():
    cfg = parse_config("m = 16\nR = 1.5\neta_list = 0, 1e-4, 1e-3  # comment\ndebug_flip_sign = yes\nN = 40\n")
    assert cfg.m == 16 and cfg.R == 1.5
    assert cfg.eta_list == [0.0, 1e-4, 1e-3]
    assert cfg.debug_flip_sign is True
    assert cfg.N == "40"


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("mm = 3")


@pytest.mark.parametrize("text", ["m = abc", "m = 15", "w_kind = spline", "c = fast", "floor = maybe",
                                  "debug_flip_sign = perhaps", "initial = random"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides_and_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("m = 16\nseed = 4\n")
    cfg = load_config(p, seed=9, out=None)
    assert cfg.m == 16 and cfg.seed == 9


def test_dump_roundtrip():
    cfg = parse_config("m = 16\neps_list = 0.001, 0.002\n")
    assert parse_config(cfg.dump()) == cfg
