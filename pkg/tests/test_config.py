import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emblaunder.config import (
    ConfigError,
    ExperimentConfig,
    InvalidValueError,
    UnknownKeyError,
    dump_config,
    load_config,
    with_overrides,
)


def test_empty_text_gives_pinned_defaults():
    cfg = load_config("")
    assert cfg == ExperimentConfig()
    assert cfg.attack.epsilon == 8 / 255 and cfg.attack.steps == 500
    assert cfg.attack.ensemble == ("S1", "S2", "S3")
    assert cfg.scenario.pairs == 50 and cfg.scenario.trials == 5


def test_dump_parse_roundtrip_is_exact():
    cfg = load_config("seed = 5\nattack.epsilon = 0.0627\nscenario.families = [\"identity\", \"compliance\"]\n")
    assert load_config(dump_config(cfg)) == cfg
    assert dump_config(load_config(dump_config(cfg))) == dump_config(cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 0.5), st.integers(0, 2000), st.booleans())
def test_roundtrip_property(seed, eps, steps, eot):
    cfg = with_overrides(ExperimentConfig(), f"seed = {seed}\nattack.epsilon = {eps!r}\nattack.steps = {steps}\nattack.eot = {str(eot).lower()}")
    assert (cfg.seed, cfg.attack.epsilon, cfg.attack.steps, cfg.attack.eot) == (seed, eps, steps, eot)
    assert load_config(dump_config(cfg)) == cfg


def test_comments_and_bytes_accepted():
    cfg = load_config(b'# header\nscenario.prompt_label = "a # b"  # trailing\n')
    assert cfg.scenario.prompt_label == "a # b"


@pytest.mark.parametrize(
    "text, err, line",
    [
        ("seed = 1\nbogus = 2", UnknownKeyError, 2),
        ("attack.nope = 1", UnknownKeyError, 1),
        ("zzz.seed = 1", UnknownKeyError, 1),
        ("seed = 1\n\nseed = 2", ConfigError, 3),
        ("seed 1", ConfigError, 1),
        ("seed = 1.5", InvalidValueError, 1),
        ("attack.eot = 1", InvalidValueError, 1),
        ("attack.ensemble = [1, 2]", None, None),
        ("attack.ensemble = [\"S1\", \"H\"]", InvalidValueError, None),
        ("attack.ensemble = [\"S9\"]", InvalidValueError, None),
        ("attack.epsilon = -0.1", InvalidValueError, None),
        ("scenario.families = [\"phishing\"]", InvalidValueError, None),
        ("attack.crop_scale = [0.9, 0.5]", InvalidValueError, None),
        ("data.pool_per_class = 0", InvalidValueError, None),
    ],
)
def test_bad_configs_are_rejected_with_location(text, err, line):
    with pytest.raises(err or ConfigError) as info:
        load_config(text)
    if line is not None:
        assert info.value.line == line
        assert f"line {line}" in str(info.value)


def test_overrides_take_precedence_over_file():
    cfg = load_config("seed = 2\nattack.steps = 10")
    out = with_overrides(cfg, "attack.steps = 20")
    assert out.seed == 2 and out.attack.steps == 20


def test_step_size_auto_and_explicit():
    assert load_config("attack.step_size = auto").attack.step_size is None
    assert load_config("attack.step_size = 0.002").attack.step_size == 0.002
