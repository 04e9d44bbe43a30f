import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from subling.config import DEFAULTS, ConfigError, load_config, parse_override


def test_defaults_are_the_reported_hyperparameters():
    th = load_config(env={})["thresholds"]
    assert th == {"epsilon": 0.35, "eta": 0.4, "max_start_delta": 0.7, "n_max": 35,
                  "k": 15, "holdout_fraction": 0.2, "min_support": 2}


def test_file_then_env_then_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "thresholds": {"eta": 0.5}}))
    cfg = load_config(p, env={})
    assert cfg["seed"] == 3 and cfg["thresholds"]["eta"] == 0.5 and cfg["thresholds"]["k"] == 15
    assert load_config(p, env={"HERMES_SEED": "9"})["seed"] == 9
    cfg = load_config(p, ("seed=11", "thresholds.eta=0.45"), env={"HERMES_SEED": "9"})
    assert cfg["seed"] == 11 and cfg["thresholds"]["eta"] == 0.45


def test_defaults_not_mutated():
    load_config(overrides=("thresholds.k=4",), env={})
    assert DEFAULTS["thresholds"]["k"] == 15


@pytest.mark.parametrize("override,field", [
    ("thresholds.epsilon=1.5", "thresholds.epsilon"),
    ("thresholds.eta=0", "thresholds.eta"),
    ("thresholds.n_max=0", "thresholds.n_max"),
    ("thresholds.k=2.5", "thresholds.k"),
    ("thresholds.holdout_fraction=1", "thresholds.holdout_fraction"),
    ("sampling.top_p=0", "sampling.top_p"),
    ("retry.max_attempts=0", "retry.max_attempts"),
    ("thresholds.nope=1", "thresholds.nope"),
    ("bogus.key=1", "bogus"),
    ("seed=true", "seed"),
    ("jobs=0", "jobs"),
])
def test_violations_name_the_field(override, field):
    with pytest.raises(ConfigError) as info:
        load_config(overrides=(override,), env={})
    assert info.value.field == field and field in str(info.value)


def test_unknown_key_in_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"thresholds": {"epsilom": 0.3}}))
    with pytest.raises(ConfigError, match="thresholds.epsilom"):
        load_config(p, env={})


def test_bad_file_and_env(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p, env={})
    with pytest.raises(ConfigError, match="HERMES_SEED"):
        load_config(env={"HERMES_SEED": "abc"})


def test_override_values_are_json_or_strings():
    assert parse_override("a.b=0.5") == ("a.b", 0.5)
    assert parse_override("paths.outputs=run/1") == ("paths.outputs", "run/1")
    with pytest.raises(ConfigError):
        parse_override("no-equals")


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_epsilon_range(eps):
    ok = -1 < eps < 1
    try:
        load_config(overrides=(f"thresholds.epsilon={eps!r}",), env={})
    except ConfigError:
        assert not ok
    else:
        assert ok
