import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfmkit import config as C
from cfmkit.config import RunConfig
from cfmkit.errors import ConfigError


def test_defaults_round_trip_through_ini():
    assert C.loads(C.dumps(RunConfig())) == RunConfig()


@given(st.integers(0, 2**63), st.floats(1e-6, 1.0), st.booleans(), st.lists(st.integers(1, 64), min_size=1, max_size=4))
def test_any_valid_config_round_trips(seed, lr, shared, hidden):
    cfg = RunConfig(seed=seed, learning_rate=lr, shared_dropout=shared, hidden=tuple(hidden))
    assert C.loads(C.dumps(cfg)) == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_missing_keys_take_defaults():
    cfg = C.loads("[objectives]\nsegments = 4\n")
    assert cfg.segments == 4
    assert cfg.alpha == RunConfig().alpha


@pytest.mark.parametrize("text", [
    "[objectives]\nsegmentz = 2\n",
    "[bogus]\nx = 1\n",
    "[objectives]\nsegments = two\n",
    "[objectives]\nsegments = 0\n",
    "[trainer]\nshared_dropout = maybe\n",
    "[schedules]\ndelta_t = 0.6\n",
])
def test_schema_errors(text):
    with pytest.raises(ConfigError) as info:
        C.loads(text)
    assert not isinstance(info.value, C.ConfigParseError)


def test_parse_errors_are_distinct():
    with pytest.raises(C.ConfigParseError):
        C.loads("segments = 2\n")
    with pytest.raises(C.ConfigParseError):
        C.loads("[objectives]\nsegments = 2\nsegments = 3\n")


def test_overrides():
    cfg = C.apply_overrides(RunConfig(), ["objectives.segments=3", "trainer.freeze_encoder=false", "nfe=1,2,4"])
    assert (cfg.segments, cfg.freeze_encoder, cfg.nfe) == (3, False, (1, 2, 4))
    with pytest.raises(ConfigError):
        C.apply_overrides(RunConfig(), ["trainer.segments=3"])
    with pytest.raises(ConfigError):
        C.apply_overrides(RunConfig(), ["segments"])
    with pytest.raises(ConfigError):
        C.apply_overrides(RunConfig(), ["objectives.nope=1"])


def test_finetune_rate_applies_to_later_stages_only():
    cfg = RunConfig(learning_rate=1e-3, finetune_learning_rate=1e-5)
    assert cfg.learning_rate_for("stage1") == 1e-3
    assert cfg.learning_rate_for("stage2") == 1e-5
    assert cfg.learning_rate_for("adversarial") == 1e-5
    assert RunConfig(learning_rate=1e-3).learning_rate_for("stage2") == 1e-3


def test_describe_keys_lists_every_key():
    text = C.describe_keys()
    for key, section in C.SECTION_OF.items():
        assert f"{section}.{key} = " in text


def test_loss_config_follows_run_config():
    lc = RunConfig(segments=3, alpha=0.5, metric="pseudo-huber").loss_config(0.01)
    assert (lc.segments, lc.alpha, lc.metric, lc.delta_t) == (3, 0.5, "pseudo-huber", 0.01)
