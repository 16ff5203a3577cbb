import pytest

from plat.config import PROFILES, derive_seed, dump_config, load_config, splitmix64
from plat.errors import ConfigError


def test_defaults_and_overrides():
    cfg = load_config(overrides=["planner.n_latent=2", "data.step_range=1,2", "eval.max_questions=none"])
    assert cfg.planner.n_latent == 2
    assert cfg.data.step_range == (1, 2)
    assert cfg.eval.max_questions is None


def test_precedence_profile_then_file_then_override(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[planner]\nalpha_ema = 0.5  # comment\nnoise_std = 0.2\n")
    cfg = load_config(p, ["planner.noise_std=0.3"], profile="paper-defaults")
    assert cfg.planner.alpha_ema == 0.5
    assert cfg.planner.noise_std == 0.3
    assert cfg.planner.d_latent == int(PROFILES["paper-defaults"]["planner.d_latent"])


@pytest.mark.parametrize("override", [
    "planner.bogus=1", "nosection.x=1", "planner.n_latent=two", "planner.alpha_ema=2",
    "backbone.vocab_size=10", "noequals", "data.step_range=1", "cot.phase=plat",
])
def test_bad_values_are_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_missing_file_and_bad_syntax(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        load_config(text="planner.n_latent = 2\n")
    with pytest.raises(ConfigError):
        load_config(profile="fast")


def test_dump_round_trips():
    cfg = load_config(overrides=["planner.n_latent=2", "rl.beta=0.05", "data.n_hard=7"])
    assert load_config(text=dump_config(cfg)) == cfg


def test_seed_derivation():
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert derive_seed(1, "cot") == derive_seed(1, "cot")
    assert derive_seed(1, "cot") != derive_seed(1, "plat")
    assert derive_seed(1, "cot") != derive_seed(2, "cot")
    assert 0 <= derive_seed(2**70, "x") < 2**63


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    assert load_config(p) == load_config()
