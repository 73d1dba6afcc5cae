import math

import numpy as np
import pytest

from batchrl.understanding import (
    ACTION,
    EnvDataset,
    EnvModelConfig,
    MixtureGenerator,
    Thresholds,
    UnderstandingError,
    action_dependence,
    contextual_bandit_rows,
    feature_importance,
    fit_env_model,
    run_checks,
    state_free_reward_rows,
    true_mdp_rows,
    verdicts,
)

from conftest import build_td


def env_dataset(rows):
    return EnvDataset.from_transition_data(build_td(rows))


@pytest.fixture(scope="module")
def reports():
    return {
        "mdp": run_checks(env_dataset(true_mdp_rows())),
        "bandit": run_checks(env_dataset(contextual_bandit_rows())),
        "state_free": run_checks(env_dataset(state_free_reward_rows())),
    }


def shift_dataset(n=4000, sigma=0.01, seed=0):
    """s' = s + a with Gaussian noise; a second feature is constant."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, n)
    a = rng.integers(0, 2, n)
    nxt = s + a + sigma * rng.standard_normal(n)
    states = np.stack([s, np.full(n, 0.25)], axis=1)
    return EnvDataset(
        states,
        np.eye(2)[a],
        nxt[:, None],
        np.zeros(n),
        np.array([f"e{i // 10}" for i in range(n)], dtype=object),
        ["s", "const"],
        ["a0", "a1"],
    )


def test_config_validation():
    with pytest.raises(UnderstandingError):
        EnvModelConfig(k=0)
    with pytest.raises(UnderstandingError):
        EnvModelConfig(fit_target="everything")


def test_near_deterministic_transition_nll():
    ds = shift_dataset()
    model = fit_env_model(ds, EnvModelConfig(k=1, epochs=300, patience=30))
    true = 0.5 * math.log(2 * math.pi * math.e * 0.01**2)  # entropy of the noise
    assert abs(model.heldout_nll - true) / abs(true) <= 0.05
    assert model.heldout_nll < model.initial_nll and not model.warnings


def test_mixture_generator_nll():
    gen = MixtureGenerator()
    ds = gen.sample(5000, seed=1)
    fits = {k: fit_env_model(ds, EnvModelConfig(k=k)) for k in (1, 2)}
    held = fits[2].heldout_idx
    true = gen.nll(ds.states[held], ds.next_states[held])
    assert abs(fits[2].heldout_nll - true) / abs(true) <= 0.05
    assert fits[1].heldout_nll > fits[2].heldout_nll


def test_constant_reward_reaches_clamp_bound():
    model = fit_env_model(shift_dataset(), EnvModelConfig(k=1, fit_target="reward"))
    bound = 0.5 * math.log(2 * math.pi) - 5.0  # log-stddev clamped at -5
    assert model.heldout_nll >= bound - 1e-9
    assert model.heldout_nll - bound <= 0.05


def test_constant_feature_has_zero_importance():
    ds = shift_dataset()
    model = fit_env_model(ds, EnvModelConfig(k=1, epochs=30))
    imp = feature_importance(model, ds)
    assert imp["const"] == 0.0
    assert imp["s"] > 1.0 and imp[ACTION] > 1.0


def test_importance_is_nll_increase():
    ds = shift_dataset()
    model = fit_env_model(ds, EnvModelConfig(k=1, epochs=10))
    X = ds.inputs[model.heldout_idx]
    y = ds.next_states[model.heldout_idx]
    masked = X.copy()
    masked[:, 0] = model.input_means[0]
    assert feature_importance(model, ds)["s"] == pytest.approx(model.nll(masked, y) - model.nll(X, y), abs=1e-12)


def test_action_dependence_on_flip():
    n = 10000
    rng = np.random.default_rng(2)
    flag = rng.integers(0, 2, n).astype(float)
    other = rng.normal(size=n)
    a = rng.integers(0, 2, n)
    nxt = np.stack([np.where(a == 1, 1.0 - flag, flag), rng.normal(size=n)], axis=1)
    ds = EnvDataset(
        np.stack([flag, other], axis=1), np.eye(2)[a], nxt, np.zeros(n),
        np.array([f"e{i // 5}" for i in range(n)], dtype=object), ["flag", "other"], ["keep", "flip"],
    )
    model = fit_env_model(ds, EnvModelConfig(k=2, epochs=60))
    dep = action_dependence(model, ds)
    # the flip moves the predicted mean by 1, i.e. 2 standard deviations of a fair coin
    assert abs(dep["flag"] - 2.0) <= 0.1
    assert dep["other"] < Thresholds().action_dependence


def test_single_action_has_no_dependence():
    ds = MixtureGenerator().sample(500)
    model = fit_env_model(ds, EnvModelConfig(k=1, epochs=2))
    assert action_dependence(model, ds) == {"x": 0.0}


def test_action_dependence_needs_discrete_actions():
    ds = MixtureGenerator().sample(300)
    ds.discrete = False
    model = fit_env_model(ds, EnvModelConfig(k=1, epochs=1))
    with pytest.raises(UnderstandingError, match="continuous|enumerable"):
        action_dependence(model, ds)


def test_verdicts_are_pure_function_of_scores():
    ti = {"s": 0.5, "action": 0.3}
    ri = {"s": 0.2, "action": 0.1}
    dep = {"s": 0.4}
    th = Thresholds()
    assert verdicts(ti, ri, dep, ["s"], th)[:2] == (True, True)
    assert verdicts({"s": 0.0, "action": 0.3}, ri, dep, ["s"], th)[:2] == (False, True)
    assert verdicts(ti, {"s": 0.0, "action": 0.1}, dep, ["s"], th)[:2] == (True, False)
    assert verdicts(ti, ri, {"s": 0.05}, ["s"], th)[:2] == (True, False)


def test_true_mdp_passes_both_checks(reports):
    r = reports["mdp"]
    assert r.transitions_predictable and r.reward_state_action_link


def test_bandit_fails_state_clause(reports):
    r = reports["bandit"]
    assert not r.transitions_predictable
    assert any("no sequential structure" in e for e in r.explanations)


def test_state_free_reward_fails_link(reports):
    r = reports["state_free"]
    assert r.transitions_predictable and not r.reward_state_action_link


def test_noise_feature_far_below_signal(reports):
    for kind in ("mdp", "state_free"):
        imp = reports[kind].transition_importance
        assert imp["signal"] >= 5 * max(imp["noise"], 0.0)
    imp = reports["mdp"].reward_importance
    assert imp["signal"] >= 5 * max(imp["noise"], 0.0)


def test_report_is_deterministic():
    ds = env_dataset(true_mdp_rows(episodes=100))
    cfg = EnvModelConfig(epochs=5)
    assert run_checks(ds, cfg=cfg).to_dict() == run_checks(ds, cfg=cfg).to_dict()


def test_gridworld_passes_both_checks(gridworld_data):
    _, rows, _ = gridworld_data
    r = run_checks(env_dataset(rows[:5000]))
    assert r.transitions_predictable and r.reward_state_action_link
