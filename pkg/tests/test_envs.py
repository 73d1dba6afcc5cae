import json
import math

import numpy as np
import pytest

from batchrl.envs import (
    CartPole,
    EnvError,
    Gridworld,
    PointMass,
    chain_mdp,
    epsilon_greedy_probs,
    evaluate_greedy,
    generate_logged_data,
    parse_policy,
    rollout_value,
    softmax_probs,
    true_policy_value,
    uniform_policy,
    value_iteration,
)
from batchrl.timeline import timeline_join


def line():
    return Gridworld(width=3, height=1, start=(0, 0), goal=(2, 0))


def test_gridworld_two_rights_reach_goal():
    gw = line()
    a = gw.step((0, 0), "right")
    b = gw.step(a.next_state, "right")
    assert (a.reward, a.terminal) == (0.0, False)
    assert (b.reward, b.terminal, b.next_state) == (1.0, True, (2, 0))


def test_gridworld_walls_and_edges_block():
    gw = Gridworld(walls=[(1, 0)])
    assert gw.step((0, 0), "right").next_state == (0, 0)
    assert gw.step((0, 0), "down").next_state == (0, 0)


def test_gridworld_errors():
    with pytest.raises(EnvError):
        line().step((0, 0), "jump")
    with pytest.raises(EnvError):
        line().step((2, 0), "left")
    with pytest.raises(EnvError, match="reachable"):
        Gridworld(width=3, height=1, goal=(2, 0), walls=[(1, 0)])


def test_value_iteration_line():
    vi = value_iteration(line())
    assert vi.values[(0, 0)] == pytest.approx(0.9, abs=1e-9)
    assert vi.values[(1, 0)] == pytest.approx(1.0, abs=1e-9)
    assert vi.policy == {(0, 0): "right", (1, 0): "right"}


def test_value_iteration_open_grid():
    # shortest path from (0,0) to (4,4) has 8 moves; the goal reward lands on the 8th
    assert value_iteration(Gridworld()).values[(0, 0)] == pytest.approx(0.9**7, abs=1e-9)


def test_slip_value_below_deterministic():
    assert value_iteration(Gridworld(slip=0.2)).values[(0, 0)] < 0.9**7


def test_true_policy_value_line():
    gw = line()
    assert true_policy_value(gw, "eps:0.0").value == pytest.approx(0.9, abs=1e-12)
    # uniform: V1 = 0.25 * 1 + 0.25 * 0.9 V0 + 0.5 * 0.9 V1, V0 = 0.25 * 0.9 V1 + 0.75 * 0.9 V0
    A = np.array([[1 - 0.675, -0.225], [-0.225, 1 - 0.45]])
    v0 = np.linalg.solve(A, [0.0, 0.25])[0]
    assert true_policy_value(gw, uniform_policy(4)).value == pytest.approx(v0, abs=1e-12)


def test_rollout_matches_dp_on_deterministic_policy():
    gw = Gridworld()
    mc = rollout_value(gw, parse_policy(gw, "eps:0.0"), episodes=5)
    assert mc.value == pytest.approx(true_policy_value(gw, "eps:0.0").value, abs=1e-12)
    assert mc.stderr == 0.0


def test_cartpole_dynamics_upright():
    cp = CartPole()
    x_acc, th_acc = cp.accelerations(np.zeros(4), "right")
    temp = 10.0 / 1.1
    expect_th = -temp / (0.5 * (4 / 3 - 0.1 / 1.1))
    assert th_acc == pytest.approx(expect_th, rel=1e-12)
    assert x_acc == pytest.approx(temp - 0.05 * expect_th / 1.1, rel=1e-12)
    res = cp.step(np.zeros(4), "right")
    assert np.allclose(res.next_state, [0.0, 0.02 * x_acc, 0.0, 0.02 * th_acc])
    assert (res.reward, res.terminal) == (1.0, False)


def test_cartpole_terminates_past_angle():
    res = CartPole().step(np.array([0.0, 0.0, 0.25, 0.0]), "left")
    assert res.terminal


def test_pointmass_dynamics():
    pm = PointMass()
    res = pm.step(np.array([1.0, 0.0]), 0.0)
    assert np.allclose(res.next_state, [1.0, 0.0]) and res.reward == -1.0
    res = pm.step(np.array([0.5, 0.2]), {"force": 1.0})
    assert np.allclose(res.next_state, [0.52, 0.3]) and res.reward == pytest.approx(-0.35)
    with pytest.raises(EnvError):
        pm.step(np.zeros(2), 1.5)


def test_lqr_matches_open_loop_optimum():
    """Unclipped LQR cost equals the least-squares optimum over the whole action sequence."""
    pm = PointMass()
    H, c, dt = pm.horizon, pm.action_cost, pm.dt
    x0 = np.array([0.1, 0.0])
    # pos_t = x0[0] + dt * t * x0[1] + dt^2 * sum_{k < t - 1} (t - 1 - k) u_k
    h = np.array([x0[0] + dt * t * x0[1] for t in range(H)])
    G = np.zeros((H, H))
    for t in range(H):
        for k in range(t - 1):
            G[t, k] = dt * dt * (t - 1 - k)
    u = -np.linalg.solve(G.T @ G + c * np.eye(H), G.T @ h)
    best = np.sum((h + G @ u) ** 2) + c * np.sum(u**2)

    gains = pm.lqr_gains()
    x, cost = x0.copy(), 0.0
    for t in range(H):
        a = -gains[t] @ x
        assert abs(a) < 1.0  # no clipping on this start
        res = pm.step(x, a)
        cost -= res.reward
        x = res.next_state
    assert cost == pytest.approx(best, rel=1e-9)


def test_epsilon_greedy_propensities():
    p = epsilon_greedy_probs(np.array([1.0, 3.0, 2.0, 0.0]), 0.3)
    assert np.allclose(p, [0.075, 0.775, 0.075, 0.075])
    ties = epsilon_greedy_probs(np.array([1.0, 1.0, 0.0, 0.0]), 0.2)
    assert np.allclose(ties, [0.45, 0.45, 0.05, 0.05])


def test_softmax_propensities():
    assert np.allclose(softmax_probs(np.array([1.0, 1.0]), 1.0), [0.5, 0.5])
    p = softmax_probs(np.array([0.0, math.log(3.0)]), 1.0)
    assert np.allclose(p, [0.25, 0.75])


def test_parse_policy_errors():
    with pytest.raises(EnvError):
        parse_policy(Gridworld(), "boltzmann:1")
    with pytest.raises(EnvError):
        parse_policy(CartPole(), "eps:0.1")
    assert np.allclose(parse_policy(CartPole(), "uniform").propensities(None), [0.5, 0.5])


def test_logged_data_propensities_and_structure():
    gw = Gridworld()
    rows = generate_logged_data(gw, "eps:0.3", seed=0, episodes=50)
    vi = value_iteration(gw)
    for r in rows:
        cell = next(gw.cells[int(k.split("_")[1])] for k, v in r.state_features.items() if v == 1.0)
        q = vi.q[gw.cell_index(cell)]
        expect = epsilon_greedy_probs(q, 0.3)[gw.actions.index(r.action)]
        assert r.action_probability == pytest.approx(expect, abs=1e-12)
    # every episode ends at the goal or after max_steps
    ts = timeline_join(rows)
    ends = [t for t in ts if t.next_state_features is None or t.terminal]
    assert len({t.mdp_id for t in ends}) == 50


def test_min_rows_stops_on_whole_episodes():
    rows = generate_logged_data(Gridworld(), "eps:0.3", seed=0, min_rows=10_000)
    ids = [r.mdp_id for r in rows]
    last = ids[-1]
    assert len(rows) >= 10_000
    assert len(rows) - ids.count(last) < 10_000


def test_logging_is_deterministic():
    a = generate_logged_data(Gridworld(), "eps:0.3", seed=5, episodes=20)
    b = generate_logged_data(Gridworld(), "eps:0.3", seed=5, episodes=20)
    c = generate_logged_data(Gridworld(), "eps:0.3", seed=6, episodes=20)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [r.to_dict() for r in a] != [r.to_dict() for r in c]


def test_pointmass_logging_uses_uniform_density():
    rows = generate_logged_data(PointMass(), "uniform", seed=0, episodes=3)
    assert len(rows) == 3 * PointMass().horizon
    assert all(r.action_probability == 0.5 and -1 <= r.action["force"] <= 1 for r in rows)


def test_evaluate_greedy_gridworld():
    gw = Gridworld()
    vi = value_iteration(gw)
    q = {c: vi.q[i] for i, c in enumerate(gw.cells)}
    cells = {json.dumps(gw.features(c), sort_keys=True): c for c in gw.cells}

    def oracle(features):
        return np.array([q[cells[json.dumps(f, sort_keys=True)]] for f in features])

    ev = evaluate_greedy(gw, oracle)
    assert ev.ratio == pytest.approx(1.0, abs=1e-12) and ev.agreement == 1.0
    # always "left" from the start corner never moves
    stuck = evaluate_greedy(gw, lambda fs: np.tile([0.0, 0.0, 1.0, 0.0], (len(fs), 1)))
    assert stuck.value == 0.0


def test_evaluate_greedy_pointmass_lqr_gains():
    pm = PointMass()
    ev = evaluate_greedy(pm, lambda fs: np.zeros(len(fs)), episodes=20)
    assert ev.oracle < 0 and ev.value < ev.oracle and ev.ratio < 1.0


def test_chain_fixture_values():
    chain = chain_mdp()
    mdp = chain.mdp
    # exact policy evaluation satisfies the Bellman equation
    for pi, v in ((chain.behavior, chain.v_behavior), (chain.target, chain.v_target)):
        V, Q = mdp.evaluate(pi)
        assert V[0] == pytest.approx(v, abs=1e-12)
        live = ~mdp.terminal
        assert np.allclose(V[live], (pi * (mdp.R + mdp.gamma * mdp.P @ V)).sum(axis=1)[live], atol=1e-12)
    assert chain.v_target > chain.v_behavior
    doc = chain.to_json()
    assert set(doc) >= {"transitions", "rewards", "behavior", "target", "v_behavior", "v_target", "q_target"}
    assert np.allclose(np.sum(doc["transitions"][0], axis=1), 1.0)


def test_chain_generate_matches_behavior_value():
    chain = chain_mdp()
    eps = chain.generate(10_000, np.random.default_rng(0))
    g = np.array([sum(chain.mdp.gamma**t * r for t, (_, _, r) in enumerate(ep)) for ep in eps])
    se = g.std(ddof=1) / math.sqrt(len(g))
    assert abs(g.mean() - chain.v_behavior) <= 3 * se
    # empirical right-move frequency matches the behavior policy
    acts = np.array([a for ep in eps for _, a, _ in ep])
    assert abs(acts.mean() - 0.5) <= 3 * math.sqrt(0.25 / acts.size)
    assert all(ep[-1][0] != chain.mdp.n_states - 1 for ep in eps)
