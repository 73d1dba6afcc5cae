import random

import numpy as np
import pytest

from batchrl.data import PARAMETRIC, ActionSpace, TransitionData
from batchrl.envs import Gridworld, generate_logged_data
from batchrl.normalization import Preprocessor, collect_columns, fit_features, split_state_action
from batchrl.timeline import RawRow, timeline_join
from batchrl.trainer import TrainConfig, train


def build_td(rows, reward_weights=None) -> TransitionData:
    """Same wiring as the CLI: parametric action features get their own preprocessor."""
    ts = timeline_join(rows)
    state_specs, action_specs = split_state_action(fit_features(collect_columns(ts)))
    space = ActionSpace.infer(ts)
    action_pre = Preprocessor(action_specs) if action_specs and space.kind == PARAMETRIC else None
    return TransitionData(ts, Preprocessor(state_specs), space, reward_weights, action_pre)


@pytest.fixture(scope="session")
def gridworld_data():
    """About 10k transitions logged by epsilon-greedy (0.3) over the optimal Q."""
    gw = Gridworld()
    rows = generate_logged_data(gw, "eps:0.3", seed=0, min_rows=10_000)
    return gw, rows, build_td(rows)


@pytest.fixture(scope="session")
def gridworld_run(gridworld_data):
    """Default gridworld DQN config trained once and shared; data and model share seed 0 as in e2e."""
    gw, rows, td = gridworld_data
    cfg = TrainConfig.from_dict(
        {"algorithm": "dqn", "epochs": 30, "seed": 0, "dqn": {"gamma": 0.9}}
    )
    return gw, td, train(cfg, td)


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-coordinate |a - b| / max(|a|, |b|); coordinates below ``floor`` use ``floor``."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def match_episodes(seed: int = 0, n: int = 40, gamma: float = 0.9, exact_model: bool = True):
    """Deterministic-match episodes: propensity-1 logging and a target that repeats every logged action.

    With ``exact_model`` the Q estimate of each logged action is its realized
    discounted return-to-go and the reward model returns the realized reward,
    which is exact for a deterministic system. Otherwise both are random.
    """
    from batchrl.cpe import EvalStep

    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(n):
        T = int(rng.integers(1, 12))
        A = int(rng.integers(2, 5))
        rewards = rng.normal(1.0, 1.0, T)
        togo = np.zeros(T)
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = rewards[t] + gamma * acc
            togo[t] = acc
        steps = []
        for t in range(T):
            a = int(rng.integers(A))
            pi = np.zeros(A)
            pi[a] = 1.0
            q = rng.normal(0.0, 3.0, A)
            model = rng.normal(0.0, 3.0, A)
            if exact_model:
                q[a], model[a] = togo[t], rewards[t]
            steps.append(
                EvalStep(f"m{i:03d}", t + 1, a, float(rewards[t]), 1.0, pi, q, model_rewards=model, terminal=t == T - 1)
            )
        episodes.append(steps)
    return episodes


def fuzz_rows(n, seed):
    rnd = random.Random(seed)
    mdps = [f"m{rnd.randrange(10**6)}" for _ in range(max(1, n // 20))]
    rows, used = [], set()
    while len(rows) < n:
        m = rnd.choice(mdps)
        s = rnd.randrange(10**6)
        if (m, s) in used:
            continue
        used.add((m, s))
        rows.append(RawRow(m, s, {"f": rnd.random(), "g": float(s)}, rnd.choice("ab"), rnd.uniform(0.01, 1.0), {"r": rnd.random()}, ["a", "b"]))
    return rows


def check_linkage(rows, out):
    by_key = {(r.mdp_id, r.sequence_number): r for r in rows}
    assert len(out) == len(rows)
    for a, b in zip(out, out[1:]):
        if a.mdp_id == b.mdp_id:
            assert b.sequence_number > a.sequence_number
            assert b.sequence_number_ordinal == a.sequence_number_ordinal + 1
            assert a.next_state_features == by_key[(b.mdp_id, b.sequence_number)].state_features
            assert a.next_action == b.action
            assert a.time_diff == b.sequence_number - a.sequence_number
            assert not a.terminal
        else:
            assert a.terminal and a.next_state_features is None
            assert b.sequence_number_ordinal == 1
    assert out[-1].terminal


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = list(mod.summary_lines()) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
