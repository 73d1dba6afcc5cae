"""Bundled environments with exact oracles, plus logged-data generation.

Gridworld and the chain MDP are tabular (exact dynamic programming);
CartPole and PointMass are simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .timeline import RawRow


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class StepResult:
    next_state: object
    reward: float
    terminal: bool


# ---------------------------------------------------------------- gridworld

GRID_ACTIONS = ("up", "down", "left", "right")
_MOVES = {"up": (0, 1), "down": (0, -1), "left": (-1, 0), "right": (1, 0)}


@dataclass(frozen=True)
class Gridworld:
    width: int = 5
    height: int = 5
    walls: FrozenSet[Tuple[int, int]] = frozenset()
    start: Tuple[int, int] = (0, 0)
    goal: Tuple[int, int] = (4, 4)
    step_reward: float = 0.0
    goal_reward: float = 1.0
    gamma: float = 0.9
    slip: float = 0.0
    max_steps: int = 100

    actions = GRID_ACTIONS

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(tuple(w) for w in self.walls))
        if not 0.0 <= self.slip < 1.0:
            raise EnvError("slip must be in [0, 1)")
        for c in (self.start, self.goal):
            if not self._inside(c) or c in self.walls:
                raise EnvError(f"cell {c} is outside the grid or a wall")
        if not self._reachable():
            raise EnvError("goal is not reachable from start")

    def _inside(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def _reachable(self) -> bool:
        seen, frontier = {self.start}, [self.start]
        while frontier:
            c = frontier.pop()
            for a in GRID_ACTIONS:
                n = self.move(c, a)
                if n not in seen:
                    seen.add(n)
                    frontier.append(n)
        return self.goal in seen

    @property
    def cells(self) -> List[Tuple[int, int]]:
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in self.walls]

    @property
    def n_states(self) -> int:
        return len(self.cells)

    def cell_index(self, c) -> int:
        return self.cells.index(tuple(c))

    def move(self, cell, action: str):
        dx, dy = _MOVES[action]
        n = (cell[0] + dx, cell[1] + dy)
        return n if self._inside(n) and n not in self.walls else tuple(cell)

    def reset(self, rng: np.random.Generator | None = None):
        return self.start

    def step(self, state, action, rng: np.random.Generator | None = None) -> StepResult:
        if action not in _MOVES:
            raise EnvError(f"invalid gridworld action {action!r}")
        state = tuple(state)
        if state == self.goal:
            raise EnvError("episode already terminated at the goal")
        if self.slip > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            if rng.random() < self.slip:
                action = GRID_ACTIONS[int(rng.integers(len(GRID_ACTIONS)))]
        n = self.move(state, action)
        if n == self.goal:
            return StepResult(n, self.goal_reward, True)
        return StepResult(n, self.step_reward, False)

    def features(self, state) -> Dict[str, float]:
        idx = self.cell_index(state)
        return {f"cell_{i}": float(i == idx) for i in range(self.n_states)}

    def tabular(self) -> "TabularMdp":
        cells = self.cells
        S, A = len(cells), len(GRID_ACTIONS)
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        g = cells.index(self.goal)
        for i, c in enumerate(cells):
            if i == g:
                continue
            for a, name in enumerate(GRID_ACTIONS):
                outcomes = [(1.0 - self.slip, name)] + [
                    (self.slip / A, b) for b in GRID_ACTIONS if self.slip > 0
                ]
                for p, b in outcomes:
                    n = cells.index(self.move(c, b))
                    P[i, a, n] += p
                    R[i, a] += p * (self.goal_reward if n == g else self.step_reward)
        terminal = np.zeros(S, dtype=bool)
        terminal[g] = True
        return TabularMdp(P, R, terminal, cells.index(self.start), self.gamma)


# ---------------------------------------------------------------- tabular DP


@dataclass
class TabularMdp:
    """P[s, a, s'] transitions, R[s, a] expected reward; terminal states absorb with value 0."""

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    start: int
    gamma: float

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def q_from_v(self, V: np.ndarray) -> np.ndarray:
        Q = self.R + self.gamma * self.P @ V
        Q[self.terminal] = 0.0
        return Q

    def value_iteration(self, tol: float = 1e-10, max_iter: int = 100_000) -> Tuple[np.ndarray, np.ndarray]:
        V = np.zeros(self.n_states)
        for _ in range(max_iter):
            Q = self.q_from_v(V)
            V_new = Q.max(axis=1)
            V_new[self.terminal] = 0.0
            if np.max(np.abs(V_new - V)) <= tol * (1 - self.gamma) / max(self.gamma, 1e-12) / 2:
                V = V_new
                break
            V = V_new
        Q = self.q_from_v(V)
        return V, Q

    def evaluate(self, policy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Exact V^pi and Q^pi via a linear solve; policy[s, a] are action probabilities."""
        S = self.n_states
        P_pi = np.einsum("sa,sat->st", policy, self.P)
        r_pi = np.einsum("sa,sa->s", policy, self.R)
        live = ~self.terminal
        P_pi[~live] = 0.0
        r_pi[~live] = 0.0
        V = linalg.solve(np.eye(S) - self.gamma * P_pi, r_pi)
        return V, self.q_from_v(V)


@dataclass
class ValueIterationResult:
    values: Dict[Tuple[int, int], float]
    policy: Dict[Tuple[int, int], str]
    q: np.ndarray


def value_iteration(gw: Gridworld, gamma: float | None = None, tol: float = 1e-10) -> ValueIterationResult:
    mdp = gw.tabular()
    if gamma is not None:
        mdp.gamma = gamma
    V, Q = mdp.value_iteration(tol)
    cells = gw.cells
    policy = {}
    for i, c in enumerate(cells):
        if not mdp.terminal[i]:
            policy[c] = GRID_ACTIONS[int(np.argmax(Q[i]))]
    return ValueIterationResult({c: float(V[i]) for i, c in enumerate(cells)}, policy, Q)


# ---------------------------------------------------------------- cartpole

CARTPOLE_ACTIONS = ("left", "right")
CARTPOLE_FEATURES = ("x", "x_dot", "theta", "theta_dot")


@dataclass(frozen=True)
class CartPole:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12 * 2 * math.pi / 360
    max_steps: int = 200
    gamma: float = 0.99

    actions = CARTPOLE_ACTIONS

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=4)

    def accelerations(self, state, action) -> Tuple[float, float]:
        x, x_dot, theta, theta_dot = state
        force = self.force_mag if action == "right" else -self.force_mag
        total_mass = self.masscart + self.masspole
        polemass_length = self.masspole * self.length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        return x_acc, theta_acc

    def step(self, state, action, rng=None) -> StepResult:
        if action not in CARTPOLE_ACTIONS:
            raise EnvError(f"invalid cartpole action {action!r}")
        x, x_dot, theta, theta_dot = state
        x_acc, theta_acc = self.accelerations(state, action)
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        nxt = np.array([x, x_dot, theta, theta_dot])
        failed = abs(x) > self.x_threshold or abs(theta) > self.theta_threshold
        return StepResult(nxt, 1.0, bool(failed))

    def features(self, state) -> Dict[str, float]:
        return {k: float(v) for k, v in zip(CARTPOLE_FEATURES, state)}


# ---------------------------------------------------------------- point mass


@dataclass(frozen=True)
class PointMass:
    dt: float = 0.1
    horizon: int = 50
    action_cost: float = 0.1
    gamma: float = 1.0
    max_steps: int = 50

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-1.0, 1.0), 0.0])

    def step(self, state, action, rng=None) -> StepResult:
        a = float(action["force"]) if isinstance(action, dict) else float(action)
        if not -1.0 <= a <= 1.0 or not math.isfinite(a):
            raise EnvError(f"point-mass force must be in [-1, 1], got {a}")
        pos, vel = state
        reward = -(pos * pos + self.action_cost * a * a)
        return StepResult(np.array([pos + self.dt * vel, vel + self.dt * a]), reward, False)

    def features(self, state) -> Dict[str, float]:
        return {"pos": float(state[0]), "vel": float(state[1])}

    def lqr_gains(self) -> np.ndarray:
        """Finite-horizon LQR feedback gains K_t (force = -K_t @ state), one per step."""
        A = np.array([[1.0, self.dt], [0.0, 1.0]])
        B = np.array([[0.0], [self.dt]])
        Q = np.diag([1.0, 0.0])
        Rm = np.array([[self.action_cost]])
        P = np.zeros((2, 2))
        gains = []
        for _ in range(self.horizon):
            K = np.linalg.solve(Rm + B.T @ P @ B, B.T @ P @ A)
            P = Q + A.T @ P @ (A - B @ K)
            gains.append(K[0])
        return np.array(gains[::-1])

    def lqr_action(self, state, t: int, gains: np.ndarray | None = None) -> float:
        gains = self.lqr_gains() if gains is None else gains
        return float(np.clip(-gains[t] @ np.asarray(state), -1.0, 1.0))


# ---------------------------------------------------------------- policies


@dataclass
class DiscretePolicy:
    """State -> propensity vector over env.actions."""

    name: str
    fn: Callable[[object], np.ndarray]

    def propensities(self, state) -> np.ndarray:
        return self.fn(state)


def uniform_policy(n_actions: int) -> DiscretePolicy:
    p = np.full(n_actions, 1.0 / n_actions)
    return DiscretePolicy("uniform", lambda s: p)


def epsilon_greedy_probs(q: np.ndarray, eps: float, tie_tol: float = 1e-9) -> np.ndarray:
    """Epsilon-greedy propensities; the greedy mass is split evenly over tied maxima."""
    n = q.size
    best = q >= q.max() - tie_tol
    return np.full(n, eps / n) + (1.0 - eps) * best / best.sum()


def softmax_probs(q: np.ndarray, temperature: float) -> np.ndarray:
    z = (q - q.max()) / temperature
    e = np.exp(z)
    return e / e.sum()


def parse_policy(env, spec: str) -> DiscretePolicy:
    """Policies over the env's oracle Q*: uniform | eps:<v> | softmax:<t>."""
    if isinstance(env, PointMass):
        raise EnvError("point-mass logging uses uniform continuous actions")
    n = len(env.actions)
    if spec == "uniform":
        return uniform_policy(n)
    kind, _, value = spec.partition(":")
    if not isinstance(env, Gridworld):
        raise EnvError(f"policy {spec!r} needs a tabular oracle; only 'uniform' works for {type(env).__name__}")
    vi = value_iteration(env)
    cells = env.cells
    q = {c: vi.q[i] for i, c in enumerate(cells)}
    v = float(value)
    if kind == "eps":
        return DiscretePolicy(spec, lambda s: epsilon_greedy_probs(q[tuple(s)], v))
    if kind == "softmax":
        return DiscretePolicy(spec, lambda s: softmax_probs(q[tuple(s)], v))
    raise EnvError(f"unknown policy spec {spec!r}")


# ---------------------------------------------------------------- logging


def _episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode])


def rollout_episode(env, policy, rng: np.random.Generator, max_steps: int | None = None):
    """Yield (state, action_index, propensity_vector, reward, terminal) tuples."""
    max_steps = max_steps or env.max_steps
    state = env.reset(rng)
    for _ in range(max_steps):
        probs = policy.propensities(state)
        a = int(rng.choice(len(probs), p=probs))
        res = env.step(state, env.actions[a], rng)
        yield state, a, probs, res.reward, res.terminal
        if res.terminal:
            return
        state = res.next_state


def _episode_indices(episodes: int | None, min_rows: int | None, rows: list):
    if episodes is None and min_rows is None:
        raise EnvError("give an episode count or a minimum number of rows")
    i = 0
    while (episodes is None or i < episodes) and (min_rows is None or len(rows) < min_rows):
        yield i
        i += 1


def generate_logged_data(
    env, policy: DiscretePolicy | str, episodes: int | None = None, seed: int = 0, min_rows: int | None = None
) -> List[RawRow]:
    """Roll out the behavior policy and log rows with exact propensities.

    Stops after ``episodes`` episodes or once at least ``min_rows`` rows are
    logged (whole episodes only), whichever comes first.
    """
    rows: List[RawRow] = []
    if isinstance(env, PointMass):
        for i in _episode_indices(episodes, min_rows, rows):
            rng = _episode_rng(seed, i)
            state = env.reset(rng)
            for t in range(env.horizon):
                a = float(rng.uniform(-1.0, 1.0))
                res = env.step(state, a)
                rows.append(
                    RawRow(
                        mdp_id=f"{seed}-{i}",
                        sequence_number=t,
                        state_features=env.features(state),
                        action={"force": a},
                        action_probability=0.5,  # uniform density on [-1, 1]
                        metrics={"reward": res.reward},
                    )
                )
                state = res.next_state
        return rows
    if isinstance(policy, str):
        policy = parse_policy(env, policy)
    actions = list(env.actions)
    for i in _episode_indices(episodes, min_rows, rows):
        rng = _episode_rng(seed, i)
        for t, (state, a, probs, r, _) in enumerate(rollout_episode(env, policy, rng)):
            rows.append(
                RawRow(
                    mdp_id=f"{seed}-{i}",
                    sequence_number=t,
                    state_features=env.features(state),
                    action=actions[a],
                    action_probability=float(probs[a]),
                    metrics={"reward": float(r)},
                    possible_actions=list(actions),
                )
            )
    return rows


# ---------------------------------------------------------------- greedy evaluation


@dataclass
class GreedyEvaluation:
    """How a learned greedy policy fares against the env's oracle.

    ``value`` is the exact start-state value (gridworld) or the mean undiscounted
    return over the evaluation episodes. ``ratio`` is the share of oracle
    performance: value / oracle for rewards, oracle / value for costs.
    """

    value: float
    oracle: float
    agreement: float = float("nan")  # gridworld: share of states whose greedy action is optimal

    @property
    def ratio(self) -> float:
        if self.oracle < 0:
            return self.oracle / self.value if self.value != 0 else float("nan")
        return self.value / self.oracle


def evaluate_greedy(env, policy_fn, episodes: int = 100, seed: int = 999) -> GreedyEvaluation:
    """Evaluate a batched policy on a bundled env.

    For discrete envs ``policy_fn`` maps a list of feature maps to (N, A) values
    in ``env.actions`` order; for PointMass it returns (N,) forces.
    """
    if isinstance(env, Gridworld):
        mdp = env.tabular()
        q = np.asarray(policy_fn([env.features(c) for c in env.cells]))
        table = np.eye(len(GRID_ACTIONS))[q.argmax(axis=1)]
        V, _ = mdp.evaluate(table)
        v_star, q_star = mdp.value_iteration()
        live = ~mdp.terminal
        best = q_star >= q_star.max(axis=1, keepdims=True) - 1e-9
        agree = best[np.arange(len(q)), q.argmax(axis=1)][live].mean()
        return GreedyEvaluation(float(V[mdp.start]), float(v_star[mdp.start]), float(agree))
    rngs = [_episode_rng(seed, i) for i in range(episodes)]
    states = [env.reset(r) for r in rngs]
    returns = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    if isinstance(env, PointMass):
        gains = env.lqr_gains()
        oracle = np.zeros(episodes)
        lqr_states = [s.copy() for s in states]
        for t in range(env.horizon):
            forces = np.clip(np.asarray(policy_fn([env.features(s) for s in states]), dtype=float), -1.0, 1.0)
            for i in range(episodes):
                res = env.step(states[i], forces[i])
                returns[i] += res.reward
                states[i] = res.next_state
                ref = env.step(lqr_states[i], env.lqr_action(lqr_states[i], t, gains))
                oracle[i] += ref.reward
                lqr_states[i] = ref.next_state
        return GreedyEvaluation(float(returns.mean()), float(oracle.mean()))
    for _ in range(env.max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        q = np.asarray(policy_fn([env.features(states[i]) for i in idx]))
        for j, i in enumerate(idx):
            res = env.step(states[i], env.actions[int(np.argmax(q[j]))])
            returns[i] += res.reward
            states[i] = res.next_state
            if res.terminal:
                alive[i] = False
    return GreedyEvaluation(float(returns.mean()), float(env.max_steps))


@dataclass
class PolicyValue:
    value: float
    stderr: float
    exact: bool


def true_policy_value(env, policy, gamma: float | None = None, episodes: int = 10_000, seed: int = 0) -> PolicyValue:
    """Exact DP value for tabular envs, Monte Carlo rollout mean otherwise.

    ``policy`` is a DiscretePolicy, a policy spec string, or for tabular envs an
    (S, A) probability table.
    """
    if isinstance(env, Gridworld) and not callable(getattr(policy, "fn", None)) and not isinstance(policy, str):
        mdp = env.tabular()
        if gamma is not None:
            mdp.gamma = gamma
        V, _ = mdp.evaluate(np.asarray(policy))
        return PolicyValue(float(V[mdp.start]), 0.0, True)
    if isinstance(env, Gridworld):
        pol = parse_policy(env, policy) if isinstance(policy, str) else policy
        table = np.array([pol.propensities(c) if c != env.goal else np.full(4, 0.25) for c in env.cells])
        return true_policy_value(env, table, gamma)
    return rollout_value(env, policy, gamma, episodes, seed)


def rollout_value(env, policy, gamma: float | None = None, episodes: int = 1000, seed: int = 0) -> PolicyValue:
    gamma = env.gamma if gamma is None else gamma
    returns = np.empty(episodes)
    for i in range(episodes):
        rng = _episode_rng(seed, i)
        g, disc = 0.0, 1.0
        for _, _, _, r, _ in rollout_episode(env, policy, rng):
            g += disc * r
            disc *= gamma
        returns[i] = g
    se = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return PolicyValue(float(returns.mean()), se, False)


# ---------------------------------------------------------------- chain MDP


@dataclass
class ChainMdp:
    """Tabular chain fixture with both policies' exact values (the CPE oracle bundle)."""

    mdp: TabularMdp
    behavior: np.ndarray
    target: np.ndarray
    v_behavior: float
    v_target: float
    q_target: np.ndarray
    reward_table: np.ndarray
    reward_noise: float = 0.0

    actions = ("left", "right")

    def generate(self, episodes: int, rng: np.random.Generator, max_steps: int = 1000):
        """Sample behavior episodes as lists of (state, action, reward)."""
        mdp = self.mdp
        # all episodes advance in lockstep; inverse-CDF sampling per step
        pi_cdf = np.cumsum(self.behavior, axis=1)
        p_cdf = np.cumsum(mdp.P, axis=2)
        state = np.full(episodes, mdp.start)
        live = np.ones(episodes, dtype=bool)
        cols = []
        for _ in range(max_steps):
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            s = state[idx]
            a = _inverse_cdf(pi_cdf[s], rng.random(idx.size))
            nxt = _inverse_cdf(p_cdf[s, a], rng.random(idx.size))
            r = self.reward_table[s, a, nxt]
            if self.reward_noise:
                r = r + rng.normal(0.0, self.reward_noise, idx.size)
            cols.append((idx, s, a, r))
            state[idx] = nxt
            live[idx] = ~mdp.terminal[nxt]
        out = [[] for _ in range(episodes)]
        for idx, s, a, r in cols:
            for i, si, ai, ri in zip(idx.tolist(), s.tolist(), a.tolist(), r.tolist()):
                out[i].append((si, ai, ri))
        return out

    def to_json(self) -> dict:
        return {
            "n_states": self.mdp.n_states,
            "gamma": self.mdp.gamma,
            "start": self.mdp.start,
            "terminal": self.mdp.terminal.tolist(),
            "transitions": self.mdp.P.tolist(),
            "rewards": self.reward_table.tolist(),
            "expected_rewards": self.mdp.R.tolist(),
            "behavior": self.behavior.tolist(),
            "target": self.target.tolist(),
            "v_behavior": self.v_behavior,
            "v_target": self.v_target,
            "q_target": self.q_target.tolist(),
        }


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: first index whose cumulative probability exceeds u."""
    return np.minimum((cdf <= u[:, None]).sum(axis=1), cdf.shape[1] - 1)


def chain_mdp(
    n_states: int = 5,
    behavior: float | Sequence[float] = 0.5,
    target: float | Sequence[float] = 0.8,
    gamma: float = 0.9,
    slip: float = 0.1,
    goal_reward: float = 1.0,
    step_reward: float = 0.1,
) -> ChainMdp:
    """Chain 0 .. n-1 with actions left/right; entering n-1 ends the episode.

    ``behavior``/``target`` give the probability of moving right (scalar or per state).
    Each step pays ``step_reward`` times the new position index, plus ``goal_reward``
    on reaching the end; ``slip`` reverses the move direction.
    """
    if n_states < 2:
        raise EnvError("chain needs at least 2 states")
    S, A = n_states, 2
    P = np.zeros((S, A, S))
    Rt = np.zeros((S, A, S))
    for s in range(S - 1):
        for a in range(A):
            step = 1 if a == 1 else -1
            for d, p in ((step, 1.0 - slip), (-step, slip)):
                n = min(max(s + d, 0), S - 1)
                P[s, a, n] += p
        for n in range(S):
            Rt[s, :, n] = step_reward * n + (goal_reward if n == S - 1 else 0.0)
    R = np.einsum("san,san->sa", P, Rt)
    terminal = np.zeros(S, dtype=bool)
    terminal[S - 1] = True
    mdp = TabularMdp(P, R, terminal, 0, gamma)

    def table(p_right):
        pr = np.broadcast_to(np.asarray(p_right, dtype=float), (S,))
        return np.stack([1.0 - pr, pr], axis=1)

    pb, pe = table(behavior), table(target)
    Vb, _ = mdp.evaluate(pb)
    Ve, Qe = mdp.evaluate(pe)
    return ChainMdp(mdp, pb, pe, float(Vb[0]), float(Ve[0]), Qe, Rt)


def chain_eval_dataset(chain: ChainMdp, episodes, q_hat: np.ndarray | None = None, config=None, prefix: str = "ep"):
    """Wrap sampled chain episodes as a CPE dataset; q_hat[s, a] defaults to zeros."""
    from .cpe import CpeConfig, EvalDataset, EvalStep

    q_hat = np.zeros_like(chain.q_target) if q_hat is None else np.asarray(q_hat, dtype=float)
    data = []
    for i, ep in enumerate(episodes):
        steps = []
        for t, (s, a, r) in enumerate(ep):
            steps.append(
                EvalStep(
                    mdp_id=f"{prefix}{i:07d}",
                    ordinal=t + 1,
                    action=a,
                    reward=r,
                    logged_propensity=float(chain.behavior[s, a]),
                    target_propensities=chain.target[s],
                    q_values=q_hat[s],
                    terminal=t == len(ep) - 1,
                )
            )
        data.append(steps)
    return EvalDataset(data, chain.mdp.gamma, config or CpeConfig(rho_cap=None))
