"""Mixture-density environment model and checks on the MDP formulation of logged data.

The model maps (state, action) to a Gaussian mixture over the next state or the
reward. Two checks are run on top of it: whether transitions depend on both
actions and states, and whether some action-dependent state feature predicts
the reward. Anything failing suggests a bandit framing may suit the data better.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import DISCRETE, TransitionData, split_by_mdp
from .neural import (
    AdamState,
    MlpSpec,
    adam_step,
    gmm_nll,
    gmm_nll_grad,
    gmm_output_width,
    init_params,
    mlp_backward,
    mlp_forward,
    n_params,
    split_gmm_output,
)
from .timeline import RawRow

logger = logging.getLogger(__name__)

NEXT_STATE = "next_state"
REWARD = "reward"
JOINT = "joint"
ACTION = "action"
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class UnderstandingError(ValueError):
    pass


@dataclass
class EnvModelConfig:
    k: int = 3
    fit_target: str = NEXT_STATE
    epochs: int = 100
    learning_rate: float = 3e-3
    hidden: Tuple[int, ...] = (32, 32)
    batch_size: int = 128
    patience: int = 8
    holdout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise UnderstandingError("k must be >= 1")
        if self.fit_target not in (NEXT_STATE, REWARD, JOINT):
            raise UnderstandingError(f"unknown fit_target {self.fit_target!r}")
        if not 0.0 < self.holdout < 1.0:
            raise UnderstandingError("holdout fraction must be in (0, 1)")
        self.hidden = tuple(self.hidden)


@dataclass
class Thresholds:
    action_importance: float = 0.01  # nats
    state_importance: float = 0.01
    reward_importance: float = 0.01
    action_dependence: float = 0.1  # stddev-normalized


@dataclass
class EnvDataset:
    """Model inputs and targets as plain arrays, with a per-row episode id."""

    states: np.ndarray
    actions: np.ndarray  # one-hot for discrete actions, features otherwise
    next_states: np.ndarray
    rewards: np.ndarray
    mdp_ids: np.ndarray
    state_names: List[str]
    action_names: List[str]
    terminal: np.ndarray | None = None
    discrete: bool = True
    # feature -> state columns; enum features own several one-hot columns
    state_groups: Dict[str, List[int]] | None = None

    def __post_init__(self):
        n = self.states.shape[0]
        if self.terminal is None:
            self.terminal = np.zeros(n, dtype=bool)
        if self.state_groups is None:
            self.state_groups = {name: [j] for j, name in enumerate(self.state_names)}
        for name in ("actions", "next_states", "rewards", "mdp_ids", "terminal"):
            if getattr(self, name).shape[0] != n:
                raise UnderstandingError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def features(self) -> List[str]:
        return list(self.state_groups)

    def input_groups(self) -> Dict[str, List[int]]:
        """Masking units: each state feature, then the action as one block (discrete)
        or one entry per action feature (parametric/continuous)."""
        groups = dict(self.state_groups)
        ds = self.states.shape[1]
        if self.discrete:
            groups[ACTION] = list(range(ds, ds + len(self.action_names)))
        else:
            for j, a in enumerate(self.action_names):
                groups[ACTION + ":" + a] = [ds + j]
        return groups

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    def subset(self, idx: np.ndarray) -> "EnvDataset":
        return EnvDataset(
            self.states[idx],
            self.actions[idx],
            self.next_states[idx],
            self.rewards[idx],
            self.mdp_ids[idx],
            self.state_names,
            self.action_names,
            self.terminal[idx],
            self.discrete,
            self.state_groups,
        )

    @classmethod
    def from_transition_data(cls, td: TransitionData) -> "EnvDataset":
        if td.action_space.kind == DISCRETE:
            actions = np.eye(td.action_space.n)[td.actions]
            names = list(td.action_space.names)
        else:
            actions = td.action_features
            names = list(td.action_space.feature_ids)
        return cls(
            td.states,
            actions,
            td.next_states,
            td.rewards,
            td.mdp_ids,
            td.state_pre.column_names,
            names,
            td.terminal.copy(),
            td.action_space.kind == DISCRETE,
            {f: list(range(off, off + w)) for f, (off, w) in td.state_pre.layout.items()},
        )


@dataclass
class EnvModel:
    spec: MlpSpec
    params: np.ndarray
    k: int
    fit_target: str
    target_dim: int
    input_means: np.ndarray
    target_std: np.ndarray
    heldout_nll: float
    initial_nll: float
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    warnings: List[str] = field(default_factory=list)

    def head(self, inputs: np.ndarray):
        return split_gmm_output(mlp_forward(self.params, self.spec, inputs)[-1], self.k, self.target_dim)

    def nll(self, inputs: np.ndarray, targets: np.ndarray) -> float:
        return float(np.mean(gmm_nll(self.head(inputs), targets)))

    def mean_prediction(self, inputs: np.ndarray) -> np.ndarray:
        h = self.head(inputs)
        return np.einsum("nk,nkd->nd", h.weights, h.means)


def _targets(ds: EnvDataset, fit_target: str) -> Tuple[np.ndarray, np.ndarray]:
    """(row mask, target matrix); next-state targets skip terminal rows."""
    if fit_target == REWARD:
        return np.ones(len(ds), dtype=bool), ds.rewards[:, None]
    rows = ~ds.terminal
    if fit_target == NEXT_STATE:
        return rows, ds.next_states
    return rows, np.concatenate([ds.next_states, ds.rewards[:, None]], axis=1)


def fit_env_model(ds: EnvDataset, cfg: EnvModelConfig = EnvModelConfig()) -> EnvModel:
    """Minimize mixture NLL on a train split of episodes and record held-out NLL."""
    rows, target = _targets(ds, cfg.fit_target)
    X = ds.inputs
    train, held = split_by_mdp(ds.mdp_ids, cfg.holdout, cfg.seed)
    train, held = train[rows[train]], held[rows[held]]
    if len(train) == 0 or len(held) == 0:
        raise UnderstandingError("empty train or held-out split")
    # a slice of the training episodes drives early stopping
    fit_pos, val_pos = split_by_mdp(ds.mdp_ids[train], 0.1, cfg.seed + 1)
    fit, val = train[fit_pos], train[val_pos]
    d = target.shape[1]
    spec = MlpSpec((X.shape[1], *cfg.hidden, gmm_output_width(cfg.k, d)), ("tanh",) * len(cfg.hidden), cfg.seed)
    params = init_params(spec)
    # start components near the target mean with the target's spread
    out_bias = params[-gmm_output_width(cfg.k, d) :]
    rng = np.random.default_rng(cfg.seed)
    mu = target[fit].mean(axis=0)
    sd = target[fit].std(axis=0) + 1e-6
    out_bias[cfg.k : cfg.k + cfg.k * d] = (mu + sd * rng.standard_normal((cfg.k, d))).ravel()
    out_bias[cfg.k + cfg.k * d :] = np.tile(np.log(sd), cfg.k)

    def mean_nll(p, idx):
        out = mlp_forward(p, spec, X[idx])[-1]
        return float(np.mean(gmm_nll(split_gmm_output(out, cfg.k, d), target[idx])))

    initial = mean_nll(params, held)
    optim = AdamState.zeros(n_params(spec), lr=cfg.learning_rate)
    best, best_val, stale = params, mean_nll(params, val), 0
    for _ in range(cfg.epochs):
        perm = fit[rng.permutation(len(fit))]
        for i in range(0, len(perm), cfg.batch_size):
            b = perm[i : i + cfg.batch_size]
            acts = mlp_forward(params, spec, X[b])
            _, g = gmm_nll_grad(acts[-1], target[b], cfg.k, d)
            grad, _ = mlp_backward(params, spec, acts, g / len(b))
            if not np.all(np.isfinite(grad)):
                raise UnderstandingError("non-finite gradient while fitting the environment model")
            params, optim = adam_step(params, grad, optim)
        v = mean_nll(params, val)
        if v < best_val:
            best, best_val, stale = params, v, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params = best
    final = mean_nll(params, held)
    warnings = []
    if not final < initial:
        warnings.append(f"{cfg.fit_target} model did not improve held-out NLL ({initial:.4f} -> {final:.4f})")
        logger.warning(warnings[-1])
    return EnvModel(
        spec,
        params,
        cfg.k,
        cfg.fit_target,
        d,
        X[fit].mean(axis=0),
        target[fit].std(axis=0),
        final,
        initial,
        train,
        held,
        warnings,
    )


def feature_importance(model: EnvModel, ds: EnvDataset) -> Dict[str, float]:
    """Held-out NLL increase when each feature is set to its training mean.

    Multi-column features (enums, the one-hot action) are masked as a block so the
    masked input keeps the block's sum, as every training row does.
    """
    _, target = _targets(ds, model.fit_target)
    X = ds.inputs[model.heldout_idx]
    y = target[model.heldout_idx]
    base = model.nll(X, y)
    out = {}
    for name, cols in ds.input_groups().items():
        masked = X.copy()
        masked[:, cols] = model.input_means[cols]
        out[name] = model.nll(masked, y) - base
    return out


def action_dependence(model: EnvModel, ds: EnvDataset) -> Dict[str, float]:
    """Mean spread (max - min over actions) of predicted next-state means, per feature."""
    if model.fit_target != NEXT_STATE:
        raise UnderstandingError("action dependence needs a next_state model")
    if not ds.discrete:
        raise UnderstandingError(
            "action dependence needs an enumerable action set; sample candidate actions for continuous spaces"
        )
    S = ds.states[model.heldout_idx]
    A = len(ds.action_names)
    preds = np.stack([model.mean_prediction(np.concatenate([S, np.tile(np.eye(A)[a], (len(S), 1))], axis=1)) for a in range(A)])
    spread = (preds.max(axis=0) - preds.min(axis=0)).mean(axis=0)
    std = model.target_std
    scores = np.where(std > 0, spread / np.where(std > 0, std, 1.0), 0.0)
    return {name: float(scores[cols].max()) for name, cols in ds.state_groups.items()}


@dataclass
class DataHealthReport:
    transition_importance: Dict[str, float]
    reward_importance: Dict[str, float]
    action_dependence: Dict[str, float]
    transitions_predictable: bool
    reward_state_action_link: bool
    explanations: List[str]
    thresholds: Thresholds
    heldout_nll: Dict[str, float]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def ranked(d):
            return [[k, v] for k, v in sorted(d.items(), key=lambda kv: -kv[1])]

        return {
            "checks": {
                "transitions_predictable": self.transitions_predictable,
                "reward_state_action_link": self.reward_state_action_link,
            },
            "explanations": self.explanations,
            "thresholds": asdict(self.thresholds),
            "transition_importance": ranked(self.transition_importance),
            "reward_importance": ranked(self.reward_importance),
            "action_dependence": ranked(self.action_dependence),
            "heldout_nll": self.heldout_nll,
            "warnings": self.warnings,
        }


def verdicts(
    transition_importance: Dict[str, float],
    reward_importance: Dict[str, float],
    dependence: Dict[str, float],
    state_names: Sequence[str],
    th: Thresholds,
) -> Tuple[bool, bool, List[str]]:
    """Pure function of the scores and thresholds."""
    action_keys = [k for k in transition_importance if k not in set(state_names)]
    act = [k for k in action_keys if transition_importance[k] > th.action_importance]
    st = [k for k in state_names if transition_importance[k] > th.state_importance]
    check1 = bool(act) and bool(st)
    notes = []
    if not act:
        notes.append("no action input changes the next-state likelihood: actions do not drive transitions")
    if not st:
        notes.append("no state feature predicts the next state: the problem has no sequential structure")
    if check1:
        notes.append(f"transitions depend on actions ({', '.join(act)}) and states ({', '.join(st)})")
    linked = [
        f for f in state_names if dependence.get(f, 0.0) > th.action_dependence and reward_importance[f] > th.reward_importance
    ]
    check2 = bool(linked)
    if check2:
        notes.append(f"action-dependent state features predict reward: {', '.join(linked)}")
    else:
        notes.append("no state feature is both action-dependent and reward-predictive: consider a bandit formulation")
    return check1, check2, notes


def run_checks(
    ds: EnvDataset,
    thresholds: Thresholds = Thresholds(),
    cfg: EnvModelConfig = EnvModelConfig(),
) -> DataHealthReport:
    """Fit separate next-state and reward models, then derive both verdicts."""
    trans = fit_env_model(ds, EnvModelConfig(**{**asdict(cfg), "fit_target": NEXT_STATE}))
    reward = fit_env_model(ds, EnvModelConfig(**{**asdict(cfg), "fit_target": REWARD}))
    ti = feature_importance(trans, ds)
    ri = feature_importance(reward, ds)
    dep = action_dependence(trans, ds) if ds.discrete else {}
    c1, c2, notes = verdicts(ti, ri, dep, ds.features, thresholds)
    return DataHealthReport(
        ti,
        ri,
        dep,
        c1,
        c2,
        notes,
        thresholds,
        {NEXT_STATE: trans.heldout_nll, REWARD: reward.heldout_nll},
        trans.warnings + reward.warnings,
    )


# ---------------------------------------------------------------- synthetic generators

SYNTHETIC_ACTIONS = ("a0", "a1")


def _synthetic_rows(kind: str, episodes: int, length: int, seed: int) -> List[RawRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for e in range(episodes):
        signal = rng.uniform(-1.0, 1.0)
        noise = rng.standard_normal()
        for t in range(length):
            a = int(rng.integers(2))
            push = 0.5 if a else -0.5
            if kind == "bandit":
                reward = signal * push + 0.2 * rng.standard_normal()
            elif kind == "state_free":
                reward = push + 0.2 * rng.standard_normal()
            else:
                reward = signal + 0.2 * rng.standard_normal()
            rows.append(
                RawRow(
                    mdp_id=f"{kind}-{e}",
                    sequence_number=t,
                    state_features={"signal": float(signal), "noise": float(noise)},
                    action=SYNTHETIC_ACTIONS[a],
                    action_probability=0.5,
                    metrics={"reward": float(reward)},
                    possible_actions=list(SYNTHETIC_ACTIONS),
                )
            )
            if kind == "bandit":
                signal = rng.uniform(-1.0, 1.0)
            else:
                signal = float(np.clip(signal + push + 0.2 * rng.standard_normal(), -3.0, 3.0))
            noise = rng.standard_normal()
    return rows


def true_mdp_rows(episodes: int = 500, length: int = 10, seed: int = 0) -> List[RawRow]:
    """'signal' moves with the action and drives reward; 'noise' is fresh each step."""
    return _synthetic_rows("mdp", episodes, length, seed)


def contextual_bandit_rows(episodes: int = 500, length: int = 10, seed: int = 0) -> List[RawRow]:
    """Reward depends on (signal, action); next state is independent of everything."""
    return _synthetic_rows("bandit", episodes, length, seed)


def state_free_reward_rows(episodes: int = 500, length: int = 10, seed: int = 0) -> List[RawRow]:
    """Transitions as in the MDP generator but the reward only sees the action."""
    return _synthetic_rows("state_free", episodes, length, seed)


@dataclass
class MixtureGenerator:
    """x' = 0.5 x + u * spread + sigma * eps with u = +-1 equally likely."""

    spread: float = 1.5
    sigma: float = 0.3

    def sample(self, n: int, seed: int = 0, episode_length: int = 10) -> EnvDataset:
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, size=n)
        u = rng.choice([-1.0, 1.0], size=n)
        nxt = 0.5 * x + u * self.spread + self.sigma * rng.standard_normal(n)
        return EnvDataset(
            x[:, None],
            np.ones((n, 1)),
            nxt[:, None],
            np.zeros(n),
            np.array([f"mix-{i // episode_length}" for i in range(n)], dtype=object),
            ["x"],
            ["a0"],
        )

    def nll(self, states: np.ndarray, next_states: np.ndarray) -> float:
        """Mean analytic negative log-likelihood of the true mixture density."""
        x, y = states[:, 0], next_states[:, 0]
        comps = []
        for u in (-1.0, 1.0):
            z = (y - 0.5 * x - u * self.spread) / self.sigma
            comps.append(math.log(0.5) - _HALF_LOG_2PI - math.log(self.sigma) - 0.5 * z * z)
        return float(-np.mean(np.logaddexp(comps[0], comps[1])))
