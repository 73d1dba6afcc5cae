"""Discrete-action and parametric-action DQN update rules."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..data import TransitionBatch
from ..neural import AdamState, MlpSpec, adam_step, init_params, loss_fn, mlp_backward, mlp_forward, n_params

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class DqnConfig:
    gamma: float = 0.99
    double_q: bool = True
    dueling: bool = False
    multi_step: int = 1
    target_update: str = "hard"  # "hard" or "polyak"
    target_update_every: int = 100
    tau: float = 0.005
    loss: str = "mse"
    huber_delta: float = 1.0
    learning_rate: float = 1e-3
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    sarsa: bool = False
    use_time_diff: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.multi_step < 1:
            raise ValueError("multi_step must be >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.target_update_every < 1:
            raise ValueError("target_update_every must be >= 1")
        if self.target_update not in ("hard", "polyak"):
            raise ValueError(f"unknown target_update {self.target_update!r}")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DqnConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
        return cls(**d)


def dueling_combine(V: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a')."""
    V = np.asarray(V, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or V.shape != (A.shape[0],):
        raise ValueError(f"V shape {V.shape} does not match advantages {A.shape}")
    return V[:, None] + A - A.mean(axis=1, keepdims=True)


def dueling_backward(dQ: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (V, A) given dLoss/dQ."""
    return dQ.sum(axis=1), dQ - dQ.mean(axis=1, keepdims=True)


def polyak(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    return tau * online + (1.0 - tau) * target


def _masked_max(q: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    masked = np.where(mask, q, -np.inf)
    idx = np.argmax(masked, axis=1)
    return masked[np.arange(q.shape[0]), idx], idx


class _QLearner:
    """Shared target-network bookkeeping, optimizer and loss handling."""

    cfg: DqnConfig
    spec: MlpSpec
    params: np.ndarray
    target_params: np.ndarray
    optim: AdamState
    steps: int

    def _init_common(self, cfg: DqnConfig, spec: MlpSpec):
        self.cfg = cfg
        self.spec = spec
        self.params = init_params(spec)
        self.target_params = self.params.copy()
        self.optim = AdamState.zeros(n_params(spec), lr=cfg.learning_rate)
        self.steps = 0
        self._loss = loss_fn(cfg.loss, cfg.huber_delta)

    def _apply(self, grad: np.ndarray, loss: float, batch: TransitionBatch, diagnose) -> None:
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite TD loss ({loss}); {diagnose()}")
        self.params, self.optim = adam_step(self.params, grad, self.optim)
        self.steps += 1
        if self.cfg.target_update == "hard":
            if self.steps % self.cfg.target_update_every == 0:
                self.target_params = self.params.copy()
        else:
            self.target_params = polyak(self.target_params, self.params, self.cfg.tau)
        if not np.all(np.isfinite(self.params)):
            raise NumericalError(f"non-finite parameters after step {self.steps}; {diagnose()}")

    def networks(self) -> Dict[str, Tuple[MlpSpec, np.ndarray]]:
        return {"q": (self.spec, self.params), "q_target": (self.spec, self.target_params)}

    def optimizers(self) -> Dict[str, AdamState]:
        return {"q": self.optim}

    def load_networks(self, params: Dict[str, np.ndarray], optims: Dict[str, AdamState], steps: int) -> None:
        self.params = params["q"].copy()
        self.target_params = params["q_target"].copy()
        if "q" in optims:
            self.optim = optims["q"]
        self.steps = steps


def _largest_input(states: np.ndarray, names: Sequence[str] | None) -> str:
    col = int(np.argmax(np.nanmax(np.abs(np.where(np.isfinite(states), states, np.inf)), axis=0)))
    name = names[col] if names is not None and col < len(names) else f"input[{col}]"
    return f"largest input activation in feature {name!r}"


class DiscreteDqn(_QLearner):
    """Q-network with one output per action (or a dueling V + A head)."""

    def __init__(self, state_dim: int, n_actions: int, cfg: DqnConfig = DqnConfig(), seed: int = 0, feature_names=None):
        self.n_actions = n_actions
        out = n_actions + 1 if cfg.dueling else n_actions
        spec = MlpSpec((state_dim, *cfg.hidden, out), (cfg.activation,) * len(cfg.hidden), seed)
        self._init_common(cfg, spec)
        self.feature_names = feature_names

    def _head(self, raw: np.ndarray) -> np.ndarray:
        if self.cfg.dueling:
            return dueling_combine(raw[:, 0], raw[:, 1:])
        return raw

    def q_values(self, states: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        p = self.params if params is None else params
        return self._head(mlp_forward(p, self.spec, states)[-1])

    def td_target(self, batch: TransitionBatch) -> np.ndarray:
        cfg = self.cfg
        live = batch.discounts > 0
        boot = np.zeros(len(batch))
        if live.any():
            s2 = batch.next_states[live]
            q_t = self.q_values(s2, self.target_params)
            if cfg.sarsa:
                a2 = batch.next_actions[live]
                if np.any(a2 < 0):
                    bad = batch.mdp_ids[live][a2 < 0][0]
                    raise ValueError(f"SARSA target needs next_action (mdp_id={bad!r})")
                boot[live] = q_t[np.arange(len(a2)), a2]
            else:
                mask = batch.next_mask[live]
                empty = ~mask.any(axis=1)
                if empty.any():
                    bad = batch.mdp_ids[live][empty][0]
                    raise ValueError(
                        f"Q-learning target needs possible_next_actions (mdp_id={bad!r})"
                    )
                if cfg.double_q:
                    _, a_star = _masked_max(self.q_values(s2), mask)
                    boot[live] = q_t[np.arange(len(a_star)), a_star]
                else:
                    boot[live], _ = _masked_max(q_t, mask)
        return batch.rewards + batch.discounts * boot

    def loss_and_grad(self, batch: TransitionBatch, y: np.ndarray, params: np.ndarray | None = None):
        """TD loss against fixed targets ``y`` and its gradient w.r.t. the parameters."""
        p = self.params if params is None else params
        acts = mlp_forward(p, self.spec, batch.states)
        q = self._head(acts[-1])
        rows = np.arange(len(batch))
        loss, g_pred = self._loss(q[rows, batch.actions], y)
        dQ = np.zeros_like(q)
        dQ[rows, batch.actions] = g_pred
        if self.cfg.dueling:
            dV, dA = dueling_backward(dQ)
            d_raw = np.concatenate([dV[:, None], dA], axis=1)
        else:
            d_raw = dQ
        grad, _ = mlp_backward(p, self.spec, acts, d_raw)
        return loss, grad

    def train_step(self, batch: TransitionBatch) -> Dict[str, float]:
        loss, grad = self.loss_and_grad(batch, self.td_target(batch))
        self._apply(grad, loss, batch, lambda: _largest_input(batch.states, self.feature_names))
        return {"td_loss": loss}


class ParametricDqn(_QLearner):
    """Scores concatenated (state, action-feature) pairs, one scalar per candidate."""

    def __init__(self, state_dim: int, action_dim: int, cfg: DqnConfig = DqnConfig(), seed: int = 0, feature_names=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        spec = MlpSpec((state_dim + action_dim, *cfg.hidden, 1), (cfg.activation,) * len(cfg.hidden), seed)
        self._init_common(cfg, spec)
        self.feature_names = feature_names

    def q_pairs(self, states: np.ndarray, actions: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        p = self.params if params is None else params
        return mlp_forward(p, self.spec, np.concatenate([states, actions], axis=1))[-1][:, 0]

    def q_candidates(self, states: np.ndarray, candidates: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """(N, ds) states x (N, K, da) candidates -> (N, K) values."""
        N, K, da = candidates.shape
        s = np.repeat(states, K, axis=0)
        return self.q_pairs(s, candidates.reshape(N * K, da), params).reshape(N, K)

    def td_target(self, batch: TransitionBatch) -> np.ndarray:
        live = batch.discounts > 0
        boot = np.zeros(len(batch))
        if live.any():
            s2 = batch.next_states[live]
            if self.cfg.sarsa:
                boot[live] = self.q_pairs(s2, batch.next_action_features[live], self.target_params)
            else:
                cands = batch.next_candidates[live]
                mask = batch.next_candidates_mask[live]
                empty = ~mask.any(axis=1)
                if empty.any():
                    bad = batch.mdp_ids[live][empty][0]
                    raise ValueError(f"Q-learning target needs possible_next_actions (mdp_id={bad!r})")
                q_t = self.q_candidates(s2, cands, self.target_params)
                if self.cfg.double_q:
                    _, a_star = _masked_max(self.q_candidates(s2, cands), mask)
                    boot[live] = q_t[np.arange(len(a_star)), a_star]
                else:
                    boot[live], _ = _masked_max(q_t, mask)
        return batch.rewards + batch.discounts * boot

    def loss_and_grad(self, batch: TransitionBatch, y: np.ndarray, params: np.ndarray | None = None):
        p = self.params if params is None else params
        x = np.concatenate([batch.states, batch.action_features], axis=1)
        acts = mlp_forward(p, self.spec, x)
        loss, g = self._loss(acts[-1][:, 0], y)
        grad, _ = mlp_backward(p, self.spec, acts, g[:, None])
        return loss, grad

    def train_step(self, batch: TransitionBatch) -> Dict[str, float]:
        loss, grad = self.loss_and_grad(batch, self.td_target(batch))
        x = np.concatenate([batch.states, batch.action_features], axis=1)
        self._apply(grad, loss, batch, lambda: _largest_input(x, self.feature_names))
        return {"td_loss": loss}


def parametric_q(net: ParametricDqn, state: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Q value for each candidate action feature row given one (normalized) state."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if actions.shape[0] == 0:
        raise ValueError("parametric_q needs at least one candidate action")
    s = np.repeat(np.atleast_2d(state), actions.shape[0], axis=0)
    return net.q_pairs(s, actions)
