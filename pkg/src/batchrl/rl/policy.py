"""Serving-time action selection, the send/drop threshold policy and its PID controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np

SEND = "send"
DROP = "drop"


@dataclass(frozen=True)
class PolicyDecision:
    action: object
    propensity: float
    propensities: Dict[object, float]

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "propensity": self.propensity,
            "propensities": [[a, p] for a, p in self.propensities.items()],
        }


def parse_mode(mode: str) -> tuple[str, float]:
    """'greedy' | 'epsilon:<e>' | 'softmax:<t>' -> (kind, parameter)."""
    if mode == "greedy":
        return "greedy", 0.0
    kind, _, value = mode.partition(":")
    if kind in ("epsilon", "eps") and value:
        eps = float(value)
        if not 0.0 <= eps <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        return "epsilon", eps
    if kind == "softmax" and value:
        temp = float(value)
        if temp <= 0:
            raise ValueError("softmax temperature must be > 0")
        return "softmax", temp
    raise ValueError(f"unknown policy mode {mode!r}")


def action_propensities(values: np.ndarray, mode: str, mask: np.ndarray | None = None) -> np.ndarray:
    """Propensities over each row of a (N, A) value matrix (or a single vector).

    Actions outside ``mask`` get probability 0; epsilon mass spreads only over
    allowed actions.
    """
    q = np.asarray(values, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    allowed = np.ones(q.shape, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    if not allowed.any(axis=1).all():
        raise ValueError("every row needs at least one allowed action")
    kind, param = parse_mode(mode)
    q = np.where(allowed, q, -np.inf)
    top = q.max(axis=1, keepdims=True)
    if kind == "softmax":
        e = np.exp((q - top) / param)
        p = e / e.sum(axis=1, keepdims=True)
    else:
        best = q == top
        p = best / best.sum(axis=1, keepdims=True)
        if kind == "epsilon":
            p = (1.0 - param) * p + param * allowed / allowed.sum(axis=1, keepdims=True)
    return p[0] if single else p


def select_action(
    values: Sequence[float],
    mode: str = "greedy",
    actions: Sequence[object] | None = None,
    rng: np.random.Generator | None = None,
) -> PolicyDecision:
    """Pick an action and report the full propensity map for logging.

    Greedy ties split propensity uniformly but always choose the lowest index.
    """
    q = np.asarray(values, dtype=float)
    if q.size == 0:
        raise ValueError("select_action needs at least one possible action")
    actions = list(range(q.size)) if actions is None else list(actions)
    p = action_propensities(q, mode)
    if parse_mode(mode)[0] == "greedy":
        idx = int(np.argmax(q))
    else:
        rng = rng if rng is not None else np.random.default_rng()
        idx = int(rng.choice(q.size, p=p))
    return PolicyDecision(actions[idx], float(p[idx]), {a: float(pi) for a, pi in zip(actions, p)})


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def threshold_policy(q_send: float, q_drop: float, threshold: float) -> str:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return SEND if sigmoid(q_send - q_drop) >= threshold else DROP


@dataclass(frozen=True)
class PidController:
    kp: float
    ki: float
    kd: float
    target_rate: float
    threshold: float = 0.5
    integral: float = 0.0
    prev_error: float = 0.0
    min_threshold: float = 0.001
    max_threshold: float = 0.999

    def __post_init__(self):
        if not 0.0 < self.target_rate < 1.0:
            raise ValueError("target_rate must lie in (0, 1)")


def pid_update(ctrl: PidController, observed_send_rate: float) -> PidController:
    """Nudge the threshold up when the policy sends more than the target rate."""
    if not 0.0 <= observed_send_rate <= 1.0:
        raise ValueError("observed send rate must lie in [0, 1]")
    e = observed_send_rate - ctrl.target_rate
    integral = ctrl.integral + e
    step = ctrl.kp * e + ctrl.ki * integral + ctrl.kd * (e - ctrl.prev_error)
    threshold = min(max(ctrl.threshold + step, ctrl.min_threshold), ctrl.max_threshold)
    return replace(ctrl, threshold=threshold, integral=integral, prev_error=e)
