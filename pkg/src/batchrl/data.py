"""Dense training arrays built from joined transitions (normalization applied here)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .normalization import Preprocessor
from .timeline import JoinedTransition, compute_reward

DISCRETE = "discrete"
PARAMETRIC = "parametric"
CONTINUOUS = "continuous"


class DataError(ValueError):
    pass


def split_by_mdp(mdp_ids: np.ndarray, holdout: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row indices (train, held-out), assigning whole episodes to one side."""
    uniq = np.array(sorted(set(mdp_ids.tolist())), dtype=object)
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(round(holdout * len(uniq))))
    if len(uniq) < 2:
        raise DataError("need at least two episodes for a held-out split")
    held = set(rng.choice(uniq, size=n_hold, replace=False).tolist())
    is_held = np.array([m in held for m in mdp_ids])
    return np.flatnonzero(~is_held), np.flatnonzero(is_held)


@dataclass
class ActionSpace:
    kind: str
    names: List[str] = field(default_factory=list)
    feature_ids: List[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, action) -> int:
        try:
            return self.names.index(action)
        except ValueError:
            raise DataError(f"action {action!r} is not in the action set {self.names}") from None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "names": self.names, "feature_ids": self.feature_ids}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSpace":
        return cls(d["kind"], list(d.get("names", [])), list(d.get("feature_ids", [])))

    @classmethod
    def infer(cls, transitions: Sequence[JoinedTransition], kind: str | None = None) -> "ActionSpace":
        first = transitions[0].action
        if isinstance(first, str):
            names = set()
            for t in transitions:
                names.add(t.action)
                names.update(t.possible_actions or ())
            return cls(DISCRETE, sorted(names))
        feats = sorted({f for t in transitions for f in t.action})
        has_candidates = any(t.possible_actions for t in transitions)
        return cls(kind or (PARAMETRIC if has_candidates else CONTINUOUS), [], feats)


@dataclass
class TransitionBatch:
    """One minibatch; bootstrap fields already account for multi-step returns."""

    states: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray  # gamma ** steps to the bootstrap state (0 when terminal)
    next_states: np.ndarray
    mdp_ids: np.ndarray
    actions: Optional[np.ndarray] = None  # discrete indices
    next_mask: Optional[np.ndarray] = None  # (N, A) possible next actions
    next_actions: Optional[np.ndarray] = None  # SARSA; -1 when absent
    action_features: Optional[np.ndarray] = None
    next_action_features: Optional[np.ndarray] = None
    next_candidates: Optional[np.ndarray] = None  # (N, K, da)
    next_candidates_mask: Optional[np.ndarray] = None  # (N, K)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def not_terminal(self) -> np.ndarray:
        return (self.discounts > 0).astype(float)


class TransitionData:
    """All transitions as arrays, rows in canonical (mdp_id, ordinal) order."""

    def __init__(
        self,
        transitions: Sequence[JoinedTransition],
        state_pre: Preprocessor,
        action_space: ActionSpace,
        reward_weights: Dict[str, float] | None = None,
        action_pre: Preprocessor | None = None,
    ):
        if not transitions:
            raise DataError("no transitions")
        ts = sorted(transitions, key=lambda t: (t.mdp_id, t.sequence_number_ordinal))
        self.transitions = ts
        self.state_pre = state_pre
        self.action_space = action_space
        self.action_pre = action_pre
        weights = {"reward": 1.0} if reward_weights is None else dict(reward_weights)
        self.reward_weights = weights
        n = len(ts)
        self.n = n
        self.mdp_ids = np.array([t.mdp_id for t in ts], dtype=object)
        self.ordinals = np.array([t.sequence_number_ordinal for t in ts])
        self.states = state_pre.transform([t.state_features for t in ts])
        zero = {}
        self.next_states = state_pre.transform([t.next_state_features or zero for t in ts])
        self.terminal = np.array([t.terminal for t in ts])
        self.time_diff = np.array([max(t.time_diff, 1) for t in ts], dtype=float)
        self.rewards = np.array([compute_reward(t.metrics, weights) for t in ts])
        self.propensities = np.array([t.action_probability for t in ts])
        names = sorted({m for t in ts for m in t.metrics})
        self.metrics = {m: np.array([t.metrics.get(m, 0.0) for t in ts]) for m in names}
        # next row in the same episode, -1 at episode end
        same = (self.mdp_ids[1:] == self.mdp_ids[:-1]) & ~self.terminal[:-1]
        self.successor = np.where(np.append(same, False), np.arange(n) + 1, -1)

        kind = action_space.kind
        if kind == DISCRETE:
            A = action_space.n
            self.actions = np.array([action_space.index(t.action) for t in ts])
            self.possible_mask = self._mask([t.possible_actions for t in ts], A, fill=True)
            self.next_mask = self._mask([t.possible_next_actions for t in ts], A, fill=False)
            self.has_next_possible = np.array([t.possible_next_actions is not None for t in ts])
            self.next_actions = np.array(
                [-1 if t.next_action is None else action_space.index(t.next_action) for t in ts]
            )
        else:
            fids = action_space.feature_ids
            if action_pre is not None:
                enc = action_pre.transform
            else:
                def enc(rows):
                    return np.array([[r.get(f, 0.0) for f in fids] for r in rows]).reshape(len(rows), len(fids))
            self.action_features = enc([t.action for t in ts])
            self.next_action_features = enc([t.next_action or zero for t in ts])
            if kind == PARAMETRIC:
                self.candidates, self.candidates_mask = self._candidates([t.possible_actions for t in ts], enc)
                self.next_candidates, self.next_candidates_mask = self._candidates(
                    [t.possible_next_actions for t in ts], enc
                )
                self.has_next_possible = np.array([t.possible_next_actions is not None for t in ts])

    def _mask(self, lists, A, fill):
        m = np.zeros((self.n, A), dtype=bool)
        for i, acts in enumerate(lists):
            if acts is None:
                m[i] = fill
            else:
                for a in acts:
                    m[i, self.action_space.index(a)] = True
        return m

    def _candidates(self, lists, enc):
        K = max((len(l) for l in lists if l), default=1)
        da = self.action_features.shape[1]
        feats = np.zeros((self.n, K, da))
        mask = np.zeros((self.n, K), dtype=bool)
        for i, acts in enumerate(lists):
            if acts:
                feats[i, : len(acts)] = enc(acts)
                mask[i, : len(acts)] = True
        return feats, mask

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.action_space.n if self.action_space.kind == DISCRETE else self.action_features.shape[1]

    def episodes(self) -> Dict[str, np.ndarray]:
        """mdp_id -> row indices in ordinal order."""
        out: Dict[str, list] = {}
        for i, m in enumerate(self.mdp_ids):
            out.setdefault(m, []).append(i)
        return {k: np.array(v) for k, v in out.items()}

    def multi_step(self, n: int, gamma: float, use_time_diff: bool = False):
        """n-step discounted rewards and the row whose next state bootstraps the return.

        Returns (rewards_n, bootstrap_row, discounts) where discounts is 0 if the
        episode terminates within the n steps.
        """
        if n < 1:
            raise DataError("multi_step must be >= 1")
        N = self.n
        ret = np.zeros(N)
        disc = np.ones(N)
        row = np.arange(N)
        alive = np.ones(N, dtype=bool)
        cur = np.arange(N)
        for k in range(n):
            ret = ret + np.where(alive, disc * self.rewards[cur], 0.0)
            step = gamma ** (self.time_diff[cur] if use_time_diff else 1.0)
            disc = np.where(alive, disc * step, disc)
            row = np.where(alive, cur, row)
            if k == n - 1:
                break
            nxt = self.successor[cur]
            alive = alive & (nxt >= 0)
            cur = np.where(alive, nxt, cur)
        disc = np.where(self.terminal[row], 0.0, disc)
        return ret, row, disc

    def prepare(self, gamma: float, n: int = 1, use_time_diff: bool = False) -> None:
        self._ret, self._boot, self._disc = self.multi_step(n, gamma, use_time_diff)

    def batch(self, idx: np.ndarray) -> TransitionBatch:
        if not hasattr(self, "_ret"):
            raise DataError("call prepare(gamma, n) before drawing batches")
        idx = np.asarray(idx)
        b = self._boot[idx]
        out = TransitionBatch(
            states=self.states[idx],
            rewards=self._ret[idx],
            discounts=self._disc[idx],
            next_states=self.next_states[b],
            mdp_ids=self.mdp_ids[idx],
        )
        if self.action_space.kind == DISCRETE:
            out.actions = self.actions[idx]
            out.next_mask = self.next_mask[b]
            out.next_actions = self.next_actions[b]
            live = out.discounts > 0
            missing = live & ~self.has_next_possible[b]
            if missing.any():
                out.next_mask = out.next_mask.copy()
                out.next_mask[missing] = False
        else:
            out.action_features = self.action_features[idx]
            out.next_action_features = self.next_action_features[b]
            if self.action_space.kind == PARAMETRIC:
                out.next_candidates = self.next_candidates[b]
                out.next_candidates_mask = self.next_candidates_mask[b]
        return out
