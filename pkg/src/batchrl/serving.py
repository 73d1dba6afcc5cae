"""Checkpoint scoring with propensity logging, plus the send/drop threshold policy under PID control.

Responses double as RawRow stubs: once a reward is joined into ``metrics`` they
re-enter the timeline join unchanged.
"""

from __future__ import annotations

import json
import logging
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import ModelCheckpoint
from .data import CONTINUOUS, DISCRETE, ActionSpace, DataError
from .normalization import Preprocessor
from .rl.dqn import DiscreteDqn
from .rl.policy import DROP, SEND, PidController, PolicyDecision, parse_mode, pid_update, select_action, sigmoid
from .timeline import ActionValue, TimelineError, parse_action
from .trainer import learner_from_checkpoint

logger = logging.getLogger(__name__)

THRESHOLD = "threshold"


class ScoringError(ValueError):
    pass


@dataclass
class ScoringRequest:
    state_features: Dict[str, float]
    possible_actions: Optional[List[ActionValue]] = None
    policy: str = "greedy"
    mdp_id: Optional[str] = None
    sequence_number: Optional[int] = None

    def __post_init__(self):
        if self.possible_actions is not None and len(self.possible_actions) == 0:
            raise ScoringError("possible_actions must be non-empty")

    @classmethod
    def from_dict(cls, d: Mapping, default_policy: str = "greedy") -> "ScoringRequest":
        if "state_features" not in d:
            raise ScoringError("missing field 'state_features'")
        possible = d.get("possible_actions")
        try:
            possible = None if possible is None else [parse_action(a) for a in possible]
            feats = {str(k): float(v) for k, v in d["state_features"].items()}
        except (TimelineError, TypeError, ValueError, AttributeError) as exc:
            raise ScoringError(str(exc)) from None
        seq = d.get("sequence_number")
        return cls(
            state_features=feats,
            possible_actions=possible,
            policy=d.get("policy", default_policy),
            mdp_id=None if d.get("mdp_id") is None else str(d["mdp_id"]),
            sequence_number=None if seq is None else int(seq),
        )


@dataclass
class ScoringResponse:
    decision: PolicyDecision
    sample_key: str
    model_version: str
    request: ScoringRequest
    possible_actions: List[ActionValue]
    propensities: List[float]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_key": self.sample_key,
            "model_version": self.model_version,
            "action": self.decision.action,
            "action_probability": self.decision.propensity,
            "possible_actions": self.possible_actions,
            "propensities": self.propensities,
            "warnings": self.warnings,
        }

    def raw_row(self) -> dict:
        """RawRow stub awaiting the reward join (``metrics`` left empty)."""
        req = self.request
        return {
            "mdp_id": req.mdp_id if req.mdp_id is not None else self.sample_key,
            "sequence_number": 0 if req.sequence_number is None else req.sequence_number,
            "state_features": dict(req.state_features),
            "action": self.decision.action,
            "action_probability": self.decision.propensity,
            "possible_actions": self.possible_actions,
            "metrics": {},
            "sample_key": self.sample_key,
        }


class Scorer:
    """Holds one loaded checkpoint; stateless per request apart from the PID controller."""

    def __init__(
        self,
        ckpt: ModelCheckpoint,
        seed: int | None = None,
        pid: PidController | None = None,
        pid_window: int = 100,
        threshold: float = 0.5,
        run_id: str | None = None,
    ):
        self.ckpt = ckpt
        self.learner = learner_from_checkpoint(ckpt)
        self.state_pre = Preprocessor.from_json(ckpt.normalization["state"])
        action_doc = ckpt.normalization.get("action")
        self.action_pre = Preprocessor.from_json(action_doc) if action_doc else None
        self.action_space = ActionSpace.from_dict(ckpt.config["action_space"])
        self.model_version = ckpt.digest
        self.rng = np.random.default_rng(seed)
        self.run_id = run_id or uuid.uuid4().hex
        self.counter = 0
        self.pid = pid
        self.pid_window = pid_window
        self.threshold = threshold
        self._sent = 0
        self._seen = 0

    # ------------------------------------------------------------ features

    def encode_state(self, features: Mapping[str, float]) -> Tuple[np.ndarray, List[str]]:
        """Normalized state row plus warnings; absent features are zero-filled as in training."""
        warnings = []
        known = self.state_pre.index
        missing = [f for f in self.state_pre.feature_ids if f not in features]
        if missing:
            warnings.append(f"features absent, zero-filled: {missing}")
        extra = sorted(f for f in features if f not in known)
        if extra:
            warnings.append(f"features not in the normalization spec, ignored: {extra}")
        for w in warnings:
            logger.warning(w)
        return self.state_pre.transform([features]), warnings

    def _encode_actions(self, actions: Sequence[Mapping[str, float]]) -> np.ndarray:
        if self.action_pre is not None:
            return self.action_pre.transform(list(actions))
        fids = self.action_space.feature_ids
        return np.array([[a.get(f, 0.0) for f in fids] for a in actions]).reshape(len(actions), len(fids))

    # ------------------------------------------------------------ scoring

    def action_values(self, state: np.ndarray, possible: Sequence[ActionValue]) -> np.ndarray:
        """Model values for each possible action of one encoded state."""
        if isinstance(self.learner, DiscreteDqn):
            q = self.learner.q_values(state)[0]
            return np.array([q[self.action_space.index(a)] for a in possible])
        cands = self._encode_actions(possible)
        return self.learner.q_candidates(state, cands[None, :, :])[0]

    def next_key(self) -> str:
        key = f"{self.run_id}-{self.counter}"
        self.counter += 1
        return key

    def score(self, request: ScoringRequest) -> ScoringResponse:
        state, warnings = self.encode_state(request.state_features)
        if self.action_space.kind == CONTINUOUS:
            return self._score_continuous(request, state, warnings)
        possible = request.possible_actions
        if possible is None:
            if self.action_space.kind != DISCRETE:
                raise ScoringError("parametric models need possible_actions in every request")
            possible = list(self.action_space.names)
        try:
            q = self.action_values(state, possible)
        except DataError as exc:
            raise ScoringError(str(exc)) from None
        if request.policy.partition(":")[0] == THRESHOLD:
            decision, probs = self._threshold(request.policy, possible, q)
        else:
            parse_mode(request.policy)
            idx = select_action(q, request.policy, list(range(len(possible))), self.rng)
            probs = [idx.propensities[i] for i in range(len(possible))]
            decision = PolicyDecision(possible[idx.action], idx.propensity, idx.propensities)
        return ScoringResponse(decision, self.next_key(), self.model_version, request, list(possible), probs, warnings)

    def _score_continuous(self, request, state, warnings) -> ScoringResponse:
        if request.policy != "greedy":
            raise ScoringError("continuous-action models only serve the deterministic 'greedy' policy")
        act = self.learner.act(state)
        action = {f: float(v) for f, v in zip(self.action_space.feature_ids, act[0])}
        decision = PolicyDecision(action, 1.0, {0: 1.0})
        return ScoringResponse(decision, self.next_key(), self.model_version, request, [action], [1.0], warnings)

    def _threshold(self, mode: str, possible, q) -> Tuple[PolicyDecision, List[float]]:
        if SEND not in possible or DROP not in possible:
            raise ScoringError("threshold policy needs 'send' and 'drop' among possible_actions")
        _, _, value = mode.partition(":")
        if self.pid is not None:
            threshold = self.pid.threshold
        else:
            threshold = float(value) if value else self.threshold
        q_send, q_drop = q[possible.index(SEND)], q[possible.index(DROP)]
        send = sigmoid(q_send - q_drop) >= threshold
        chosen = SEND if send else DROP
        probs = [1.0 if a == chosen else 0.0 for a in possible]
        self._observe(send)
        return PolicyDecision(chosen, 1.0, {i: p for i, p in enumerate(probs)}), probs

    def _observe(self, sent: bool) -> None:
        if self.pid is None:
            return
        self._sent += int(sent)
        self._seen += 1
        if self._seen >= self.pid_window:
            self.pid = pid_update(self.pid, self._sent / self._seen)
            self._sent = self._seen = 0


def score(ckpt: ModelCheckpoint, request: ScoringRequest, seed: int | None = None) -> ScoringResponse:
    return Scorer(ckpt, seed=seed).score(request)


@dataclass
class BatchResult:
    scored: int
    errors: List[Tuple[int, str]]


def batch_score(
    scorer: Scorer,
    input_path: str | Path,
    output_path: str | Path,
    rows_path: str | Path | None = None,
    default_policy: str = "greedy",
) -> BatchResult:
    """Score a JSONL request file line by line.

    Every input line yields one output line in order: the response, or an error
    record naming the line. Successful responses also go to ``rows_path`` as
    RawRow stubs.
    """
    errors: List[Tuple[int, str]] = []
    scored = 0
    rows_fh = open(rows_path, "w") if rows_path is not None else None
    try:
        with open(input_path) as fin, open(output_path, "w") as fout:
            for lineno, line in enumerate(fin, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    if not isinstance(doc, dict):
                        raise ScoringError("request must be a JSON object")
                    resp = scorer.score(ScoringRequest.from_dict(doc, default_policy))
                except (json.JSONDecodeError, ScoringError, ValueError) as exc:
                    msg = f"{input_path}:{lineno}: {exc}"
                    logger.error(msg)
                    errors.append((lineno, str(exc)))
                    fout.write(json.dumps({"line": lineno, "error": str(exc)}) + "\n")
                    continue
                fout.write(json.dumps(resp.to_dict(), sort_keys=True) + "\n")
                if rows_fh is not None:
                    rows_fh.write(json.dumps(resp.raw_row(), sort_keys=True) + "\n")
                scored += 1
    finally:
        if rows_fh is not None:
            rows_fh.close()
    return BatchResult(scored, errors)
