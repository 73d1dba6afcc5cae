"""Timeline join: turn as-logged rows into consecutive (s, a, r, s', a') transitions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Union

ActionValue = Union[str, Dict[str, float]]


class TimelineError(ValueError):
    """Raised for malformed or inconsistent logged rows."""


@dataclass(frozen=True)
class RawRow:
    mdp_id: str
    sequence_number: int
    state_features: Dict[str, float]
    action: ActionValue
    action_probability: float
    metrics: Dict[str, float] = field(default_factory=dict)
    possible_actions: Optional[List[ActionValue]] = None
    terminal: Optional[bool] = None

    def __post_init__(self):
        if not (0.0 < self.action_probability <= 1.0):
            raise TimelineError(
                f"action_probability must be in (0, 1], got {self.action_probability} "
                f"(mdp_id={self.mdp_id!r}, sequence_number={self.sequence_number})"
            )
        _check_action(self.action)
        if self.possible_actions is not None and self.action not in self.possible_actions:
            raise TimelineError(
                f"logged action {self.action!r} not among possible_actions "
                f"(mdp_id={self.mdp_id!r}, sequence_number={self.sequence_number})"
            )

    @classmethod
    def from_dict(cls, d: Mapping) -> "RawRow":
        try:
            seq = d["sequence_number"]
            if isinstance(seq, bool) or not float(seq).is_integer():
                raise TimelineError(f"sequence_number must be an integer, got {seq!r}")
            possible = d.get("possible_actions")
            return cls(
                mdp_id=str(d["mdp_id"]),
                sequence_number=int(seq),
                state_features={str(k): float(v) for k, v in d["state_features"].items()},
                action=parse_action(d["action"]),
                action_probability=float(d["action_probability"]),
                metrics={str(k): float(v) for k, v in (d.get("metrics") or {}).items()},
                possible_actions=None if possible is None else [parse_action(a) for a in possible],
                terminal=d.get("terminal"),
            )
        except KeyError as exc:
            raise TimelineError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, AttributeError, ValueError) as exc:
            if isinstance(exc, TimelineError):
                raise
            raise TimelineError(str(exc)) from None

    def to_dict(self) -> dict:
        d = {
            "mdp_id": self.mdp_id,
            "sequence_number": self.sequence_number,
            "state_features": self.state_features,
            "action": self.action,
            "action_probability": self.action_probability,
            "metrics": self.metrics,
            "possible_actions": self.possible_actions,
        }
        if self.terminal is not None:
            d["terminal"] = self.terminal
        return d


@dataclass(frozen=True)
class JoinedTransition:
    mdp_id: str
    sequence_number: int
    state_features: Dict[str, float]
    action: ActionValue
    action_probability: float
    metrics: Dict[str, float]
    possible_actions: Optional[List[ActionValue]]
    next_state_features: Optional[Dict[str, float]]
    next_action: Optional[ActionValue]
    sequence_number_ordinal: int
    time_diff: int
    possible_next_actions: Optional[List[ActionValue]]
    terminal: bool

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "JoinedTransition":
        try:
            possible = d.get("possible_actions")
            possible_next = d.get("possible_next_actions")
            nxt = d.get("next_state_features")
            nxt_action = d.get("next_action")
            return cls(
                mdp_id=str(d["mdp_id"]),
                sequence_number=int(d["sequence_number"]),
                state_features={str(k): float(v) for k, v in d["state_features"].items()},
                action=parse_action(d["action"]),
                action_probability=float(d["action_probability"]),
                metrics={str(k): float(v) for k, v in (d.get("metrics") or {}).items()},
                possible_actions=None if possible is None else [parse_action(a) for a in possible],
                next_state_features=None if nxt is None else {str(k): float(v) for k, v in nxt.items()},
                next_action=None if nxt_action is None else parse_action(nxt_action),
                sequence_number_ordinal=int(d["sequence_number_ordinal"]),
                time_diff=int(d.get("time_diff", 1)),
                possible_next_actions=None
                if possible_next is None
                else [parse_action(a) for a in possible_next],
                terminal=bool(d.get("terminal", nxt is None)),
            )
        except KeyError as exc:
            raise TimelineError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, AttributeError, ValueError) as exc:
            if isinstance(exc, TimelineError):
                raise
            raise TimelineError(str(exc)) from None


@dataclass
class Episode:
    mdp_id: str
    transitions: List[JoinedTransition]

    def __len__(self) -> int:
        return len(self.transitions)


def parse_action(a) -> ActionValue:
    if isinstance(a, str):
        return a
    if isinstance(a, Mapping):
        return {str(k): float(v) for k, v in a.items()}
    raise TimelineError(f"action must be a string or a feature map, got {type(a).__name__}")


def _check_action(a) -> None:
    if isinstance(a, str):
        return
    if isinstance(a, dict) and all(isinstance(v, float) and math.isfinite(v) for v in a.values()):
        return
    raise TimelineError(f"invalid action value {a!r}")


# ------------------------------------------------------------------ operations


def timeline_join(rows: Iterable[RawRow]) -> List[JoinedTransition]:
    """Pair each row with its successor in the same MDP.

    Output is in canonical order: mdp_id ascending, then ordinal, so any
    permutation of the input gives identical output.
    """
    groups: Dict[str, List[RawRow]] = {}
    seen = set()
    for row in rows:
        key = (row.mdp_id, row.sequence_number)
        if key in seen:
            raise TimelineError(
                f"duplicate (mdp_id, sequence_number) = ({row.mdp_id!r}, {row.sequence_number})"
            )
        seen.add(key)
        groups.setdefault(row.mdp_id, []).append(row)

    out: List[JoinedTransition] = []
    for mdp_id in sorted(groups):
        chain = sorted(groups[mdp_id], key=lambda r: r.sequence_number)
        for i, row in enumerate(chain):
            last = i == len(chain) - 1
            if row.terminal and not last:
                raise TimelineError(
                    f"row ({mdp_id!r}, {row.sequence_number}) is flagged terminal "
                    "but has later rows in the same mdp"
                )
            nxt = None if last else chain[i + 1]
            out.append(
                JoinedTransition(
                    mdp_id=row.mdp_id,
                    sequence_number=row.sequence_number,
                    state_features=row.state_features,
                    action=row.action,
                    action_probability=row.action_probability,
                    metrics=row.metrics,
                    possible_actions=row.possible_actions,
                    next_state_features=None if nxt is None else nxt.state_features,
                    next_action=None if nxt is None else nxt.action,
                    sequence_number_ordinal=i + 1,
                    time_diff=1 if nxt is None else nxt.sequence_number - row.sequence_number,
                    possible_next_actions=None if nxt is None else nxt.possible_actions,
                    terminal=nxt is None,
                )
            )
    return out


def compute_reward(metrics: Mapping[str, float], weights: Mapping[str, float]) -> float:
    """Shaped reward: dot product of metric values with weights (missing metrics count 0)."""
    return float(sum(w * metrics.get(name, 0.0) for name, w in weights.items()))


def load_reward_weights(
    source: str | Path | Mapping[str, float], known_metrics: Iterable[str] | None = None
) -> Dict[str, float]:
    if isinstance(source, Mapping):
        raw = dict(source)
    else:
        raw = json.loads(Path(source).read_text())
    if not isinstance(raw, dict):
        raise TimelineError("reward weights must be a JSON object of metric -> weight")
    weights = {}
    for k, v in raw.items():
        v = float(v)
        if not math.isfinite(v):
            raise TimelineError(f"reward weight for {k!r} is not finite")
        weights[str(k)] = v
    if known_metrics is not None:
        unknown = sorted(set(weights) - set(known_metrics))
        if unknown:
            raise TimelineError(f"reward weights name unknown metrics: {unknown}")
    return weights


def group_episodes(transitions: Iterable[JoinedTransition]) -> List[Episode]:
    """One Episode per mdp_id, ordered by first appearance, transitions by ordinal."""
    groups: Dict[str, List[JoinedTransition]] = {}
    for t in transitions:
        groups.setdefault(t.mdp_id, []).append(t)
    episodes = []
    for mdp_id, ts in groups.items():
        ts = sorted(ts, key=lambda t: t.sequence_number_ordinal)
        ords = [t.sequence_number_ordinal for t in ts]
        if len(set(ords)) != len(ords):
            raise TimelineError(f"duplicate ordinal within mdp_id {mdp_id!r}")
        episodes.append(Episode(mdp_id, ts))
    return episodes


# ------------------------------------------------------------------ JSONL io


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise TimelineError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_rows(path: str | Path) -> List[RawRow]:
    rows = []
    for lineno, d in iter_jsonl(path):
        try:
            rows.append(RawRow.from_dict(d))
        except TimelineError as exc:
            raise TimelineError(f"{path}:{lineno}: {exc}") from None
    return rows


def read_transitions(path: str | Path) -> List[JoinedTransition]:
    out = []
    for lineno, d in iter_jsonl(path):
        try:
            out.append(JoinedTransition.from_dict(d))
        except TimelineError as exc:
            raise TimelineError(f"{path}:{lineno}: {exc}") from None
    return out


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def run_timeline(
    input_path: str | Path, output_path: str | Path, reward_weights: str | Path | None = None
) -> int:
    rows = read_rows(input_path)
    joined = timeline_join(rows)
    weights = None
    if reward_weights is not None:
        known = {m for r in rows for m in r.metrics}
        weights = load_reward_weights(reward_weights, known)

    def records():
        for t in joined:
            d = t.to_dict()
            if weights is not None:
                d["reward"] = compute_reward(t.metrics, weights)
            yield d

    return write_jsonl(output_path, records())
