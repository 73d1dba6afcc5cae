"""Feature identification, normalization fitting, and the forward-pass transform.

Specs are fitted offline on a sample; the transform is applied lazily to raw
features when batches are built for training or serving.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special, stats

logger = logging.getLogger(__name__)

PROBABILITY_LOGIT_BOUND = 6.0
QUANTILE_CLAMP = 3.0
_PROB_EPS = 1e-12
_BOXCOX_MIN_X = 1e-12


class NormalizationError(ValueError):
    pass


class FeatureKind(str, enum.Enum):
    BINARY = "binary"
    PROBABILITY = "probability"
    CONTINUOUS = "continuous"
    ENUM = "enum"
    QUANTILE = "quantile"
    BOXCOX = "boxcox"


@dataclass(frozen=True)
class NormalizationConfig:
    min_samples: int = 100
    enum_threshold: int = 32
    skew_threshold: float = 2.0
    iqr_ratio_bounds: Tuple[float, float] = (0.5, 2.5)
    quantile_resolution: int = 1000
    clip_sigmas: float = 10.0
    boxcox_grid: Tuple[float, float, float] = (-2.0, 2.0, 0.01)


DEFAULT_CONFIG = NormalizationConfig()


@dataclass(frozen=True)
class NormalizationSpec:
    feature_id: str
    kind: FeatureKind
    params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        kind = FeatureKind(self.kind)
        object.__setattr__(self, "kind", kind)
        p = self.params
        if kind is FeatureKind.CONTINUOUS:
            if not p.get("stddev", 0) > 0:
                raise NormalizationError(f"{self.feature_id}: stddev must be > 0")
        elif kind is FeatureKind.BOXCOX:
            if not p.get("post_stddev", 0) > 0:
                raise NormalizationError(f"{self.feature_id}: post_stddev must be > 0")
        elif kind is FeatureKind.QUANTILE:
            q = np.asarray(p.get("quantiles", []), dtype=float)
            if q.size < 2 or np.any(np.diff(q) < 0):
                raise NormalizationError(f"{self.feature_id}: quantiles must be non-decreasing")
        elif kind is FeatureKind.ENUM:
            vals = list(p.get("values", []))
            if not vals or len(set(vals)) != len(vals):
                raise NormalizationError(
                    f"{self.feature_id}: enum values must be non-empty and distinct"
                )

    @property
    def width(self) -> int:
        return len(self.params["values"]) if self.kind is FeatureKind.ENUM else 1

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": self.params}


# ------------------------------------------------------------------ identify


def _clean(samples: Iterable[float]) -> np.ndarray:
    x = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
    return x[np.isfinite(x)]


def identify_feature(samples: Sequence[float], config: NormalizationConfig = DEFAULT_CONFIG) -> FeatureKind:
    x = _clean(samples)
    if x.size < config.min_samples:
        raise NormalizationError(
            f"only {x.size} samples (need {config.min_samples}); "
            "override the feature kind manually"
        )
    distinct = np.unique(x)
    if np.all((distinct == 0.0) | (distinct == 1.0)):
        return FeatureKind.BINARY
    if x.min() >= 0.0 and x.max() <= 1.0 and distinct.size > config.enum_threshold:
        return FeatureKind.PROBABILITY
    if distinct.size <= config.enum_threshold and np.all(distinct == np.round(distinct)):
        return FeatureKind.ENUM
    std = x.std(ddof=1)
    if std > 0:
        if x.min() > 0.0 and abs(stats.skew(x)) > config.skew_threshold:
            return FeatureKind.BOXCOX
        q25, q75 = np.percentile(x, [25, 75])
        ratio = (q75 - q25) / std
        lo, hi = config.iqr_ratio_bounds
        if ratio < lo or ratio > hi:
            return FeatureKind.QUANTILE
    return FeatureKind.CONTINUOUS


# ------------------------------------------------------------------ fit


def boxcox_loglik(x: np.ndarray, lam: float) -> float:
    """Profile log-likelihood of the Box-Cox transform (Gaussian on the transformed scale)."""
    logx = np.log(x)
    y = logx if abs(lam) < 1e-12 else np.expm1(lam * logx) / lam
    var = y.var()
    if var <= 0:
        return -math.inf
    return -0.5 * x.size * math.log(var) + (lam - 1.0) * logx.sum()


def fit_boxcox_lambda(x: np.ndarray, grid: Tuple[float, float, float] = (-2.0, 2.0, 0.01)) -> float:
    lo, hi, step = grid
    lams = np.round(np.arange(lo, hi + step / 2, step), 10)
    ll = np.array([boxcox_loglik(x, lam) for lam in lams])
    best = int(np.argmax(ll))
    a, b = lams[max(best - 1, 0)], lams[min(best + 1, lams.size - 1)]
    res = optimize.minimize_scalar(lambda l: -boxcox_loglik(x, l), bounds=(a, b), method="bounded")
    lam = float(res.x) if -res.fun >= ll[best] else float(lams[best])
    return lam


def _boxcox(x: np.ndarray, lam) -> np.ndarray:
    logx = np.log(np.maximum(x, _BOXCOX_MIN_X))
    lam = np.asarray(lam, dtype=float)
    safe = np.where(lam == 0.0, 1.0, lam)
    return np.where(lam == 0.0, logx, np.expm1(safe * logx) / safe)


def fit_spec(
    feature_id: str,
    samples: Sequence[float],
    kind: FeatureKind,
    config: NormalizationConfig = DEFAULT_CONFIG,
) -> NormalizationSpec:
    kind = FeatureKind(kind)
    x = _clean(samples)
    if x.size == 0 and kind not in (FeatureKind.BINARY, FeatureKind.PROBABILITY):
        raise NormalizationError(f"{feature_id}: no finite samples to fit")

    if kind is FeatureKind.BOXCOX and x.min() <= 0.0:
        logger.warning("%s: boxcox needs positive samples; falling back to continuous", feature_id)
        kind = FeatureKind.CONTINUOUS

    if kind in (FeatureKind.BINARY, FeatureKind.PROBABILITY):
        return NormalizationSpec(feature_id, kind, {})
    if kind is FeatureKind.ENUM:
        return NormalizationSpec(feature_id, kind, {"values": sorted(float(v) for v in np.unique(x))})
    if kind is FeatureKind.QUANTILE:
        levels = np.linspace(0.0, 1.0, config.quantile_resolution + 1)
        q = np.quantile(x, levels)
        q = np.maximum.accumulate(q)
        return NormalizationSpec(feature_id, kind, {"quantiles": q.tolist()})
    if kind is FeatureKind.BOXCOX:
        lam = fit_boxcox_lambda(x, config.boxcox_grid)
        y = _boxcox(x, lam)
        std = float(y.std(ddof=1)) if y.size > 1 else 1.0
        return NormalizationSpec(
            feature_id,
            kind,
            {"lambda": lam, "post_mean": float(y.mean()), "post_stddev": std if std > 0 else 1.0},
        )
    mean = float(x.mean())
    std = float(x.std(ddof=1)) if x.size > 1 else 0.0
    if not std > 0:
        std = 1.0
    return NormalizationSpec(
        feature_id,
        FeatureKind.CONTINUOUS,
        {
            "mean": mean,
            "stddev": std,
            "clip_min": mean - config.clip_sigmas * std,
            "clip_max": mean + config.clip_sigmas * std,
        },
    )


# ------------------------------------------------------------------ apply


def _transform_group(kind: FeatureKind, x: np.ndarray, specs: Sequence[NormalizationSpec]) -> np.ndarray:
    """Transform an (N, g) block of same-kind, width-1 features."""
    if kind is FeatureKind.BINARY:
        return (x != 0.0).astype(np.float64)
    if kind is FeatureKind.PROBABILITY:
        p = np.clip(x, _PROB_EPS, 1.0 - _PROB_EPS)
        return np.clip(np.log(p) - np.log1p(-p), -PROBABILITY_LOGIT_BOUND, PROBABILITY_LOGIT_BOUND)
    if kind is FeatureKind.CONTINUOUS:
        mean = np.array([s.params["mean"] for s in specs])
        std = np.array([s.params["stddev"] for s in specs])
        lo = np.array([s.params["clip_min"] for s in specs])
        hi = np.array([s.params["clip_max"] for s in specs])
        return (np.clip(x, lo, hi) - mean) / std
    if kind is FeatureKind.BOXCOX:
        lam = np.array([s.params["lambda"] for s in specs])
        mean = np.array([s.params["post_mean"] for s in specs])
        std = np.array([s.params["post_stddev"] for s in specs])
        return (_boxcox(x, lam) - mean) / std
    if kind is FeatureKind.QUANTILE:
        out = np.empty_like(x)
        for j, s in enumerate(specs):
            q = np.asarray(s.params["quantiles"])
            levels = np.linspace(0.0, 1.0, q.size)
            out[:, j] = _quantile_position(x[:, j], q, levels)
        return np.clip(special.ndtri(out), -QUANTILE_CLAMP, QUANTILE_CLAMP)
    raise NormalizationError(f"kind {kind} is not a width-1 transform")


def _quantile_position(x: np.ndarray, q: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # Ties among stored quantiles map to the middle of their level range.
    left = np.interp(x, q, levels)
    right = -np.interp(-x, -q[::-1], -levels[::-1])
    return 0.5 * (left + right)


def _one_hot(x: np.ndarray, values: Sequence[float]) -> np.ndarray:
    return (x[:, None] == np.asarray(values, dtype=float)[None, :]).astype(np.float64)


def apply_spec(value: float, spec: NormalizationSpec) -> np.ndarray:
    """Transform one raw value; returns a vector of length spec.width."""
    x = np.array([[float(value)]])
    if spec.kind is FeatureKind.ENUM:
        return _one_hot(x[:, 0], spec.params["values"])[0]
    return _transform_group(spec.kind, x, [spec])[0]


class Preprocessor:
    """Immutable batched transform from raw feature maps to a dense matrix."""

    def __init__(self, specs: Sequence[NormalizationSpec]):
        ids = [s.feature_id for s in specs]
        dupes = sorted({f for f in ids if ids.count(f) > 1})
        if dupes:
            raise NormalizationError(f"duplicate feature ids: {dupes}")
        self.specs: Tuple[NormalizationSpec, ...] = tuple(specs)
        self.feature_ids: Tuple[str, ...] = tuple(ids)
        self.index = {f: i for i, f in enumerate(ids)}
        layout = {}
        offset = 0
        for s in self.specs:
            layout[s.feature_id] = (offset, s.width)
            offset += s.width
        self.layout: Dict[str, Tuple[int, int]] = layout
        self.width = offset
        groups: Dict[FeatureKind, List[int]] = {}
        for i, s in enumerate(self.specs):
            if s.kind is not FeatureKind.ENUM:
                groups.setdefault(s.kind, []).append(i)
        self._groups = groups

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def column_names(self) -> List[str]:
        """One name per output column; enum columns read "<feature>=<value>"."""
        names = []
        for s in self.specs:
            if s.kind is FeatureKind.ENUM:
                names.extend(f"{s.feature_id}={v:g}" for v in s.params["values"])
            else:
                names.append(s.feature_id)
        return names

    def raw_matrix(self, rows: Sequence[Mapping[str, float]]) -> Tuple[np.ndarray, np.ndarray]:
        """Dense raw values plus a presence mask, in spec order."""
        n = len(rows)
        raw = np.zeros((n, len(self.specs)))
        present = np.zeros((n, len(self.specs)), dtype=bool)
        index = self.index
        for r, row in enumerate(rows):
            for f, v in row.items():
                j = index.get(f)
                if j is not None:
                    raw[r, j] = v
                    present[r, j] = True
        return raw, present

    def transform_raw(self, raw: np.ndarray, present: np.ndarray | None = None) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != len(self.specs):
            raise NormalizationError(f"raw block has shape {raw.shape}, expected (N, {len(self.specs)})")
        if present is None:
            present = np.ones(raw.shape, dtype=bool)
        out = np.zeros((raw.shape[0], self.width))
        for kind, cols in self._groups.items():
            block = _transform_group(kind, raw[:, cols], [self.specs[c] for c in cols])
            block = np.where(present[:, cols], block, 0.0)
            offsets = [self.layout[self.specs[c].feature_id][0] for c in cols]
            out[:, offsets] = block
        for j, s in enumerate(self.specs):
            if s.kind is FeatureKind.ENUM:
                off, w = self.layout[s.feature_id]
                block = _one_hot(raw[:, j], s.params["values"])
                out[:, off : off + w] = np.where(present[:, j : j + 1], block, 0.0)
        return out

    def transform(self, rows: Sequence[Mapping[str, float]]) -> np.ndarray:
        raw, present = self.raw_matrix(rows)
        return self.transform_raw(raw, present)

    def to_json(self) -> Dict[str, dict]:
        return {s.feature_id: s.to_dict() for s in self.specs}

    @classmethod
    def from_json(cls, doc: Mapping[str, Mapping]) -> "Preprocessor":
        return cls([NormalizationSpec(f, FeatureKind(v["kind"]), dict(v["params"])) for f, v in doc.items()])


def build_preprocessor(specs: Sequence[NormalizationSpec]) -> Preprocessor:
    return Preprocessor(specs)


# ------------------------------------------------------------------ workflow


def fit_features(
    columns: Mapping[str, Sequence[float]],
    overrides: Mapping[str, FeatureKind] | None = None,
    config: NormalizationConfig = DEFAULT_CONFIG,
) -> List[NormalizationSpec]:
    """Identify and fit every column; overrides skip identification."""
    overrides = overrides or {}
    specs = []
    for fid in sorted(columns):
        kind = overrides.get(fid)
        if kind is None:
            kind = identify_feature(columns[fid], config)
        specs.append(fit_spec(fid, columns[fid], FeatureKind(kind), config))
    return specs


ACTION_PREFIX = "action:"


def collect_columns(transitions, sample: int | None = None, seed: int = 0) -> Dict[str, List[float]]:
    """Gather per-feature sample columns from transitions (state and parametric action features)."""
    transitions = list(transitions)
    if sample is not None and len(transitions) > sample:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(transitions), size=sample, replace=False))
        transitions = [transitions[i] for i in idx]
    cols: Dict[str, List[float]] = {}
    for t in transitions:
        for f, v in t.state_features.items():
            cols.setdefault(f, []).append(v)
        if isinstance(t.action, dict):
            for f, v in t.action.items():
                cols.setdefault(ACTION_PREFIX + f, []).append(v)
    return cols


def save_specs(path: str | Path, specs: Sequence[NormalizationSpec]) -> None:
    Path(path).write_text(json.dumps({s.feature_id: s.to_dict() for s in specs}, indent=1))


def load_specs(path: str | Path) -> List[NormalizationSpec]:
    doc = json.loads(Path(path).read_text())
    return list(Preprocessor.from_json(doc).specs)


def split_state_action(specs: Sequence[NormalizationSpec]) -> Tuple[List[NormalizationSpec], List[NormalizationSpec]]:
    state = [s for s in specs if not s.feature_id.startswith(ACTION_PREFIX)]
    action = [
        NormalizationSpec(s.feature_id[len(ACTION_PREFIX) :], s.kind, s.params)
        for s in specs
        if s.feature_id.startswith(ACTION_PREFIX)
    ]
    return state, action
