"""Counterfactual policy evaluation over ordered logged episodes.

Six estimators: step-wise direct method, importance sampling and doubly
robust, sequential DR (ordinal or weighted importance weights), and MAGIC.
Every estimator reports a raw value and a value normalized by the logged
policy's empirical performance (1.0 means "same as logged").
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ESTIMATORS = (
    "direct_method",
    "stepwise_is",
    "stepwise_dr",
    "sequential_dr",
    "weighted_sequential_dr",
    "magic",
)
REWARD = "reward"


class CpeError(ValueError):
    pass


@dataclass
class EvalStep:
    mdp_id: str
    ordinal: int
    action: int  # index into the step's possible actions
    reward: float
    logged_propensity: float
    target_propensities: np.ndarray
    q_values: np.ndarray
    metrics: Dict[str, float] = field(default_factory=dict)
    model_rewards: Optional[np.ndarray] = None
    metric_q_values: Dict[str, np.ndarray] = field(default_factory=dict)
    terminal: bool = False


@dataclass(frozen=True)
class CpeConfig:
    rho_cap: Optional[float] = 1e4
    magic_bootstrap: int = 200
    magic_ci: tuple = (5.0, 95.0)
    magic_iterations: int = 500
    magic_ridge: float = 1e-8
    magic_j: Optional[tuple] = None
    seed: int = 0


@dataclass
class CpeEstimate:
    estimator: str
    raw: float
    normalized: float
    series: str = REWARD
    logged: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "metric": self.series,
            "raw": self.raw,
            "normalized": self.normalized,
            "logged": self.logged,
        }


class EvalDataset:
    """Episodes in original order; stored as padded (N, T) arrays per series."""

    def __init__(self, episodes: Sequence[Sequence[EvalStep]], gamma: float, config: CpeConfig = CpeConfig()):
        if not episodes:
            raise CpeError("evaluation dataset needs at least one episode")
        eps = []
        for ep in episodes:
            if not ep:
                raise CpeError("empty episode")
            ords = [s.ordinal for s in ep]
            if any(b <= a for a, b in zip(ords, ords[1:])):
                raise CpeError(f"ordinals must strictly increase within mdp {ep[0].mdp_id!r}")
            eps.append(list(ep))
        # Canonical episode order keeps every estimator (incl. bootstrap) order-invariant.
        eps.sort(key=lambda e: e[0].mdp_id)
        self.episodes = eps
        self.gamma = float(gamma)
        self.config = config
        self.n = len(eps)
        self.horizon = max(len(e) for e in eps)
        self.lengths = np.array([len(e) for e in eps])
        self.mask = np.arange(self.horizon)[None, :] < self.lengths[:, None]
        self._cache: Dict[tuple, dict] = {}
        self.rho = self._ratios()

    @property
    def series_names(self) -> List[str]:
        names = set()
        for ep in self.episodes:
            for s in ep:
                names.update(s.metrics)
        # a metric literally named "reward" is reported once, as the shaped reward
        return [REWARD] + sorted(names - {REWARD})

    def _pad(self, fn) -> np.ndarray:
        if not hasattr(self, "_flat"):
            self._flat = [s for ep in self.episodes for s in ep]
            self._rows = np.repeat(np.arange(self.n), self.lengths)
            self._cols = np.concatenate([np.arange(k) for k in self.lengths])
        out = np.zeros((self.n, self.horizon))
        out[self._rows, self._cols] = [fn(s) for s in self._flat]
        return out

    def _ratios(self) -> np.ndarray:
        def ratio(s: EvalStep) -> float:
            if not s.logged_propensity > 0:
                raise CpeError(
                    f"logged propensity must be > 0 (mdp {s.mdp_id!r}, ordinal {s.ordinal})"
                )
            return float(s.target_propensities[s.action]) / s.logged_propensity

        rho = self._pad(ratio)
        cap = self.config.rho_cap
        if cap is not None:
            n_capped = int(np.sum(rho > cap))
            if n_capped:
                logger.warning("capped %d importance ratios at %g", n_capped, cap)
            rho = np.minimum(rho, cap)
        return rho

    def arrays(self, series: str = REWARD, step_model: bool = False) -> dict:
        """Padded rewards and model values for one series.

        step_model=True selects per-step reward-model predictions when present
        (used by the step-wise estimators); otherwise Q-value estimates.
        """
        key = (series, step_model)
        if key in self._cache:
            return self._cache[key]

        def values(s: EvalStep) -> np.ndarray:
            if series == REWARD:
                if step_model and s.model_rewards is not None:
                    return np.asarray(s.model_rewards, dtype=float)
                return np.asarray(s.q_values, dtype=float)
            q = s.metric_q_values.get(series)
            return np.zeros(len(s.target_propensities)) if q is None else np.asarray(q, dtype=float)

        def reward(s: EvalStep) -> float:
            return s.reward if series == REWARD else float(s.metrics.get(series, 0.0))

        r = self._pad(reward)
        vals = [values(s) for s in self._flat]
        q_logged = np.zeros_like(r)
        q_logged[self._rows, self._cols] = [q[s.action] for q, s in zip(vals, self._flat)]
        v = np.zeros_like(r)
        v[self._rows, self._cols] = [
            float(np.dot(s.target_propensities, q)) for q, s in zip(vals, self._flat)
        ]
        out = {"r": r, "q": q_logged, "v": v}
        self._cache[key] = out
        return out

    def discounts(self) -> np.ndarray:
        return self.gamma ** np.arange(self.horizon)

    def logged_step_mean(self, series: str = REWARD) -> float:
        r = self.arrays(series)["r"]
        return float(r[self.mask].mean())

    def logged_discounted_return(self, series: str = REWARD) -> float:
        r = self.arrays(series)["r"]
        return float((r * self.discounts()).sum(axis=1).mean())


def _normalize(raw: float, logged: float) -> float:
    if logged == 0.0 or not math.isfinite(logged):
        return float("nan")
    return raw / logged


def collect_and_sort(samples: Iterable[EvalStep], gamma: float, config: CpeConfig = CpeConfig()) -> EvalDataset:
    """Regroup shuffled per-step samples into ordered episodes."""
    groups: Dict[str, Dict[int, EvalStep]] = {}
    for s in samples:
        if getattr(s, "ordinal", None) is None:
            raise CpeError(f"sample from mdp {s.mdp_id!r} has no ordinal")
        g = groups.setdefault(s.mdp_id, {})
        if s.ordinal in g:
            raise CpeError(f"duplicate sample (mdp_id={s.mdp_id!r}, ordinal={s.ordinal})")
        g[s.ordinal] = s
    episodes = [[g[o] for o in sorted(g)] for g in groups.values()]
    return EvalDataset(episodes, gamma, config)


# ------------------------------------------------------------------ step-wise


def direct_method(ds: EvalDataset, series: str = REWARD) -> CpeEstimate:
    a = ds.arrays(series, step_model=True)
    raw = float(a["v"][ds.mask].mean())
    logged = ds.logged_step_mean(series)
    return CpeEstimate("direct_method", raw, _normalize(raw, logged), series, logged)


def stepwise_is(ds: EvalDataset, series: str = REWARD) -> CpeEstimate:
    a = ds.arrays(series, step_model=True)
    raw = float((ds.rho * a["r"])[ds.mask].mean())
    logged = ds.logged_step_mean(series)
    return CpeEstimate("stepwise_is", raw, _normalize(raw, logged), series, logged)


def stepwise_dr(ds: EvalDataset, series: str = REWARD) -> CpeEstimate:
    a = ds.arrays(series, step_model=True)
    terms = a["v"] + ds.rho * (a["r"] - a["q"])
    raw = float(terms[ds.mask].mean())
    logged = ds.logged_step_mean(series)
    return CpeEstimate("stepwise_dr", raw, _normalize(raw, logged), series, logged)


# ------------------------------------------------------------------ sequential


def sequential_dr_per_episode(ds: EvalDataset, series: str = REWARD) -> np.ndarray:
    """Ordinal-weight sequential DR value of each episode (backward recursion)."""
    a = ds.arrays(series)
    r, q, v, rho = a["r"], a["q"], a["v"], ds.rho
    est = np.zeros(ds.n)
    for t in range(ds.horizon - 1, -1, -1):
        live = ds.mask[:, t]
        est = np.where(live, v[:, t] + rho[:, t] * (r[:, t] + ds.gamma * est - q[:, t]), 0.0)
    return est


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """num / den with 0/0 read as 0 (a step no episode reaches under the target policy)."""
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def normalized_weights(rho: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-step self-normalized cumulative weights; finished episodes carry weight forward.

    A step where every cumulative weight is 0 gets all-zero normalized weights.
    """
    w = np.cumprod(np.where(mask, rho, 1.0), axis=1)
    return _safe_div(w, w.sum(axis=0))


class _WeightedParts:
    """Per-episode numerators of the weighted DR / MAGIC terms.

    For episode multiplicities c (all ones for the data itself, bootstrap
    counts otherwise) the episode-summed terms are
      step[t] = c @ own[:, t] / W_t + c @ prev[:, t] / W_{t-1}
      boot[t] = c @ prev[:, t] / W_{t-1}
    with W_t = c @ w[:, t] and W_{-1} = sum(c).
    """

    def __init__(self, ds: EvalDataset, series: str):
        a = ds.arrays(series)
        disc = ds.discounts()
        w = np.cumprod(np.where(ds.mask, ds.rho, 1.0), axis=1)
        w_prev = np.concatenate([np.ones((ds.n, 1)), w[:, :-1]], axis=1)
        self.w = w
        self.own = disc * w * (a["r"] - a["q"])
        self.prev = disc * w_prev * a["v"]

    def terms(self, counts: np.ndarray):
        counts = np.atleast_2d(counts).astype(float)
        W = counts @ self.w
        W_prev = np.concatenate([counts.sum(axis=1, keepdims=True), W[:, :-1]], axis=1)
        boot = _safe_div(counts @ self.prev, W_prev)
        step = _safe_div(counts @ self.own, W) + boot
        return step, boot


def _weighted_terms(ds: EvalDataset, series: str):
    """Episode-summed weighted DR pieces for the observed data.

    Returns (step[t], boot[t]) with
      step[t] = sum_i g^t (w_t r_t - w_t q_t + w_{t-1} v_t)
      boot[t] = sum_i g^t w_{t-1} v_t
    using self-normalized weights.
    """
    parts = _WeightedParts(ds, series)
    _warn_vanishing(parts.w)
    step, boot = parts.terms(np.ones(ds.n))
    return step[0], boot[0]


def _warn_vanishing(w: np.ndarray) -> None:
    dead = w.sum(axis=0) <= 0
    if dead.any():
        logger.debug(
            "importance weight vanishes from step %d on; later steps use the model value only",
            int(np.argmax(dead)),
        )


def sequential_dr(ds: EvalDataset, weighting: str = "ordinal", series: str = REWARD) -> CpeEstimate:
    if weighting == "ordinal":
        raw = float(sequential_dr_per_episode(ds, series).mean())
        name = "sequential_dr"
    elif weighting == "weighted":
        step, _ = _weighted_terms(ds, series)
        raw = float(step.sum())
        name = "weighted_sequential_dr"
    else:
        raise CpeError(f"unknown weighting {weighting!r}")
    logged = ds.logged_discounted_return(series)
    return CpeEstimate(name, raw, _normalize(raw, logged), series, logged)


def weighted_sequential_dr(ds: EvalDataset, series: str = REWARD) -> CpeEstimate:
    return sequential_dr(ds, "weighted", series)


# ------------------------------------------------------------------ MAGIC


def default_j(horizon: int) -> List[int]:
    js = [-1]
    k = 0
    while (2**k) - 1 < horizon - 1:
        js.append(2**k - 1)
        k += 1
    js.append(horizon - 1)
    return sorted(set(js))


def partial_returns(step: np.ndarray, boot: np.ndarray, js: Sequence[int]) -> np.ndarray:
    """g^(j) = sum_{t<=j} step[t] + boot[j+1] (boot beyond the horizon is 0)."""
    csum = np.concatenate([[0.0], np.cumsum(step)])
    boot_ext = np.concatenate([boot, [0.0]])
    return np.array([csum[j + 1] + boot_ext[j + 1] for j in js])


def project_simplex(v: np.ndarray) -> np.ndarray:
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, n + 1)
    cond = u - (css - 1.0) / idx > 0
    k = idx[cond][-1]
    tau = (css[k - 1] - 1.0) / k
    return np.maximum(v - tau, 0.0)


def simplex_qp(M: np.ndarray, iterations: int = 500) -> np.ndarray:
    """argmin_x x^T M x over the probability simplex by projected gradient."""
    n = M.shape[0]
    M = 0.5 * (M + M.T)
    lip = 2.0 * float(np.linalg.eigvalsh(M)[-1])
    x = np.full(n, 1.0 / n)
    if lip <= 0:
        return x
    step = 1.0 / lip
    for _ in range(iterations):
        x = project_simplex(x - step * 2.0 * (M @ x))
    return x


def magic_bias(g: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Distance from each partial return to the interval [lo, hi]; 0 inside it."""
    g = np.asarray(g, dtype=float)
    return np.where(g < lo, lo - g, np.where(g > hi, g - hi, 0.0))


@dataclass
class MagicDetail:
    js: List[int]
    g: np.ndarray
    omega: np.ndarray
    bias: np.ndarray
    ci: tuple
    weights: np.ndarray


def magic_detail(ds: EvalDataset, series: str = REWARD, js: Sequence[int] | None = None) -> MagicDetail:
    cfg = ds.config
    if js is None:
        js = cfg.magic_j if cfg.magic_j is not None else default_j(ds.horizon)
    js = sorted(set(int(j) for j in js))
    if len(js) < 2:
        raise CpeError("MAGIC needs at least two truncation points")
    if js[0] < -1 or js[-1] > ds.horizon - 1:
        raise CpeError(f"truncation points must lie in [-1, {ds.horizon - 1}]")
    if js[-1] != ds.horizon - 1:
        js.append(ds.horizon - 1)
    parts = _WeightedParts(ds, series)
    _warn_vanishing(parts.w)
    step, boot = parts.terms(np.ones(ds.n))
    g = partial_returns(step[0], boot[0], js)

    rng = np.random.default_rng(cfg.seed)
    counts = np.stack(
        [np.bincount(rng.integers(0, ds.n, ds.n), minlength=ds.n) for _ in range(cfg.magic_bootstrap)]
    )
    samples = []
    for chunk in np.array_split(counts, max(1, len(counts) // 50)):
        s, b = parts.terms(chunk)
        samples.extend(partial_returns(si, bi, js) for si, bi in zip(s, b))
    if len(samples) < 2:
        raise CpeError("MAGIC bootstrap produced fewer than two valid resamples")
    boots = np.array(samples)
    omega = np.cov(boots, rowvar=False)
    lo, hi = np.percentile(boots[:, -1], cfg.magic_ci)
    bias = magic_bias(g, lo, hi)
    M = omega + np.outer(bias, bias) + cfg.magic_ridge * np.eye(len(js))
    x = simplex_qp(M, cfg.magic_iterations)
    return MagicDetail(js, g, omega, bias, (float(lo), float(hi)), x)


def magic(ds: EvalDataset, series: str = REWARD, js: Sequence[int] | None = None) -> CpeEstimate:
    d = magic_detail(ds, series, js)
    raw = float(d.weights @ d.g)
    logged = ds.logged_discounted_return(series)
    return CpeEstimate("magic", raw, _normalize(raw, logged), series, logged)


# ------------------------------------------------------------------ report

_RUNNERS = {
    "direct_method": direct_method,
    "stepwise_is": stepwise_is,
    "stepwise_dr": stepwise_dr,
    "sequential_dr": lambda ds, series: sequential_dr(ds, "ordinal", series),
    "weighted_sequential_dr": weighted_sequential_dr,
    "magic": magic,
}


def cpe_report(
    ds: EvalDataset,
    estimators: Sequence[str] = ESTIMATORS,
    series: Sequence[str] | None = None,
) -> List[CpeEstimate]:
    """Run each estimator once per metric and once for the shaped reward."""
    series = ds.series_names if series is None else list(series)
    out = []
    for name in series:
        for est in estimators:
            try:
                out.append(_RUNNERS[est](ds, name))
            except CpeError as exc:
                logger.warning("%s on %s failed: %s", est, name, exc)
                out.append(CpeEstimate(est, float("nan"), float("nan"), name))
    return out
