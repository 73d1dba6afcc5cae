"""Epoch loop: shuffled minibatch updates, loss monitors, per-epoch CPE and warm-startable checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, ModelCheckpoint
from .cpe import ESTIMATORS, CpeConfig, CpeError, EvalDataset, EvalStep, collect_and_sort, cpe_report
from .data import CONTINUOUS, DISCRETE, PARAMETRIC, ActionSpace, TransitionData, split_by_mdp
from .neural import AdamState, MlpSpec, adam_step, init_params, mlp_backward, mlp_forward, n_params
from .normalization import Preprocessor
from .rl.actor_critic import ActorCriticConfig, Ddpg, Sac
from .rl.dqn import DiscreteDqn, DqnConfig, NumericalError, ParametricDqn
from .rl.policy import action_propensities

logger = logging.getLogger(__name__)

ALGORITHMS = ("dqn", "parametric_dqn", "ddpg", "sac")
CHECKPOINT_NAME = "checkpoint.json"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.jsonl"


@dataclass
class TrainConfig:
    algorithm: str = "dqn"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    eval_fraction: float = 0.2
    cpe: bool = True
    target_policy: str = "greedy"
    reward_model: bool = True
    reward_weights: Optional[Dict[str, float]] = None
    dqn: DqnConfig = field(default_factory=DqnConfig)
    actor_critic: ActorCriticConfig = field(default_factory=ActorCriticConfig)
    cpe_config: CpeConfig = field(default_factory=CpeConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")

    @property
    def gamma(self) -> float:
        return self.dqn.gamma if self.algorithm in ("dqn", "parametric_dqn") else self.actor_critic.gamma

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("dqn", "actor_critic", "cpe_config")}
        d["dqn"] = self.dqn.to_dict()
        d["actor_critic"] = self.actor_critic.to_dict()
        cc = asdict(self.cpe_config)
        cc["magic_ci"] = list(cc["magic_ci"])
        cc["magic_j"] = None if cc["magic_j"] is None else list(cc["magic_j"])
        d["cpe_config"] = cc
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kw = dict(d)
        kw["dqn"] = DqnConfig.from_dict(d.get("dqn", {}))
        kw["actor_critic"] = ActorCriticConfig.from_dict(d.get("actor_critic", {}))
        cc = dict(d.get("cpe_config", {}))
        if "magic_ci" in cc:
            cc["magic_ci"] = tuple(cc["magic_ci"])
        if cc.get("magic_j") is not None:
            cc["magic_j"] = tuple(cc["magic_j"])
        kw["cpe_config"] = CpeConfig(**cc)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class RewardModel:
    """Immediate-reward regressor used by the step-wise CPE estimators."""

    def __init__(self, input_dim: int, outputs: int, hidden=(32,), seed: int = 0, lr: float = 1e-3):
        self.spec = MlpSpec((input_dim, *hidden, outputs), ("relu",) * len(hidden), seed)
        self.params = init_params(self.spec)
        self.optim = AdamState.zeros(n_params(self.spec), lr=lr)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, self.spec, x)[-1]

    def train_step(self, x: np.ndarray, rewards: np.ndarray, columns: np.ndarray | None = None) -> float:
        acts = mlp_forward(self.params, self.spec, x)
        out = acts[-1]
        rows = np.arange(len(x))
        cols = np.zeros(len(x), dtype=int) if columns is None else columns
        diff = out[rows, cols] - rewards
        g = np.zeros_like(out)
        g[rows, cols] = 2.0 * diff / len(x)
        grad, _ = mlp_backward(self.params, self.spec, acts, g)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite reward-model gradient")
        self.params, self.optim = adam_step(self.params, grad, self.optim)
        return float(np.mean(diff * diff))

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "RewardModel | None":
        if "reward" not in ckpt.params:
            return None
        model = cls.__new__(cls)
        model.spec = ckpt.specs["reward"]
        model.params = ckpt.params["reward"].copy()
        model.optim = ckpt.optimizers.get("reward", AdamState.zeros(n_params(model.spec)))
        return model


def build_learner(cfg: TrainConfig, action_space: ActionSpace, state_dim: int, action_dim: int, names=None):
    """Construct an untrained learner for the configured algorithm and action space."""
    kind = action_space.kind
    if cfg.algorithm == "dqn":
        if kind != DISCRETE:
            raise ValueError("dqn needs a discrete action set; use parametric_dqn, ddpg or sac")
        return DiscreteDqn(state_dim, action_space.n, cfg.dqn, cfg.seed, names)
    if cfg.algorithm == "parametric_dqn":
        if kind != PARAMETRIC:
            raise ValueError("parametric_dqn needs action feature maps with possible_actions")
        return ParametricDqn(state_dim, action_dim, cfg.dqn, cfg.seed, names)
    if kind == DISCRETE:
        raise ValueError(f"{cfg.algorithm} needs continuous action features")
    cls = Ddpg if cfg.algorithm == "ddpg" else Sac
    return cls(state_dim, action_dim, cfg.actor_critic, cfg.seed)


def make_learner(cfg: TrainConfig, td: TransitionData):
    return build_learner(cfg, td.action_space, td.state_dim, td.action_dim, td.state_pre.column_names)


def make_reward_model(cfg: TrainConfig, td: TransitionData) -> RewardModel | None:
    if not cfg.reward_model or td.action_space.kind == CONTINUOUS:
        return None
    if td.action_space.kind == DISCRETE:
        return RewardModel(td.state_dim, td.action_space.n, seed=cfg.seed + 17)
    return RewardModel(td.state_dim + td.action_dim, 1, seed=cfg.seed + 17)


# ---------------------------------------------------------------- monitors


def discounted_returns(td: TransitionData, gamma: float) -> np.ndarray:
    """Logged return from every row to the end of its episode."""
    out = np.zeros(td.n)
    succ = td.successor
    for i in range(td.n - 1, -1, -1):
        nxt = succ[i]
        out[i] = td.rewards[i] + (gamma * out[nxt] if nxt >= 0 else 0.0)
    return out


def mc_loss(q_logged: np.ndarray, returns: np.ndarray) -> float:
    """Mean squared gap between Q(s_t, a_t) and the logged discounted return."""
    q_logged = np.asarray(q_logged, dtype=float)
    if q_logged.size == 0:
        return float("nan")
    d = q_logged - np.asarray(returns, dtype=float)
    return float(np.mean(d * d))


def logged_q(learner, td: TransitionData, rows: np.ndarray) -> np.ndarray:
    s = td.states[rows]
    if isinstance(learner, DiscreteDqn):
        return learner.q_values(s)[np.arange(len(rows)), td.actions[rows]]
    if isinstance(learner, ParametricDqn):
        return learner.q_pairs(s, td.action_features[rows])
    if isinstance(learner, Ddpg):
        return learner.q(s, td.action_features[rows])
    return np.minimum(
        learner.q("critic1", s, td.action_features[rows]), learner.q("critic2", s, td.action_features[rows])
    )


# ---------------------------------------------------------------- CPE samples


def _match_candidate(action: np.ndarray, cands: np.ndarray, mask: np.ndarray) -> int:
    hit = np.flatnonzero(mask & np.all(np.isclose(cands, action[None, :], rtol=0.0, atol=1e-12), axis=1))
    return int(hit[0]) if hit.size else -1


def eval_steps(
    td: TransitionData,
    rows: np.ndarray,
    q: np.ndarray,
    possible: np.ndarray,
    actions: np.ndarray,
    target_policy: str,
    model_rewards: np.ndarray | None = None,
) -> List[EvalStep]:
    """One EvalStep per row given (N, A) model values over each row's possible actions."""
    probs = action_propensities(q, target_policy, possible)
    q = np.where(possible, q, 0.0)
    steps = []
    for j, i in enumerate(rows):
        t = td.transitions[i]
        steps.append(
            EvalStep(
                mdp_id=t.mdp_id,
                ordinal=t.sequence_number_ordinal,
                action=int(actions[j]),
                reward=float(td.rewards[i]),
                logged_propensity=float(td.propensities[i]),
                target_propensities=probs[j],
                q_values=q[j],
                metrics=dict(t.metrics),
                model_rewards=None if model_rewards is None else model_rewards[j],
                terminal=bool(td.terminal[i]),
            )
        )
    return steps


def collect_eval_samples(
    q_fn,
    td: TransitionData,
    rows: np.ndarray,
    target_policy: str,
    reward_fn=None,
) -> List[EvalStep]:
    """Score rows with a discrete or parametric Q function and build CPE samples.

    ``q_fn(states, candidates=None)`` returns (N, A) values; for parametric data it
    receives (N, K, da) candidate features. Rows whose logged action is not among
    the candidates raise CpeError.
    """
    rows = np.asarray(rows)
    kind = td.action_space.kind
    if kind == DISCRETE:
        q = q_fn(td.states[rows])
        possible = td.possible_mask[rows]
        actions = td.actions[rows]
        mr = None if reward_fn is None else reward_fn(td.states[rows])
    elif kind == PARAMETRIC:
        cands, possible = td.candidates[rows], td.candidates_mask[rows]
        q = q_fn(td.states[rows], cands)
        actions = np.array(
            [_match_candidate(td.action_features[i], cands[j], possible[j]) for j, i in enumerate(rows)]
        )
        if np.any(actions < 0):
            bad = td.mdp_ids[rows][actions < 0][0]
            raise CpeError(f"logged action is not among possible_actions (mdp_id={bad!r})")
        mr = None if reward_fn is None else reward_fn(td.states[rows], cands)
    else:
        raise CpeError("CPE needs discrete or parametric actions")
    return eval_steps(td, rows, q, possible, actions, target_policy, mr)


def _learner_q_fn(learner):
    if isinstance(learner, DiscreteDqn):
        return lambda s, c=None: learner.q_values(s)
    return lambda s, c: learner.q_candidates(s, c)


def _reward_fn(model: RewardModel | None, kind: str):
    if model is None:
        return None
    if kind == DISCRETE:
        return model.predict

    def parametric(s, cands):
        N, K, da = cands.shape
        x = np.concatenate([np.repeat(s, K, axis=0), cands.reshape(N * K, da)], axis=1)
        return model.predict(x)[:, 0].reshape(N, K)

    return parametric


# ---------------------------------------------------------------- metrics files


def emit_metrics(out_dir: str | Path, record: dict) -> None:
    """Append one epoch to the CSV and JSON-lines metric logs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norm = {e["estimator"]: e["normalized"] for e in record.get("cpe", []) if e["metric"] == "reward"}
    header = ["epoch", "td_loss", "mc_loss", *ESTIMATORS]
    path = out / METRICS_CSV
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow([record["epoch"], record["td_loss"], record["mc_loss"], *[norm.get(e, "") for e in ESTIMATORS]])
    with (out / METRICS_JSON).open("a") as fh:
        fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    history: List[dict]
    learner: object
    reward_model: RewardModel | None
    eval_rows: np.ndarray
    eval_dataset: EvalDataset | None = None


def _normalization_doc(td: TransitionData) -> dict:
    return {
        "state": td.state_pre.to_json(),
        "action": None if td.action_pre is None else td.action_pre.to_json(),
    }


def _build_checkpoint(cfg, td, learner, reward_model, rng, epoch, history) -> ModelCheckpoint:
    nets = learner.networks()
    specs = {k: v[0] for k, v in nets.items()}
    params = {k: v[1].copy() for k, v in nets.items()}
    optims = dict(learner.optimizers())
    if reward_model is not None:
        specs["reward"] = reward_model.spec
        params["reward"] = reward_model.params.copy()
        optims["reward"] = reward_model.optim
    state = {
        "epoch": epoch,
        "steps": learner.steps,
        "rng": rng.bit_generator.state,
        "history": history,
    }
    if isinstance(learner, Sac):
        state["sac_rng"] = learner.rng.bit_generator.state
    config = {
        "train": cfg.to_dict(),
        "action_space": td.action_space.to_dict(),
        "state_columns": td.state_pre.column_names,
    }
    return ModelCheckpoint(specs, params, optims, _normalization_doc(td), config, state)


def check_topology(ckpt: ModelCheckpoint, learner) -> None:
    for name, (spec, _) in learner.networks().items():
        if name not in ckpt.specs or ckpt.specs[name] != spec:
            raise CheckpointError(f"checkpoint network {name!r} does not match the configured topology")


def learner_from_checkpoint(ckpt: ModelCheckpoint):
    """Rebuild the trained learner recorded in a checkpoint."""
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    space = ActionSpace.from_dict(ckpt.config["action_space"])
    state_dim = len(ckpt.config["state_columns"])
    action_doc = ckpt.normalization.get("action")
    if space.kind == DISCRETE:
        action_dim = 0
    elif action_doc:
        action_dim = Preprocessor.from_json(action_doc).width
    else:
        action_dim = len(space.feature_ids)
    learner = build_learner(cfg, space, state_dim, action_dim, ckpt.config["state_columns"])
    check_topology(ckpt, learner)
    learner.load_networks(ckpt.params, ckpt.optimizers, int(ckpt.state.get("steps", 0)))
    return learner


def _restore(ckpt: ModelCheckpoint, learner, reward_model, rng) -> tuple:
    check_topology(ckpt, learner)
    learner.load_networks(ckpt.params, ckpt.optimizers, int(ckpt.state.get("steps", 0)))
    if reward_model is not None and "reward" in ckpt.params:
        reward_model.params = ckpt.params["reward"].copy()
        reward_model.optim = ckpt.optimizers.get("reward", reward_model.optim)
    if "rng" in ckpt.state:
        rng.bit_generator.state = ckpt.state["rng"]
    if isinstance(learner, Sac) and "sac_rng" in ckpt.state:
        learner.rng.bit_generator.state = ckpt.state["sac_rng"]
    return int(ckpt.state.get("epoch", 0)), list(ckpt.state.get("history", []))


def train(
    cfg: TrainConfig,
    td: TransitionData,
    out_dir: str | Path | None = None,
    resume: ModelCheckpoint | str | Path | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` total epochs (a resumed run continues from its saved epoch)."""
    learner = make_learner(cfg, td)
    reward_model = make_reward_model(cfg, td)
    rng = np.random.default_rng(cfg.seed)
    if cfg.eval_fraction > 0:
        train_rows, eval_rows = split_by_mdp(td.mdp_ids, cfg.eval_fraction, cfg.seed)
    else:
        train_rows, eval_rows = np.arange(td.n), np.array([], dtype=int)
    if len(train_rows) == 0:
        raise ValueError("no training rows left after the evaluation split")
    td.prepare(cfg.gamma, cfg.dqn.multi_step if cfg.algorithm in ("dqn", "parametric_dqn") else 1, cfg.dqn.use_time_diff)

    start, history = 0, []
    if resume is not None:
        ckpt = resume if isinstance(resume, ModelCheckpoint) else ModelCheckpoint.load(resume)
        start, history = _restore(ckpt, learner, reward_model, rng)
        logger.info("resumed from epoch %d", start)

    returns = discounted_returns(td, cfg.gamma)
    ckpt = _build_checkpoint(cfg, td, learner, reward_model, rng, start, history)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        ckpt.save(out / CHECKPOINT_NAME)
    eval_ds = None
    kind = td.action_space.kind
    for epoch in range(start, cfg.epochs):
        perm = train_rows[rng.permutation(len(train_rows))]
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            batch = td.batch(idx)
            stats = learner.train_step(batch)
            losses.append(stats["td_loss"])
            if reward_model is not None:
                if kind == DISCRETE:
                    reward_model.train_step(batch.states, td.rewards[idx], batch.actions)
                else:
                    x = np.concatenate([batch.states, batch.action_features], axis=1)
                    reward_model.train_step(x, td.rewards[idx])
        td_loss = float(np.mean(losses))
        if not math.isfinite(td_loss):
            raise NumericalError(f"non-finite mean TD loss at epoch {epoch + 1}")
        mc_rows = eval_rows if len(eval_rows) else train_rows
        record = {
            "epoch": epoch + 1,
            "td_loss": td_loss,
            "mc_loss": mc_loss(logged_q(learner, td, mc_rows), returns[mc_rows]),
            "cpe": [],
        }
        if cfg.cpe and len(eval_rows) and kind != CONTINUOUS:
            eval_ds = _epoch_cpe(cfg, td, learner, reward_model, eval_rows, rng_seed=cfg.seed + epoch)
            if eval_ds is not None:
                record["cpe"] = [{"epoch": epoch + 1, **e.to_dict()} for e in cpe_report(eval_ds)]
        history.append(record)
        logger.info(
            "epoch %d td_loss=%.6g mc_loss=%.6g %s",
            epoch + 1,
            record["td_loss"],
            record["mc_loss"],
            " ".join(f"{e['estimator']}={e['normalized']:.3f}" for e in record["cpe"] if e["metric"] == "reward"),
        )
        ckpt = _build_checkpoint(cfg, td, learner, reward_model, rng, epoch + 1, history)
        if out is not None:
            emit_metrics(out, record)
            ckpt.save(out / CHECKPOINT_NAME)
    return TrainResult(ckpt, history, learner, reward_model, eval_rows, eval_ds)


def _epoch_cpe(cfg, td, learner, reward_model, eval_rows, rng_seed: int) -> EvalDataset | None:
    """Score eval rows in shuffled order, then regroup them into ordered episodes."""
    # a private generator keeps CPE from touching the training RNG stream
    order = eval_rows[np.random.default_rng(rng_seed).permutation(len(eval_rows))]
    try:
        samples = collect_eval_samples(
            _learner_q_fn(learner), td, order, cfg.target_policy, _reward_fn(reward_model, td.action_space.kind)
        )
        return collect_and_sort(samples, cfg.gamma, cfg.cpe_config)
    except CpeError as exc:
        logger.warning("CPE skipped: %s", exc)
        return None


def transition_data_for(ckpt: ModelCheckpoint, transitions) -> TransitionData:
    """Encode transitions with the checkpoint's own normalization and action space."""
    state_pre = Preprocessor.from_json(ckpt.normalization["state"])
    action_doc = ckpt.normalization.get("action")
    action_pre = Preprocessor.from_json(action_doc) if action_doc else None
    space = ActionSpace.from_dict(ckpt.config["action_space"])
    weights = ckpt.config["train"].get("reward_weights")
    return TransitionData(transitions, state_pre, space, weights, action_pre)


def evaluate_checkpoint(
    ckpt: ModelCheckpoint, transitions, target_policy: str = "greedy", seed: int = 0
) -> tuple[EvalDataset, list]:
    """Counterfactual estimates of a trained policy on (typically fresh) logged transitions."""
    learner = learner_from_checkpoint(ckpt)
    td = transition_data_for(ckpt, transitions)
    if td.action_space.kind == CONTINUOUS:
        raise CpeError("CPE needs discrete or parametric actions")
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    reward_model = RewardModel.from_checkpoint(ckpt)
    rows = np.arange(td.n)[np.random.default_rng(seed).permutation(td.n)]
    samples = collect_eval_samples(
        _learner_q_fn(learner), td, rows, target_policy, _reward_fn(reward_model, td.action_space.kind)
    )
    ds = collect_and_sort(samples, cfg.gamma, cfg.cpe_config)
    return ds, cpe_report(ds)
