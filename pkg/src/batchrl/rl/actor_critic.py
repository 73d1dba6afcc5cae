"""Continuous-action actor-critic updates: DDPG and SAC (fixed temperature).

Actions live in [-1, 1]^da; the actor's raw output goes through tanh.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from ..data import TransitionBatch
from ..neural import AdamState, MlpSpec, adam_step, init_params, mlp_backward, mlp_forward, n_params
from .dqn import NumericalError, polyak

SAC_LOG_STD_MIN = -5.0
SAC_LOG_STD_MAX = 2.0
_LOG_2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ActorCriticConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "relu"
    alpha: float = 0.2  # SAC temperature

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActorCriticConfig":
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
        return cls(**d)


class _Net:
    def __init__(self, spec: MlpSpec, lr: float):
        self.spec = spec
        self.params = init_params(spec)
        self.target = self.params.copy()
        self.optim = AdamState.zeros(n_params(spec), lr=lr)

    def forward(self, x, target=False):
        return mlp_forward(self.target if target else self.params, self.spec, x)

    def step(self, grad: np.ndarray, name: str) -> None:
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient in {name}")
        self.params, self.optim = adam_step(self.params, grad, self.optim)

    def soft_update(self, tau: float) -> None:
        self.target = polyak(self.target, self.params, tau)


def _critic_spec(state_dim, action_dim, cfg, seed):
    return MlpSpec((state_dim + action_dim, *cfg.hidden, 1), (cfg.activation,) * len(cfg.hidden), seed)


def _mse(pred: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = pred - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class _ActorCritic:
    nets: Dict[str, _Net]

    def networks(self) -> Dict[str, Tuple[MlpSpec, np.ndarray]]:
        out = {}
        for name, net in self.nets.items():
            out[name] = (net.spec, net.params)
            out[name + "_target"] = (net.spec, net.target)
        return out

    def optimizers(self) -> Dict[str, AdamState]:
        return {name: net.optim for name, net in self.nets.items()}

    def load_networks(self, params: Dict[str, np.ndarray], optims: Dict[str, AdamState], steps: int) -> None:
        for name, net in self.nets.items():
            net.params = params[name].copy()
            net.target = params[name + "_target"].copy()
            if name in optims:
                net.optim = optims[name]
        self.steps = steps


class Ddpg(_ActorCritic):
    def __init__(self, state_dim: int, action_dim: int, cfg: ActorCriticConfig = ActorCriticConfig(), seed: int = 0):
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        actor = MlpSpec((state_dim, *cfg.hidden, action_dim), (cfg.activation,) * len(cfg.hidden), seed)
        self.nets = {
            "actor": _Net(actor, cfg.actor_lr),
            "critic": _Net(_critic_spec(state_dim, action_dim, cfg, seed + 1), cfg.critic_lr),
        }
        self.steps = 0

    def act(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        return np.tanh(self.nets["actor"].forward(states, target)[-1])

    def q(self, states, actions, target=False) -> np.ndarray:
        return self.nets["critic"].forward(np.concatenate([states, actions], axis=1), target)[-1][:, 0]

    def critic_target(self, batch: TransitionBatch) -> np.ndarray:
        a2 = self.act(batch.next_states, target=True)
        return batch.rewards + batch.discounts * self.q(batch.next_states, a2, target=True)

    def train_step(self, batch: TransitionBatch) -> Dict[str, float]:
        critic, actor = self.nets["critic"], self.nets["actor"]
        y = self.critic_target(batch)
        acts = critic.forward(np.concatenate([batch.states, batch.action_features], axis=1))
        critic_loss, g = _mse(acts[-1][:, 0], y)
        grad, _ = mlp_backward(critic.params, critic.spec, acts, g[:, None])
        if not math.isfinite(critic_loss):
            raise NumericalError("non-finite DDPG critic loss")
        critic.step(grad, "critic")

        a_acts = actor.forward(batch.states)
        a = np.tanh(a_acts[-1])
        c_acts = critic.forward(np.concatenate([batch.states, a], axis=1))
        objective = float(c_acts[-1][:, 0].mean())
        # ascend Q(s, mu(s)): descend -Q
        n = len(batch)
        _, d_in = mlp_backward(critic.params, critic.spec, c_acts, np.full((n, 1), -1.0 / n))
        d_a = d_in[:, self.state_dim :] * (1.0 - a * a)
        grad_actor, _ = mlp_backward(actor.params, actor.spec, a_acts, d_a)
        actor.step(grad_actor, "actor")

        critic.soft_update(self.cfg.tau)
        actor.soft_update(self.cfg.tau)
        self.steps += 1
        return {"critic_loss": critic_loss, "actor_objective": objective, "td_loss": critic_loss}


def squashed_gaussian_logprob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log density of a = tanh(u) where u ~ N(mean, exp(log_std)^2), summed over action dims."""
    z = (u - mean) * np.exp(-log_std)
    gauss = -(0.5 * z * z + log_std + _HALF_LOG_2PI)
    # log(1 - tanh(u)^2) computed stably
    log_det = 2.0 * (_LOG_2 - u - np.logaddexp(0.0, -2.0 * u))
    return (gauss - log_det).sum(axis=-1)


class Sac(_ActorCritic):
    def __init__(self, state_dim: int, action_dim: int, cfg: ActorCriticConfig = ActorCriticConfig(), seed: int = 0):
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        actor = MlpSpec((state_dim, *cfg.hidden, 2 * action_dim), (cfg.activation,) * len(cfg.hidden), seed)
        self.nets = {
            "actor": _Net(actor, cfg.actor_lr),
            "critic1": _Net(_critic_spec(state_dim, action_dim, cfg, seed + 1), cfg.critic_lr),
            "critic2": _Net(_critic_spec(state_dim, action_dim, cfg, seed + 2), cfg.critic_lr),
        }
        self.rng = np.random.default_rng(seed)
        self.steps = 0

    def _dist(self, states, target=False):
        acts = self.nets["actor"].forward(states, target)
        out = acts[-1]
        d = self.action_dim
        raw_log_std = out[:, d:]
        return acts, out[:, :d], np.clip(raw_log_std, SAC_LOG_STD_MIN, SAC_LOG_STD_MAX), raw_log_std

    def sample(self, states: np.ndarray, eps: np.ndarray | None = None):
        """Reparameterized sample: returns (action, log_prob, pre-squash u, eps)."""
        _, mean, log_std, _ = self._dist(states)
        if eps is None:
            eps = self.rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        return np.tanh(u), squashed_gaussian_logprob(u, mean, log_std), u, eps

    def act(self, states: np.ndarray, deterministic: bool = True) -> np.ndarray:
        if deterministic:
            _, mean, _, _ = self._dist(states)
            return np.tanh(mean)
        return self.sample(states)[0]

    def q(self, name: str, states, actions, target=False) -> np.ndarray:
        return self.nets[name].forward(np.concatenate([states, actions], axis=1), target)[-1][:, 0]

    def soft_target(self, rewards, discounts, min_q_next, logp_next) -> np.ndarray:
        return rewards + discounts * (min_q_next - self.cfg.alpha * logp_next)

    def critic_target(self, batch: TransitionBatch, eps: np.ndarray | None = None) -> np.ndarray:
        a2, logp2, _, _ = self.sample(batch.next_states, eps)
        q1 = self.q("critic1", batch.next_states, a2, target=True)
        q2 = self.q("critic2", batch.next_states, a2, target=True)
        return self.soft_target(batch.rewards, batch.discounts, np.minimum(q1, q2), logp2)

    def actor_loss_and_grad(self, states: np.ndarray, eps: np.ndarray):
        """Loss E[alpha log pi(a|s) - min_i Q_i(s, a)] and its gradient w.r.t. actor params."""
        actor = self.nets["actor"]
        acts, mean, log_std, raw_log_std = self._dist(states)
        std = np.exp(log_std)
        u = mean + std * eps
        a = np.tanh(u)
        logp = squashed_gaussian_logprob(u, mean, log_std)
        x = np.concatenate([states, a], axis=1)
        c1 = self.nets["critic1"].forward(x)
        c2 = self.nets["critic2"].forward(x)
        q1, q2 = c1[-1][:, 0], c2[-1][:, 0]
        use1 = q1 <= q2
        n = states.shape[0]
        loss = float(np.mean(self.cfg.alpha * logp - np.minimum(q1, q2)))
        # d(min Q)/da through whichever critic is smaller per row
        ones = np.ones((n, 1))
        _, g1 = mlp_backward(self.nets["critic1"].params, self.nets["critic1"].spec, c1, ones)
        _, g2 = mlp_backward(self.nets["critic2"].params, self.nets["critic2"].spec, c2, ones)
        dq_da = np.where(use1[:, None], g1, g2)[:, self.state_dim :]
        dq_du = dq_da * (1.0 - a * a)
        alpha = self.cfg.alpha
        # d logp / du = 2 tanh(u) with eps held fixed
        d_mean = (alpha * 2.0 * a - dq_du) / n
        d_log_std = (alpha * (-1.0 + 2.0 * a * std * eps) - dq_du * std * eps) / n
        d_log_std = d_log_std * ((raw_log_std >= SAC_LOG_STD_MIN) & (raw_log_std <= SAC_LOG_STD_MAX))
        grad, _ = mlp_backward(actor.params, actor.spec, acts, np.concatenate([d_mean, d_log_std], axis=1))
        return loss, grad

    def train_step(self, batch: TransitionBatch) -> Dict[str, float]:
        y = self.critic_target(batch)
        x = np.concatenate([batch.states, batch.action_features], axis=1)
        losses = {}
        for name in ("critic1", "critic2"):
            net = self.nets[name]
            acts = net.forward(x)
            loss, g = _mse(acts[-1][:, 0], y)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite SAC {name} loss")
            grad, _ = mlp_backward(net.params, net.spec, acts, g[:, None])
            net.step(grad, name)
            losses[name] = loss
        eps = self.rng.standard_normal((len(batch), self.action_dim))
        actor_loss, grad = self.actor_loss_and_grad(batch.states, eps)
        self.nets["actor"].step(grad, "actor")
        for name in ("critic1", "critic2"):
            self.nets[name].soft_update(self.cfg.tau)
        self.steps += 1
        return {
            "critic1_loss": losses["critic1"],
            "critic2_loss": losses["critic2"],
            "actor_loss": actor_loss,
            "td_loss": 0.5 * (losses["critic1"] + losses["critic2"]),
        }
