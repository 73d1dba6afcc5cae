"""Dense network core: MLPs with exact reverse-mode gradients, Adam, GMM head, losses.

Parameters live in one flat float64 vector so that optimizer state, target
networks and checkpoints are all plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")
LOG_STD_MIN = -5.0
LOG_STD_MAX = 5.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: Tuple[int, ...]
    activations: Tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        acts = tuple(self.activations)
        n_hidden = len(self.widths) - 2
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"layer widths must be >= 1, got {self.widths}")
        if not acts:
            acts = ("relu",) * n_hidden
        if len(acts) != n_hidden:
            raise ValueError(
                f"expected {n_hidden} hidden activations, got {len(acts)}"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def layer_activation(self, i: int) -> str:
        return self.activations[i] if i < len(self.activations) else "linear"

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activations": list(self.activations),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]), int(d.get("seed", 0)))


@dataclass(frozen=True)
class LayerSlot:
    w_offset: int
    w_shape: Tuple[int, int]
    b_offset: int
    b_shape: Tuple[int]


def param_layout(spec: MlpSpec) -> List[LayerSlot]:
    slots = []
    offset = 0
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        w_off = offset
        offset += fan_in * fan_out
        b_off = offset
        offset += fan_out
        slots.append(LayerSlot(w_off, (fan_in, fan_out), b_off, (fan_out,)))
    return slots


def n_params(spec: MlpSpec) -> int:
    return sum(a * b + b for a, b in zip(spec.widths[:-1], spec.widths[1:]))


def unpack(params: np.ndarray, spec: MlpSpec):
    """Yield (W, b) views into the flat parameter vector."""
    if params.shape != (n_params(spec),):
        raise ShapeError(
            f"parameter vector has shape {params.shape}, expected ({n_params(spec)},)"
        )
    for s in param_layout(spec):
        W = params[s.w_offset : s.w_offset + s.w_shape[0] * s.w_shape[1]].reshape(s.w_shape)
        b = params[s.b_offset : s.b_offset + s.b_shape[0]]
        yield W, b


def init_params(spec: MlpSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Kaiming-uniform weights scaled by fan-in, zero biases."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    params = np.zeros(n_params(spec))
    for i, s in enumerate(param_layout(spec)):
        fan_in = s.w_shape[0]
        gain = 6.0 if spec.layer_activation(i) == "relu" else 3.0
        bound = math.sqrt(gain / fan_in)
        size = s.w_shape[0] * s.w_shape[1]
        params[s.w_offset : s.w_offset + size] = rng.uniform(-bound, bound, size)
    return params


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(a: np.ndarray, kind: str, upstream: np.ndarray) -> np.ndarray:
    # Derivatives expressed through the post-activation value.
    if kind == "relu":
        return upstream * (a > 0.0)
    if kind == "tanh":
        return upstream * (1.0 - a * a)
    return upstream


def mlp_forward(params: np.ndarray, spec: MlpSpec, x: np.ndarray) -> List[np.ndarray]:
    """Return [input, hidden_1, ..., output]; the last entry is the network output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"input has shape {x.shape}, expected (N, {spec.input_dim})")
    acts = [x]
    h = x
    for i, (W, b) in enumerate(unpack(params, spec)):
        h = _activate(h @ W + b, spec.layer_activation(i))
        acts.append(h)
    return acts


def mlp_backward(
    params: np.ndarray,
    spec: MlpSpec,
    acts: Sequence[np.ndarray],
    upstream: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Backpropagate dLoss/dOutput through the net.

    Returns (gradient w.r.t. the flat parameters, gradient w.r.t. the input).
    """
    if len(acts) != spec.n_layers + 1:
        raise ShapeError("activations do not come from a forward pass of this spec")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != acts[-1].shape:
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} != output shape {acts[-1].shape}"
        )
    grad = np.zeros_like(params)
    layers = list(unpack(params, spec))
    slots = param_layout(spec)
    delta = upstream
    for i in range(spec.n_layers - 1, -1, -1):
        W, _ = layers[i]
        s = slots[i]
        delta = _activation_grad(acts[i + 1], spec.layer_activation(i), delta)
        grad[s.w_offset : s.w_offset + W.size] = (acts[i].T @ delta).ravel()
        grad[s.b_offset : s.b_offset + W.shape[1]] = delta.sum(axis=0)
        delta = delta @ W.T
    return grad, delta


class Mlp:
    """Convenience pairing of a spec with its parameter vector."""

    def __init__(self, spec: MlpSpec, params: np.ndarray | None = None):
        self.spec = spec
        self.params = init_params(spec) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (n_params(spec),):
            raise ShapeError("parameter vector does not match spec")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, self.spec, x)[-1]

    def forward(self, x: np.ndarray) -> List[np.ndarray]:
        return mlp_forward(self.params, self.spec, x)

    def backward(self, acts, upstream):
        return mlp_backward(self.params, self.spec, acts, upstream)

    def copy(self) -> "Mlp":
        return Mlp(self.spec, self.params.copy())


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> Tuple[np.ndarray, AdamState]:
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError("params, grads and optimizer moments must share a shape")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


# ---------------------------------------------------------------- losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. pred."""
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


def huber_loss(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> Tuple[float, np.ndarray]:
    diff = pred - target
    absd = np.abs(diff)
    quad = absd <= delta
    loss = np.where(quad, 0.5 * diff * diff, delta * (absd - 0.5 * delta))
    grad = np.where(quad, diff, delta * np.sign(diff)) / diff.size
    return float(np.mean(loss)), grad


def loss_fn(name: str, delta: float = 1.0):
    if name == "mse":
        return mse_loss
    if name == "huber":
        return lambda p, t: huber_loss(p, t, delta)
    raise ValueError(f"unknown loss {name!r}")


# ---------------------------------------------------------------- GMM head


@dataclass
class GmmHeadOutput:
    """Mixture parameters; batched arrays carry a leading row axis."""

    mixture_logits: np.ndarray  # (..., k)
    means: np.ndarray  # (..., k, d)
    log_stddevs: np.ndarray  # (..., k, d), already clamped

    @property
    def weights(self) -> np.ndarray:
        z = self.mixture_logits - self.mixture_logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def stddevs(self) -> np.ndarray:
        return np.exp(self.log_stddevs)


def gmm_output_width(k: int, d: int) -> int:
    return k + 2 * k * d


def split_gmm_output(out: np.ndarray, k: int, d: int) -> GmmHeadOutput:
    """Slice a raw (N, k + 2kd) network output into mixture parameters."""
    out = np.asarray(out, dtype=np.float64)
    if out.shape[-1] != gmm_output_width(k, d):
        raise ShapeError(f"GMM output width {out.shape[-1]} != {gmm_output_width(k, d)}")
    lead = out.shape[:-1]
    logits = out[..., :k]
    means = out[..., k : k + k * d].reshape(lead + (k, d))
    log_std = np.clip(out[..., k + k * d :].reshape(lead + (k, d)), LOG_STD_MIN, LOG_STD_MAX)
    return GmmHeadOutput(logits, means, log_std)


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _component_loglik(head: GmmHeadOutput, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    z = (target[..., None, :] - head.means) * np.exp(-head.log_stddevs)
    log_norm = -(_HALF_LOG_2PI + head.log_stddevs + 0.5 * z * z).sum(axis=-1)
    log_w = head.mixture_logits - _logsumexp(head.mixture_logits)[..., None]
    return log_w + log_norm


def gmm_nll(head: GmmHeadOutput, target: np.ndarray):
    """Negative log-likelihood of target under the mixture (per row if batched)."""
    nll = -_logsumexp(_component_loglik(head, target))
    return float(nll) if np.ndim(nll) == 0 else nll


def gmm_nll_grad(out: np.ndarray, target: np.ndarray, k: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row NLL and its gradient w.r.t. the raw (N, k + 2kd) head output."""
    out = np.asarray(out, dtype=np.float64)
    head = split_gmm_output(out, k, d)
    comp = _component_loglik(head, target)
    nll = -_logsumexp(comp)
    resp = np.exp(comp + nll[:, None])  # posterior responsibility per component
    inv_var = np.exp(-2.0 * head.log_stddevs)
    resid = np.asarray(target)[:, None, :] - head.means
    g_logits = head.weights - resp
    g_means = -resp[..., None] * resid * inv_var
    g_logstd = -resp[..., None] * (resid * resid * inv_var - 1.0)
    raw_logstd = out[:, k + k * d :].reshape(out.shape[0], k, d)
    g_logstd = g_logstd * ((raw_logstd >= LOG_STD_MIN) & (raw_logstd <= LOG_STD_MAX))
    grad = np.concatenate(
        [g_logits, g_means.reshape(out.shape[0], -1), g_logstd.reshape(out.shape[0], -1)],
        axis=1,
    )
    return nll, grad
