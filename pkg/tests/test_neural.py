import math

import numpy as np
import pytest

from batchrl.checkpoint import CheckpointError, ModelCheckpoint
from batchrl.data import TransitionBatch
from batchrl.neural import (
    AdamState,
    GmmHeadOutput,
    MlpSpec,
    ShapeError,
    adam_step,
    gmm_nll,
    gmm_nll_grad,
    gmm_output_width,
    huber_loss,
    init_params,
    mlp_backward,
    mlp_forward,
    mse_loss,
    n_params,
    split_gmm_output,
)
from batchrl.rl.actor_critic import ActorCriticConfig, Sac
from batchrl.rl.dqn import DiscreteDqn, DqnConfig, ParametricDqn

from conftest import finite_difference, rel_error

FD_TOL = 1e-4
POINTS = 20


def reference_forward(params, widths, activations, x):
    """Scalar-loop forward pass written independently of the vectorized one."""
    out = []
    offset = 0
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = [[params[offset + i * fan_out + j] for j in range(fan_out)] for i in range(fan_in)]
        offset += fan_in * fan_out
        b = [params[offset + j] for j in range(fan_out)]
        offset += fan_out
        layers.append((W, b))
    for row in x:
        h = list(row)
        for li, (W, b) in enumerate(layers):
            act = activations[li] if li < len(activations) else "linear"
            z = [sum(h[i] * W[i][j] for i in range(len(h))) + b[j] for j in range(len(b))]
            if act == "relu":
                h = [max(v, 0.0) for v in z]
            elif act == "tanh":
                h = [math.tanh(v) for v in z]
            else:
                h = z
        out.append(h)
    return np.array(out)


# ------------------------------------------------------------------ forward


def test_identity_relu_passes_positive_input():
    spec = MlpSpec((3, 3, 3), ("relu",))
    eye = np.eye(3).ravel()
    params = np.concatenate([eye, np.zeros(3), eye, np.zeros(3)])
    x = np.array([[0.5, 2.0, 7.0]])
    np.testing.assert_array_equal(mlp_forward(params, spec, x)[-1], x)


def test_zero_weights_give_zero_output():
    spec = MlpSpec((4, 8, 2))
    out = mlp_forward(np.zeros(n_params(spec)), spec, np.ones((5, 4)))[-1]
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


@pytest.mark.parametrize("acts", [("relu", "relu"), ("tanh", "relu"), ("tanh", "tanh")])
def test_forward_matches_independent_implementation(acts):
    spec = MlpSpec((5, 7, 6, 3), acts, seed=42)
    params = init_params(spec, np.random.default_rng(42))
    params += np.random.default_rng(43).normal(0, 0.1, params.size)  # nonzero biases
    x = np.random.default_rng(44).normal(0, 1, (9, 5))
    got = mlp_forward(params, spec, x)[-1]
    want = reference_forward(params, spec.widths, acts, x)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_forward_finite_for_large_inputs():
    spec = MlpSpec((4, 16, 16, 2), ("tanh", "relu"))
    x = np.random.default_rng(0).uniform(-1e6, 1e6, (50, 4))
    assert np.all(np.isfinite(mlp_forward(init_params(spec), spec, x)[-1]))


def test_shape_mismatch_rejected():
    spec = MlpSpec((3, 4, 1))
    with pytest.raises(ShapeError):
        mlp_forward(init_params(spec), spec, np.ones((2, 5)))
    with pytest.raises(ShapeError):
        mlp_forward(np.zeros(3), spec, np.ones((2, 3)))
    acts = mlp_forward(init_params(spec), spec, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        mlp_backward(init_params(spec), spec, acts, np.ones((2, 2)))


def test_same_seed_same_init():
    spec = MlpSpec((6, 32, 4), seed=11)
    assert np.array_equal(init_params(spec), init_params(spec))
    assert not np.array_equal(init_params(spec), init_params(MlpSpec((6, 32, 4), seed=12)))


# ------------------------------------------------------------------ backward


def test_linear_scalar_gradient():
    spec = MlpSpec((1, 1))
    params = np.array([0.7, 0.0])
    acts = mlp_forward(params, spec, np.array([[2.0]]))
    grad, d_in = mlp_backward(params, spec, acts, np.ones((1, 1)))
    assert grad[0] == 2.0 and grad[1] == 1.0
    assert d_in[0, 0] == pytest.approx(0.7)


def test_relu_blocks_gradient_at_negative_preactivation():
    spec = MlpSpec((1, 1, 1), ("relu",))
    params = np.array([1.0, -5.0, 3.0, 0.0])  # hidden pre-activation x - 5 < 0
    acts = mlp_forward(params, spec, np.array([[1.0]]))
    grad, _ = mlp_backward(params, spec, acts, np.ones((1, 1)))
    assert grad[0] == 0.0 and grad[1] == 0.0


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(POINTS):
        spec = MlpSpec((4, 8, 6, 3), ("tanh", "tanh"), seed=int(rng.integers(1 << 30)))
        params = init_params(spec)
        x = rng.normal(0, 1, (5, 4))
        t = rng.normal(0, 1, (5, 3))

        def loss(p):
            return mse_loss(mlp_forward(p, spec, x)[-1], t)[0]

        acts = mlp_forward(params, spec, x)
        _, up = mse_loss(acts[-1], t)
        grad, _ = mlp_backward(params, spec, acts, up)
        worst = max(worst, rel_error(grad, finite_difference(loss, params)))
    assert worst <= FD_TOL


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    spec = MlpSpec((3, 10, 2), ("tanh",))
    params = init_params(spec)
    x = rng.normal(0, 1, (1, 3))
    acts = mlp_forward(params, spec, x)
    _, d_in = mlp_backward(params, spec, acts, np.ones((1, 2)))
    fd = finite_difference(lambda v: mlp_forward(params, spec, v.reshape(1, 3))[-1].sum(), x.ravel())
    assert rel_error(d_in.ravel(), fd) <= FD_TOL


def random_discrete_batch(rng, n, ds, na):
    return TransitionBatch(
        states=rng.normal(0, 1, (n, ds)),
        rewards=rng.normal(0, 1, n),
        discounts=np.full(n, 0.9),
        next_states=rng.normal(0, 1, (n, ds)),
        mdp_ids=np.array([f"m{i}" for i in range(n)]),
        actions=rng.integers(0, na, n),
        next_mask=np.ones((n, na), dtype=bool),
    )


@pytest.mark.parametrize("loss", ["mse", "huber"])
def test_dueling_gradient_matches_finite_differences(loss):
    rng = np.random.default_rng(9)
    worst = 0.0
    for i in range(POINTS):
        cfg = DqnConfig(dueling=True, hidden=(8, 8), activation="tanh", loss=loss)
        q = DiscreteDqn(3, 4, cfg, seed=i)
        batch = random_discrete_batch(rng, 6, 3, 4)
        y = rng.normal(0, 1, 6)
        _, grad = q.loss_and_grad(batch, y)
        fd = finite_difference(lambda p: q.loss_and_grad(batch, y, p)[0], q.params.copy())
        worst = max(worst, rel_error(grad, fd))
    assert worst <= FD_TOL


def test_parametric_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    worst = 0.0
    for i in range(POINTS):
        q = ParametricDqn(3, 2, DqnConfig(hidden=(8,), activation="tanh"), seed=i)
        batch = random_discrete_batch(rng, 5, 3, 2)
        batch.action_features = rng.normal(0, 1, (5, 2))
        y = rng.normal(0, 1, 5)
        _, grad = q.loss_and_grad(batch, y)
        fd = finite_difference(lambda p: q.loss_and_grad(batch, y, p)[0], q.params.copy())
        worst = max(worst, rel_error(grad, fd))
    assert worst <= FD_TOL


def test_gmm_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    k, d = 3, 2
    worst = 0.0
    for i in range(POINTS):
        spec = MlpSpec((4, 8, gmm_output_width(k, d)), ("tanh",), seed=i)
        params = init_params(spec)
        x = rng.normal(0, 1, (6, 4))
        target = rng.normal(0, 1, (6, d))

        def loss(p):
            return gmm_nll_grad(mlp_forward(p, spec, x)[-1], target, k, d)[0].mean()

        acts = mlp_forward(params, spec, x)
        _, g_out = gmm_nll_grad(acts[-1], target, k, d)
        grad, _ = mlp_backward(params, spec, acts, g_out / x.shape[0])
        worst = max(worst, rel_error(grad, finite_difference(loss, params)))
    assert worst <= FD_TOL


def test_sac_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    worst = 0.0
    for i in range(POINTS):
        sac = Sac(3, 2, ActorCriticConfig(hidden=(8,), activation="tanh"), seed=i)
        states = rng.normal(0, 1, (5, 3))
        eps = rng.normal(0, 1, (5, 2))
        actor = sac.nets["actor"]
        base = actor.params.copy()
        _, grad = sac.actor_loss_and_grad(states, eps)

        def loss(p):
            actor.params = p
            return sac.actor_loss_and_grad(states, eps)[0]

        fd = finite_difference(loss, base)
        actor.params = base
        worst = max(worst, rel_error(grad, fd))
    assert worst <= FD_TOL


def test_huber_matches_mse_inside_delta():
    pred, target = np.array([0.1, -0.3]), np.zeros(2)
    h, gh = huber_loss(pred, target, delta=1.0)
    m, gm = mse_loss(pred, target)
    assert h == pytest.approx(0.5 * m)
    np.testing.assert_allclose(gh, 0.5 * gm)


# ------------------------------------------------------------------ Adam


@pytest.mark.parametrize("g", [3.0, -0.002, 1e4])
def test_adam_first_step_is_lr_times_sign(g):
    params, grads = np.array([1.0]), np.array([g])
    new, state = adam_step(params, grads, AdamState.zeros(1, lr=0.1))
    assert new[0] - 1.0 == pytest.approx(-0.1 * math.copysign(1.0, g), rel=1e-5)
    assert state.t == 1


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.5, -2.0])
    s = AdamState.zeros(2, lr=0.1)
    for _ in range(100):
        p2, s = adam_step(p, np.zeros(2), s)
        assert np.array_equal(p2, p)


def test_adam_minimizes_quadratic():
    x = np.array([0.0])
    s = AdamState.zeros(1, lr=0.1)
    for _ in range(500):
        x, s = adam_step(x, 2.0 * (x - 3.0), s)
    assert abs(x[0] - 3.0) <= 1e-2


# ------------------------------------------------------------------ GMM head


def head(logits, means, log_std):
    return GmmHeadOutput(np.array(logits, float), np.array(means, float), np.array(log_std, float))


def test_gmm_standard_normal_nll():
    assert gmm_nll(head([0.0], [[0.0]], [[0.0]]), np.array([0.0])) == pytest.approx(0.918939, abs=1e-6)


def test_gmm_duplicate_components_collapse():
    one = gmm_nll(head([0.0], [[0.4]], [[0.3]]), np.array([1.0]))
    two = gmm_nll(head([1.2, -0.7], [[0.4], [0.4]], [[0.3], [0.3]]), np.array([1.0]))
    assert two == pytest.approx(one, abs=1e-12)


def test_gmm_two_component_example():
    nll = gmm_nll(head([0.0, 0.0], [[-1.0], [1.0]], [[0.0], [0.0]]), np.array([0.0]))
    assert nll == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-12)
    assert nll == pytest.approx(1.418939, abs=1e-6)


def test_gmm_matches_direct_density():
    rng = np.random.default_rng(5)
    logits, means, log_std = rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(0, 0.3, (3, 2))
    t = rng.normal(size=2)
    w = np.exp(logits) / np.exp(logits).sum()
    sd = np.exp(log_std)
    dens = np.prod(np.exp(-0.5 * ((t - means) / sd) ** 2) / (sd * math.sqrt(2 * math.pi)), axis=1)
    assert gmm_nll(head(logits, means, log_std), t) == pytest.approx(-math.log(w @ dens), abs=1e-12)


def test_gmm_permutation_invariant():
    rng = np.random.default_rng(6)
    logits, means, log_std = rng.normal(size=4), rng.normal(size=(4, 3)), rng.normal(0, 0.5, (4, 3))
    t = rng.normal(size=3)
    base = gmm_nll(head(logits, means, log_std), t)
    for _ in range(5):
        p = rng.permutation(4)
        assert gmm_nll(head(logits[p], means[p], log_std[p]), t) == pytest.approx(base, abs=1e-12)


def test_gmm_far_target_does_not_underflow():
    nll = gmm_nll(head([0.0, 0.0], [[0.0], [1.0]], [[-5.0], [-5.0]]), np.array([1e4]))
    assert math.isfinite(nll) and nll > 1e6


def test_gmm_log_std_clamped():
    out = np.zeros((1, gmm_output_width(1, 1)))
    out[0, 2] = 40.0
    assert split_gmm_output(out, 1, 1).log_stddevs[0, 0, 0] == 5.0


# ------------------------------------------------------------------ checkpoint


def sample_checkpoint():
    spec = MlpSpec((3, 5, 2), ("tanh",), seed=3)
    p = init_params(spec) + 1e-17
    st = AdamState(np.random.default_rng(1).normal(size=p.size), np.random.default_rng(2).random(p.size), 7, 1e-3)
    return ModelCheckpoint({"q": spec}, {"q": p}, {"q": st}, {"f": {"kind": "binary", "params": {}}}, {"a": 1}, {"epoch": 2})


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    back = ModelCheckpoint.load(ck.save(tmp_path / "m.json"))
    assert back.params["q"].tobytes() == ck.params["q"].tobytes()
    assert back.optimizers["q"].m.tobytes() == ck.optimizers["q"].m.tobytes()
    assert back.optimizers["q"].v.tobytes() == ck.optimizers["q"].v.tobytes()
    assert back.optimizers["q"].t == 7
    assert back.specs == ck.specs and back.config == ck.config and back.state == ck.state
    assert back.digest == ck.digest


def test_checkpoint_rejects_tampered_normalization(tmp_path):
    doc = sample_checkpoint().to_json()
    doc["normalization"]["f"]["kind"] = "probability"
    with pytest.raises(CheckpointError, match="digest"):
        ModelCheckpoint.from_json(doc)


def test_checkpoint_rejects_topology_mismatch():
    spec = MlpSpec((3, 5, 2))
    with pytest.raises(CheckpointError, match="topology"):
        ModelCheckpoint({"q": spec}, {"q": np.zeros(4)})
