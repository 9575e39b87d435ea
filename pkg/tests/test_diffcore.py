import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcbm import diffcore as dc
from mcbm.diffcore import Tensor


def test_affine_identity_and_arithmetic():
    out = dc.affine(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])
    out = dc.affine(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_affine_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(dc.ShapeError):
        dc.affine(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_affine_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    b = rng.normal(size=4)
    err = dc.grad_check(lambda w: dc.affine(Tensor(x), w, Tensor(b)).sum(), rng.normal(size=(3, 4)))
    assert err < 1e-6


def test_activation_values():
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(dc.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    assert dc.relu(Tensor(-3.2)).item() == 0.0
    rows = dc.softmax(Tensor(np.random.default_rng(1).normal(size=(6, 5)) * 30), axis=1).data
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(
        dc.log_softmax(Tensor([[1.0, 2.0, 3.0]])).data, np.log(dc.softmax(Tensor([[1.0, 2.0, 3.0]])).data)
    )
    with pytest.raises(dc.ShapeError):
        dc.softmax(Tensor(np.zeros((2, 2))), axis=2)


def test_loss_values():
    assert dc.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))
    x = Tensor(np.arange(6.0).reshape(3, 2))
    assert dc.mse(x, x).item() == 0.0
    assert dc.binary_cross_entropy(Tensor(0.5), 1).item() == pytest.approx(math.log(2))
    with pytest.raises(dc.DomainError):
        dc.cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_bce_clamps_extreme_probabilities():
    loss = dc.binary_cross_entropy(Tensor([0.0, 1.0]), [1.0, 0.0]).item()
    assert loss == pytest.approx(-math.log(1e-12))


def test_reparam_sample():
    mu = Tensor([1.0, 2.0], requires_grad=True)
    rng = np.random.default_rng(0)
    assert dc.gaussian_reparam_sample(mu, 0.0, rng) is mu
    out = dc.gaussian_reparam_sample(mu, 1.5, rng)
    out.sum().backward()
    np.testing.assert_array_equal(mu.grad, [1.0, 1.0])
    draws = dc.gaussian_reparam_sample(Tensor(np.zeros(100_000)), 1.0, np.random.default_rng(1)).data
    assert abs(draws.mean()) < 0.02
    with pytest.raises(dc.DomainError):
        dc.gaussian_reparam_sample(mu, -1.0, rng)


def _mc_kl(mu_p, sp, mu_q, sq, n, seed):
    """Monte Carlo estimate of E_p[log p - log q] for isotropic Gaussians."""
    rng = np.random.default_rng(seed)
    mu_p, mu_q = np.atleast_1d(mu_p), np.atleast_1d(mu_q)
    z = mu_p + sp * rng.standard_normal((n, mu_p.size))
    logp = -0.5 * (((z - mu_p) / sp) ** 2).sum(1) - mu_p.size * math.log(sp)
    logq = -0.5 * (((z - mu_q) / sq) ** 2).sum(1) - mu_p.size * math.log(sq)
    return float((logp - logq).mean())


def test_kl_examples_against_monte_carlo():
    assert dc.kl_diag_gaussians([1.0, -2.0, 0.5], 1.0, [1.0, -2.0, 0.5], 1.0).item() == 0.0
    closed = dc.kl_diag_gaussians([3.0], 1.0, [0.0], 1.0).item()
    assert closed == 4.5
    assert abs(closed - _mc_kl(3.0, 1.0, 0.0, 1.0, 10**6, 0)) < 1e-2
    closed = dc.kl_diag_gaussians([0.0, 0.0], 1.0, [0.0, 0.0], 2.0).item()
    assert closed == pytest.approx(0.5 * (0.5 - 2 + 2 * math.log(4)), abs=1e-12)
    assert closed == pytest.approx(0.63629, abs=1e-5)
    assert abs(closed - _mc_kl([0.0, 0.0], 1.0, [0.0, 0.0], 2.0, 10**6, 1)) < 1e-2


def test_kl_rejects_nonpositive_scale():
    with pytest.raises(dc.DomainError):
        dc.kl_diag_gaussians([0.0], 0.0, [0.0], 1.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    st.floats(0.1, 3),
    st.floats(0.1, 3),
    st.integers(0, 2**16),
)
def test_kl_nonnegative_and_unit_scale_identity(mu, sp, sq, seed):
    mu_p = np.array(mu)
    mu_q = np.random.default_rng(seed).normal(size=mu_p.size)
    assert dc.kl_diag_gaussians(mu_p, sp, mu_q, sq).item() >= -1e-12
    half = 0.5 * float(((mu_p - mu_q) ** 2).sum())
    assert abs(dc.kl_diag_gaussians(mu_p, 1.0, mu_q, 1.0).item() - half) <= 1e-10
    assert dc.kl_diag_gaussians(mu_p, sp, mu_p, sp).item() == pytest.approx(0.0, abs=1e-12)


def test_backward_and_sgd_step():
    w = dc.Parameter([1.0, 2.0], "w")
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])
    opt = dc.OptimizerState(kind="sgd", learning_rate=0.1, momentum=0.0)
    opt.step([w])
    np.testing.assert_allclose(w.data, [0.8, 1.6])
    assert opt.step_count == 1


def test_backward_needs_scalar_and_releases_graph():
    w = dc.Parameter([1.0, 2.0], "w")
    with pytest.raises(dc.UsageError):
        (w * 2.0).backward()
    loss = (w * w).sum()
    loss.backward()
    with pytest.raises(dc.UsageError):
        loss.backward()


def test_adam_matches_reference_update():
    w = dc.Parameter([1.0, -1.0], "w")
    opt = dc.OptimizerState(kind="adam", learning_rate=0.01, weight_decay=0.1)
    m = v = np.zeros(2)
    ref = np.array([1.0, -1.0])
    for t in range(1, 4):
        dc.zero_grad([w])
        (w * w * w).sum().backward()
        opt.step([w])
        g = 3 * ref**2 + 0.1 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_sgd_momentum_buffer():
    w = dc.Parameter([1.0], "w")
    opt = dc.OptimizerState(kind="sgd", learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        dc.zero_grad([w])
        (w * 1.0).sum().backward()
        opt.step([w])
    # buffers: 1, then 0.9*1 + 1
    np.testing.assert_allclose(w.data, [1.0 - 0.1 - 0.19])


def test_step_scheduler():
    s = dc.StepScheduler(20, 0.1)
    assert s.lr(1e-3, 0) == 1e-3
    assert s.lr(1e-3, 19) == 1e-3
    assert s.lr(1e-3, 20) == pytest.approx(1e-4)
    assert s.lr(1e-3, 45) == pytest.approx(1e-5)


def test_grad_check_examples():
    assert dc.grad_check(lambda x: (x * x).sum(), [3.0]) < 1e-8
    assert dc.grad_check(lambda x: dc.relu(x).sum(), [1.0]) < 1e-8


OPS = {
    "sigmoid": lambda x: dc.sigmoid(x),
    "tanh": lambda x: dc.tanh(x),
    "softmax": lambda x: dc.softmax(x, axis=1) * Tensor(np.arange(12.0).reshape(3, 4)),
    "log_softmax": lambda x: dc.log_softmax(x, axis=0) * Tensor(np.arange(12.0).reshape(3, 4)),
    "exp": lambda x: dc.exp(x),
    "log": lambda x: dc.log(x * x + 1.0),
    "div": lambda x: Tensor(2.0) / (x * x + 1.0),
    "pow": lambda x: (x * x + 1.0) ** 1.5,
    "matmul": lambda x: dc.matmul(x, Tensor(np.ones((4, 2)))) ** 2,
    "concat_slice": lambda x: dc.concat([x[:, :2] * 3.0, x[:, 2:]], axis=1) ** 2,
    "mean": lambda x: x.mean(axis=0) ** 2,
    "cross_entropy": lambda x: dc.cross_entropy(x, [0, 3, 1]),
    "bce": lambda x: dc.binary_cross_entropy(dc.sigmoid(x), np.eye(3, 4)),
    "mse": lambda x: dc.mse(x, Tensor(np.ones((3, 4)))),
    "kl": lambda x: dc.kl_diag_gaussians(x, 0.7, Tensor(np.ones((3, 4))), 1.3),
    "where": lambda x: dc.where(np.eye(3, 4) > 0, x * x, x * 3.0),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_every_op_gradient(name, seed):
    point = np.random.default_rng(seed).normal(size=(3, 4))
    assert dc.grad_check(lambda x: OPS[name](x).sum(), point) < 1e-4


def test_debug_mode_catches_nonfinite():
    with dc.debug_mode():
        with pytest.raises(FloatingPointError):
            dc.log(Tensor([-1.0]))


def test_no_grad_records_nothing():
    w = dc.Parameter([1.0], "w")
    with dc.no_grad():
        out = w * 2.0
    assert not out.requires_grad


def test_named_streams_are_independent_and_reproducible():
    a = dc.stream(7, "data").standard_normal(5)
    b = dc.stream(7, "data").standard_normal(5)
    c = dc.stream(7, "reparam").standard_normal(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    p1 = dc.init_parameter(3, "enc.0.weight", (4, 2), 4)
    p2 = dc.init_parameter(3, "enc.0.weight", (4, 2), 4)
    np.testing.assert_array_equal(p1.data, p2.data)


def test_checkpoint_state_round_trip():
    from mcbm.diffcore.checkpoint import dump_state, load_state

    w = dc.Parameter(np.random.default_rng(0).normal(size=(3, 2)), "w")
    opt = dc.OptimizerState(kind="adam")
    (w * w).sum().backward()
    opt.step([w])
    values, opt2, header = load_state(dump_state({"w": w}, 11, opt))
    np.testing.assert_array_equal(values["w"], w.data)
    np.testing.assert_array_equal(opt2.moments["w"]["m"], opt.moments["w"]["m"])
    assert header == {"format_version": 1, "master_seed": 11, "step_count": 1}
