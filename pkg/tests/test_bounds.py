import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ftselect import bounds, ntk
from ftselect.bounds import (
    KLMode,
    LayerHessian,
    ScalingBoundParams,
    cauchy_schwarz_check,
    derive_scaling_params,
    dominance_crossover,
    evaluate_pac_bound,
    gauss_newton_trace_check,
    hessian_term,
    kl_divergence,
    layer_hessian,
    power_law_fit,
    scaling_corollary_bound,
    term_ratio,
    truncated_psd_quadratic,
    weight_distance_bound_check,
)
from ftselect.errors import DimensionError, InsufficientDataError, NumericalError, ValidationError
from ftselect.ntk import Activation, Architecture, NetworkSpec, ToyNetwork


def linear_net(w, w0=None):
    w = np.asarray(w, dtype=float).reshape(1, -1)
    spec = NetworkSpec(Architecture.LINEAR, (w.size, 1))
    pre = None if w0 is None else (np.asarray(w0, dtype=float).reshape(1, -1),)
    return ToyNetwork(spec, (w,), pre)


def mlp(dims=(2, 3, 1), seed=0, act=Activation.TANH):
    return ntk.build_toy_network(NetworkSpec(Architecture.MLP, dims, act, 1.0, seed))


def without_snapshot(net):
    return ToyNetwork(net.spec, net.weights)


def perturbed(net, scale=0.1, seed=1):
    """Snapshot ``net`` and move every weight by a seeded random amount."""
    base = net.snapshot()
    rng = np.random.default_rng(seed)
    return base.with_flat(base.flat() + scale * rng.standard_normal(base.param_count))


def dataset(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal(n)


# --------------------------------------------------------------------------- Hessians


def test_linear_hessian_is_outer_product():
    x = np.array([1.0, -2.0, 0.5])
    H = layer_hessian(linear_net([0.3, 0.1, -0.4]), (x[None, :], np.array([0.7])), 0)
    np.testing.assert_allclose(H.matrix, np.outer(x, x), atol=1e-14)


def _mean_loss_oracle(net, X, y, layer):
    ws = [np.array(w) for w in net.weights]
    shape = ws[layer].shape

    def loss(theta):
        ws[layer] = theta.reshape(shape)
        return np.mean([0.5 * (oracles.mlp_forward(ws, x) - t) ** 2 for x, t in zip(X, y)])

    return loss


def _fd_hessian(f, theta, h=1e-4):
    p = theta.size
    H = np.empty((p, p))
    E = np.eye(p) * h
    for i in range(p):
        for j in range(p):
            H[i, j] = (f(theta + E[i] + E[j]) - f(theta + E[i] - E[j]) - f(theta - E[i] + E[j]) + f(theta - E[i] - E[j])) / (4 * h * h)
    return H


@pytest.mark.parametrize("layer", [0, 1, 2])
def test_layer_hessian_matches_finite_differences(layer):
    net = mlp((2, 3, 2, 1), seed=4)
    X, y = dataset(5, 2, seed=2)
    H = layer_hessian(net, (X, y), layer).matrix
    fd = _fd_hessian(_mean_loss_oracle(net, X, y, layer), np.array(net.weights[layer]).ravel())
    assert np.abs(H - fd).max() < 1e-5


def test_constant_landscape_gives_zero_hessian():
    net = linear_net([0.0, 0.0])
    H = layer_hessian(net, (np.zeros((3, 2)), np.zeros(3)), 0)
    assert not np.any(H.matrix)


def test_hessian_rejects_relu_and_large_layers():
    X, y = dataset(3, 2)
    with pytest.raises(ValidationError):
        layer_hessian(mlp(act=Activation.RELU), (X, y), 0)
    big = mlp((2, 1001, 1))
    with pytest.raises(ValidationError):
        layer_hessian(big, (X, y), 0)


def test_hessian_symmetry_enforced():
    with pytest.raises(NumericalError):
        LayerHessian.from_matrix([[1.0, 0.0], [1.0, 1.0]])


# --------------------------------------------------------------------------- truncated form


def test_truncated_form_examples():
    assert truncated_psd_quadratic(np.diag([1.0, -1.0]), [1.0, 1.0]) == pytest.approx(1.0)
    A = np.random.default_rng(0).standard_normal((4, 4))
    P, v = A @ A.T, np.arange(4.0)
    assert truncated_psd_quadratic(P, v) == pytest.approx(v @ P @ v, rel=1e-12)
    with pytest.raises(DimensionError):
        truncated_psd_quadratic(np.eye(2), [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10**6))
def test_truncated_form_against_eigen_oracle(p, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p, p))
    H = 0.5 * (A + A.T)
    v = rng.standard_normal(p)
    got = truncated_psd_quadratic(H, v)
    assert got == pytest.approx(oracles.eig_truncated_form(H, v), abs=1e-10, rel=1e-10)
    assert got >= v @ H @ v - 1e-10
    assert got >= 0


# --------------------------------------------------------------------------- h_i


def test_h_zero_without_displacement():
    net = mlp().snapshot()
    X, y = dataset(4, 2)
    assert bounds.hessian_terms(net, (X, y)) == [0.0, 0.0]


def test_h_single_sample_is_direct_form():
    net = perturbed(mlp(), seed=3)
    X, y = dataset(1, 2)
    H = layer_hessian(net, (X, y), 0)
    assert hessian_term(net, (X, y), 0) == pytest.approx(truncated_psd_quadratic(H, net.displacement(0)), rel=1e-12)


@pytest.mark.parametrize("layer", [0, 1])
def test_h_matches_per_sample_loop(layer):
    net = perturbed(mlp((2, 4, 1), seed=5), seed=6)
    X, y = dataset(10, 2, seed=7)
    v = net.displacement(layer)
    loop = max(
        oracles.eig_truncated_form(layer_hessian(net, (X[k : k + 1], y[k : k + 1]), layer).matrix, v)
        for k in range(10)
    )
    assert hessian_term(net, (X, y), layer) == pytest.approx(loop, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_h_scales_quadratically(c, seed):
    rng = np.random.default_rng(seed)
    w0, d = rng.standard_normal(3), rng.standard_normal(3)
    X, y = dataset(6, 3, seed=seed)
    h1 = hessian_term(linear_net(w0 + d, w0), (X, y), 0)
    hc = hessian_term(linear_net(w0 + c * d, w0), (X, y), 0)
    assert hc == pytest.approx(c * c * h1, rel=1e-9)


def test_h_slack_pads_and_needs_snapshot():
    net = perturbed(mlp())
    X, y = dataset(4, 2)
    assert hessian_term(net, (X, y), 0, slack=2.0) == pytest.approx(2 * hessian_term(net, (X, y), 0))
    with pytest.raises(ValidationError):
        hessian_term(without_snapshot(mlp()), (X, y), 0)
    with pytest.raises(ValidationError):
        hessian_term(net, (X, y), 0, slack=0.5)


# --------------------------------------------------------------------------- KL


def test_kl_examples():
    assert kl_divergence(mlp().snapshot(), [1.0, 1.0]) == 0.0
    assert kl_divergence(linear_net([1.0, 1.0], [0.0, 0.0]), [1.0]) == pytest.approx(1.0)


def test_kl_full_matches_isotropic():
    net = perturbed(mlp((2, 3, 1)))
    sig = [0.3, 1.7]
    covs = [s * s * np.eye(p) for s, p in zip(sig, net.spec.layer_sizes)]
    iso = kl_divergence(net, sig)
    assert kl_divergence(net, mode=KLMode.FULL, covariances=covs) == pytest.approx(iso, rel=1e-12)


def test_kl_errors():
    net = perturbed(mlp((2, 3, 1)))
    with pytest.raises(NumericalError):
        kl_divergence(net, mode=KLMode.FULL, covariances=[np.zeros((6, 6)), np.eye(3)])
    with pytest.raises(ValidationError):
        kl_divergence(net, [1.0, 0.0])
    with pytest.raises(DimensionError):
        kl_divergence(net, [1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 2.0))
def test_kl_nonnegative_and_zero_iff_no_move(seed, scale):
    net = perturbed(mlp(), scale=scale, seed=seed)
    kl = kl_divergence(net, [0.5, 2.0])
    assert kl >= 0
    assert (kl == 0) == (not np.any(net.flat() - net.pretrained_flat()))


# --------------------------------------------------------------------------- bound values


def test_pac_bound_example():
    rep = evaluate_pac_bound(0.5, [0.04], 100, 1.0, 0.01, 1.0)
    expected = 1.01 * 0.5 + 1.01 * 0.2 / 10 + 100**-0.75
    assert rep.bound_value == pytest.approx(expected, rel=1e-14)
    assert rep.bound_value == pytest.approx(0.5568, abs=5e-5)
    assert sum(rep.term_breakdown.values()) == pytest.approx(rep.bound_value, rel=1e-15)


def test_pac_bound_base_only_and_errors():
    assert evaluate_pac_bound(0.3, [0.0, 0.0], 50, 2.0, 0.1, 0.0).bound_value == pytest.approx(1.1 * 0.3)
    with pytest.raises(ValidationError):
        evaluate_pac_bound(0.3, [0.1], 0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        evaluate_pac_bound(0.3, [-0.1], 10, 1.0, 0.1)
    a = evaluate_pac_bound(0.3, [0.1], 100, 1.0, 0.1).bound_value
    assert evaluate_pac_bound(0.3, [0.1], 10**4, 1.0, 0.1).bound_value < a


bound_args = st.tuples(
    st.floats(0, 10), st.lists(st.floats(0, 10), min_size=1, max_size=4), st.integers(1, 10**6),
    st.floats(0, 10), st.floats(1e-4, 1), st.floats(0, 10),
)


@settings(max_examples=200, deadline=None)
@given(bound_args, st.integers(0, 6), st.floats(0, 5))
def test_pac_bound_monotonicity(args, which, bump):
    L, h, n, C, eps, xi = args
    base = evaluate_pac_bound(L, h, n, C, eps, xi).bound_value
    tol = 1e-12 * max(1.0, base)
    if which == 0:
        assert evaluate_pac_bound(L, h, n + int(bump * 100) + 1, C, eps, xi).bound_value <= base + tol
        return
    grown = [L, list(h), n, C, eps, xi]
    if which == 1:
        grown[0] += bump
    elif which == 2:
        grown[1][0] += bump
    elif which == 3:
        grown[3] += bump
    elif which == 4:
        grown[4] += bump
    else:
        grown[5] += bump
    assert evaluate_pac_bound(*grown).bound_value >= base - tol


def test_corollary_examples():
    p = ScalingBoundParams(1.0, 0.75)
    assert scaling_corollary_bound(0.0, p, 16, 0.01, 0.0) == pytest.approx(0.125)
    d = derive_scaling_params(1.0, 4, 1.0, 0.5)
    assert d.beta3 == pytest.approx(0.75) and d.C3 == pytest.approx(2.0)
    assert term_ratio(ScalingBoundParams(1.0, 0.6), 1e6) > 1


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0.05, 0.74), st.floats(1e-3, 1e3))
def test_crossover_guarantees_dominance(C3, beta3, xi):
    p = ScalingBoundParams(C3, beta3)
    n0 = dominance_crossover(p, xi)
    assert n0 >= 1
    if math.isinf(n0):
        assert math.log(xi / C3) / (0.75 - beta3) > 700
        return
    for factor in (1.001, 2.0, 10.0, 1e3):
        assert term_ratio(p, n0 * factor, xi) > 1


def test_crossover_rejects_steep_exponent():
    with pytest.raises(ValidationError):
        dominance_crossover(ScalingBoundParams(1.0, 0.8))


# --------------------------------------------------------------------------- scaling diagnostics


def test_power_law_fit_on_injected_values():
    ns = np.array([10, 30, 100, 1000, 10000])
    C, beta = power_law_fit(ns, 3.0 * ns**-0.4)
    assert C == pytest.approx(3.0, abs=1e-6) and beta == pytest.approx(0.4, abs=1e-6)


def test_hessian_scaling_needs_several_sizes():
    with pytest.raises(InsufficientDataError):
        bounds.hessian_scaling_fit(lambda n, s: None, [10])
    with pytest.raises(InsufficientDataError):
        bounds.hessian_scaling_fit(lambda n, s: None, [10, 20, 30, 40])


# --------------------------------------------------------------------------- lemma checks


def test_gauss_newton_exact_for_linear_regression():
    w = np.array([0.4, -1.1, 0.2])
    X, _ = dataset(8, 3, seed=1)
    check = gauss_newton_trace_check(linear_net(w), (X, X @ w))
    assert check.gap < 1e-10


def test_gauss_newton_at_interpolation():
    teacher = mlp((2, 3, 1), seed=11)
    X, _ = dataset(6, 2, seed=12)
    y = ntk.forward_batch(teacher, X)
    student = mlp((2, 6, 1), seed=13)
    fitted, mse = ntk.fit_to_tolerance(student, (X, y), tol=1e-12)
    check = gauss_newton_trace_check(fitted, (X, y))
    assert check.relative_gap < 1e-4


def test_gauss_newton_rejects_untrained_net():
    X, y = dataset(6, 2)
    with pytest.raises(ValidationError):
        gauss_newton_trace_check(mlp(), (X, y))


def test_cauchy_schwarz_examples():
    assert cauchy_schwarz_check([1.0, 1.0]) == (2.0, 2.0, True)
    lhs, rhs, ok = cauchy_schwarz_check([4.0, 0.0])
    assert lhs == 2.0 and rhs == pytest.approx(math.sqrt(8)) and ok
    with pytest.raises(ValidationError):
        cauchy_schwarz_check([1.0, -1.0])


def test_cauchy_schwarz_random_draws():
    rng = np.random.default_rng(0)
    for _ in range(10**4):
        h = rng.exponential(size=rng.integers(1, 12)) * 10 ** rng.uniform(-6, 6)
        assert cauchy_schwarz_check(h)[2]


def test_weight_distance_trivial_and_errors():
    X, y = dataset(10, 2)
    check = weight_distance_bound_check(mlp().snapshot(), (X, y))
    assert check.holds and check.lhs == (0.0, 0.0)
    with pytest.raises(ValidationError):
        weight_distance_bound_check(without_snapshot(mlp()), (X, y))


def test_weight_distance_after_finetuning():
    net = mlp((3, 5, 1), seed=2).snapshot()
    X, y = dataset(40, 3, seed=3)
    tuned = ntk.train_sgd(net, (X, y), eta=0.2, steps=50).network
    check = weight_distance_bound_check(tuned, (X, y))
    assert all(v > 0 for v in check.lhs)
    assert check.holds


def test_weight_distance_zero_input_energy():
    net = perturbed(linear_net([1.0, 2.0]))
    check = weight_distance_bound_check(net, (np.zeros((4, 2)), np.zeros(4)))
    assert check.bound == (0.0,) and not check.holds
