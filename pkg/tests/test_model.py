import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize

from lapd.data import synthetic_ridge_data
from lapd.model import (
    ConvergenceError,
    LikelihoodSpec,
    PriorSpec,
    Regularity,
    build_ridge_separable,
    find_mode,
    norm_likelihood,
    probe_convexity,
    probe_lipschitz,
    probe_smoothness,
    quadratic_likelihood,
    sg_variance_at_mode,
    zero_likelihood,
)


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec(m=0.0)
    with pytest.raises(ValueError):
        PriorSpec.elastic_net(1.0, -0.1)
    with pytest.raises(ValueError):
        PriorSpec(m=1.0, alpha=1.0)
    assert PriorSpec.gaussian(2.0).is_gaussian
    assert not PriorSpec.elastic_net(2.0, 0.0).is_gaussian


@given(st.floats(min_value=0.01, max_value=10.0), st.floats(min_value=0.0, max_value=10.0))
def test_elastic_net_minus_quadratic_is_convex(m, alpha):
    # g - m/2 x^2 = alpha |x|: midpoint convexity on random triples
    g = PriorSpec.elastic_net(m, alpha)
    x = np.linspace(-5, 5, 201)[:, None]
    h = g.value(x) - 0.5 * m * x[:, 0] ** 2
    assert np.all(h[1:-1] <= 0.5 * (h[:-2] + h[2:]) + 1e-12)


def test_prior_prox_matches_numeric_minimizer():
    g = PriorSpec.elastic_net(1.5, 0.7)
    for v in (-3.0, -0.5, 0.2, 2.0):
        gamma = 0.4
        res = optimize.minimize_scalar(lambda x: g.value(np.array([x])) + (x - v) ** 2 / (2 * gamma))
        assert g.prox(np.array([v]), gamma)[0] == pytest.approx(res.x, abs=1e-6)


def test_prior_subgradient_zero_at_kink():
    g = PriorSpec.elastic_net(1.0, 2.0)
    assert g.grad(np.array([0.0]))[0] == 0.0


def test_ridge_example_orthogonal_data():
    lik, model = build_ridge_separable(np.eye(2), "half_squared", [0.0, 0.0])
    np.testing.assert_allclose(model.hessian_bound, np.diag([0.5, 0.5]))
    assert model.trace_H2 == pytest.approx(0.5, rel=1e-15)
    assert model.L_ell == 1.0
    assert lik.regularity.L == pytest.approx(0.5)


def test_ridge_example_logistic_single_datum():
    _, model = build_ridge_separable(np.array([[1.0]]), "logistic", [1.0])
    assert (model.L_s, model.R_z, model.L_ell) == (0.25, 1.0, 0.25)


def test_logistic_curvature_never_exceeds_quarter():
    _, model = build_ridge_separable(np.ones((1, 3)), "logistic", [1.0, -1.0, 1.0])
    x = np.linspace(-30, 30, 100001)[:, None]
    d2 = model.d2s(x)
    assert d2.max() <= 0.25
    assert d2.max() == pytest.approx(0.25, rel=1e-8)
    model.check(rng=0)


def test_ridge_rejects_bad_input():
    with pytest.raises(ValueError):
        build_ridge_separable(np.zeros((2, 0)))
    with pytest.raises(ValueError):
        build_ridge_separable(np.eye(2), "hinge")
    with pytest.raises(ValueError):
        build_ridge_separable(np.eye(2), "half_squared", [1.0, 2.0, 3.0])


def test_ridge_allows_zero_columns():
    lik, model = build_ridge_separable(np.array([[1.0, 0.0], [0.0, 0.0]]), "half_squared", [1.0, 2.0])
    assert model.R_z == 1.0
    assert np.all(np.isfinite(lik.grad(np.ones(2))))


@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_ridge_gradient_matches_dense_quadratic(d, n, seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((d, n))
    y = rng.standard_normal(n)
    lik, model = build_ridge_separable(Z, "half_squared", y)
    A, b = model.quadratic_form()
    np.testing.assert_allclose(A, Z @ Z.T / n, rtol=0, atol=1e-15)
    W = rng.standard_normal((5, d))
    np.testing.assert_allclose(lik.grad(W), W @ A - b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("family", ["half_squared", "logistic"])
def test_per_datum_gradients_average_to_full(family):
    rng = np.random.default_rng(0)
    Z, y = synthetic_ridge_data(4, 9, 2.0, rng, family=family)
    lik, model = build_ridge_separable(Z, family, y)
    w = rng.standard_normal(4)
    per = lik.grad_loss(w, np.arange(9))
    np.testing.assert_allclose(per.mean(axis=0), lik.grad(w), atol=1e-14)
    # per-datum gradient is s_i'(w^T z_i) z_i
    np.testing.assert_allclose(per[3], model.ds(w @ Z)[3] * Z[:, 3], atol=1e-15)


@pytest.mark.parametrize("family", ["half_squared", "logistic"])
def test_batch_gradient_fast_path(family):
    rng = np.random.default_rng(1)
    Z, y = synthetic_ridge_data(5, 30, 1.0, rng, family=family)
    lik, _ = build_ridge_separable(Z, family, y)
    W = rng.standard_normal((11, 5))
    idx = rng.integers(0, 30, size=(11, 7))
    np.testing.assert_allclose(lik.minibatch_grad(W, idx), lik.grad_loss(W, idx).mean(axis=-2), atol=1e-14)


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    Z, y = synthetic_ridge_data(3, 20, 1.0, rng, family="logistic")
    lik, _ = build_ridge_separable(Z, "logistic", y)
    w = rng.standard_normal(3)
    fd = optimize.approx_fprime(w, lambda v: float(lik.value(v)), 1e-7)
    np.testing.assert_allclose(lik.grad(w), fd, atol=1e-6)


def _shipped_likelihoods():
    rng = np.random.default_rng(3)
    Z, y = synthetic_ridge_data(3, 15, 1.0, rng)
    Zl, yl = synthetic_ridge_data(3, 15, 1.0, rng, family="logistic")
    return [
        zero_likelihood(3),
        quadratic_likelihood(np.diag([1.0, 0.5, 0.0]), [1.0, 0.0, -1.0]),
        norm_likelihood([1.0, 0.0, -1.0], 2.0),
        build_ridge_separable(Z, "half_squared", y)[0],
        build_ridge_separable(Zl, "logistic", yl)[0],
    ]


@pytest.mark.parametrize("lik", _shipped_likelihoods(), ids=lambda l: l.name)
def test_shipped_likelihoods_pass_probes(lik):
    assert probe_convexity(lik, rng=0)
    if lik.regularity.kind == "lipschitz":
        assert probe_lipschitz(lik, rng=1)
    else:
        assert probe_smoothness(lik, rng=1)


def test_probes_catch_wrong_metadata():
    lik = quadratic_likelihood(np.eye(2) * 3.0)
    bad = LikelihoodSpec(lik.value, lik.grad, 2, Regularity("smooth", L=1.0))
    assert not probe_smoothness(bad, rng=0)
    concave = LikelihoodSpec(lambda w: -np.sum(w * w, -1), lambda w: -2 * w, 2, Regularity("smooth", L=2.0))
    assert not probe_convexity(concave, rng=0)


def test_quadratic_rejects_indefinite():
    with pytest.raises(ValueError):
        quadratic_likelihood(np.diag([1.0, -1.0]))


def test_find_mode_examples():
    g = PriorSpec.gaussian(1.0)
    assert find_mode(quadratic_likelihood([[1.0]]), g)[0] == 0.0
    assert find_mode(norm_likelihood([1.0], 1.0), g)[0] == pytest.approx(1.0, abs=1e-12)
    assert find_mode(quadratic_likelihood([[1.0]], [2.0], 2.0), g)[0] == pytest.approx(1.0, rel=1e-15)


def test_find_mode_kink_agrees_with_grid_search():
    g = PriorSpec.gaussian(1.0)
    grid = np.linspace(-3, 3, 600001)
    for c, G in ((1.0, 1.0), (3.0, 1.0), (0.5, 2.0)):
        w = find_mode(norm_likelihood([c], G), g)[0]
        vals = G * np.abs(grid - c) + 0.5 * grid**2
        assert w == pytest.approx(grid[np.argmin(vals)], abs=2e-5)


def test_find_mode_general_smooth_path():
    # logistic f with an elastic-net prior: check the subgradient optimality condition
    rng = np.random.default_rng(4)
    Z, y = synthetic_ridge_data(4, 40, 1.0, rng, family="logistic")
    lik, _ = build_ridge_separable(Z, "logistic", y)
    prior = PriorSpec.elastic_net(0.5, 0.05)
    w = find_mode(lik, prior)
    gf = lik.grad(w)
    for j in range(4):
        if w[j] != 0:
            assert abs(gf[j] + 0.5 * w[j] + 0.05 * np.sign(w[j])) <= 1e-7
        else:
            assert abs(gf[j]) <= 0.05 + 1e-7
    res = optimize.minimize(lambda v: float(lik.value(v) + prior.value(v)), np.zeros(4), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
    np.testing.assert_allclose(w, res.x, atol=1e-4)


def test_find_mode_subgradient_fallback_and_failure():
    # |w - 3| + w^2/2 is smooth at its minimizer w = 1
    f = norm_likelihood([3.0], 1.0)
    no_prox = LikelihoodSpec(f.value, f.grad, 1, f.regularity)
    w = find_mode(no_prox, PriorSpec.gaussian(1.0))
    assert w[0] == pytest.approx(1.0, abs=1e-8)
    # mode sits on the kink: the subgradient path cannot certify it
    stuck = LikelihoodSpec(norm_likelihood([1.0]).value, norm_likelihood([1.0]).grad, 1, Regularity("lipschitz", G=1.0))
    with pytest.raises(ConvergenceError):
        find_mode(stuck, PriorSpec.gaussian(1.0), max_iter=1000)


def test_sg_variance_examples():
    lik, model = build_ridge_separable(np.ones((1, 2)), "half_squared", [1.0, -1.0])
    w_star = find_mode(lik, PriorSpec.gaussian(1.0))
    assert w_star[0] == 0.0
    assert sg_variance_at_mode(model, w_star).b2 == 1.0
    assert sg_variance_at_mode(lik, w_star).b2 == 1.0

    lik1, model1 = build_ridge_separable(np.array([[0.3], [2.0]]), "half_squared", [0.7])
    assert sg_variance_at_mode(model1, np.array([0.1, -0.2])).b2 == 0.0

    _, model2 = build_ridge_separable(np.eye(2), "half_squared", [0.0, 0.0])
    w = np.array([0.4, -1.0])
    v = sg_variance_at_mode(model2, w)
    # per-datum gradients (0.4, 0) and (0, -1), mean (0.2, -0.5)
    assert v.b2 == pytest.approx(0.5 * (0.2**2 + 0.5**2 + 0.2**2 + 0.5**2), rel=1e-14)
    assert v.b2 <= v.bound


def test_sg_variance_needs_data():
    with pytest.raises(ValueError):
        sg_variance_at_mode(quadratic_likelihood(np.eye(2)), np.zeros(2))


@given(st.integers(1, 5), st.integers(1, 20), st.sampled_from(["half_squared", "logistic"]), st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_sg_variance_below_analytic_bound(d, n, family, seed):
    rng = np.random.default_rng(seed)
    Z, y = synthetic_ridge_data(d, n, float(rng.uniform(0.1, 4)), rng, family=family)
    lik, model = build_ridge_separable(Z, family, y)
    w_star = find_mode(lik, PriorSpec.gaussian(1.0))
    v = sg_variance_at_mode(model, w_star)
    assert v.b2 <= v.bound * (1 + 1e-12)
    assert sg_variance_at_mode(lik, w_star).b2 == pytest.approx(v.b2, rel=1e-10, abs=1e-15)


@given(arrays(np.float64, (3, 7), elements=st.floats(-3, 3)))
def test_trace_bound_holds(Z):
    _, model = build_ridge_separable(Z, "half_squared", np.zeros(7))
    assert model.trace_H2 <= model.L_s**2 * model.R_z**2 * (1 + 1e-12) + 1e-300
    H = model.hessian_bound
    assert model.trace_H2 == pytest.approx(float(np.trace(H @ H)), rel=1e-10, abs=1e-12)
