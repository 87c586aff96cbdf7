import math

import numpy as np
import pytest

from lapd.data import synthetic_ridge_data
from lapd.diagnostics import minibatch_variance
from lapd.model import LikelihoodSpec, PriorSpec, Regularity, build_ridge_separable, quadratic_likelihood, zero_likelihood
from lapd.oracle import run_moment_recursion
from lapd.prior_diffusion import ou_exact_step
from lapd.sampler import Recorder, Trajectory, init_from_prior, run_ensemble, run_lapd, run_sgld
from lapd.schedule import StepSchedule


def _ridge(d=3, n=12, seed=0):
    rng = np.random.default_rng(seed)
    Z, y = synthetic_ridge_data(d, n, 1.0, rng)
    return build_ridge_separable(Z, "half_squared", y)


def test_init_from_prior_examples():
    rng = np.random.default_rng(0)
    x = init_from_prior(PriorSpec.gaussian(1.0), 1.0, rng, 3, chains=10**5)
    np.testing.assert_allclose(np.cov(x, rowvar=False), np.eye(3), atol=0.02)
    x = init_from_prior(PriorSpec.gaussian(4.0), 1.0, rng, 1, chains=10**5)
    assert x.var() == pytest.approx(0.25, rel=0.02)
    x = init_from_prior(PriorSpec.gaussian(1.0), 1 / 100, rng, 1, chains=10**5)
    assert x.var() == pytest.approx(0.01, rel=0.02)
    assert init_from_prior(PriorSpec.gaussian(1.0), 1.0, rng, 4).shape == (4,)


def test_init_from_separable_prior_unsupported():
    with pytest.raises(NotImplementedError):
        init_from_prior(PriorSpec.elastic_net(1.0, 0.5), 1.0, np.random.default_rng(), 2)


def test_zero_likelihood_keeps_prior():
    s = StepSchedule.lipschitz(2.0)
    traj = run_lapd(zero_likelihood(2), PriorSpec.gaussian(2.0), s, 30, beta=0.5,
                    rng=np.random.default_rng(1), chains=10**5)
    se_var = 0.25 * math.sqrt(2 / traj.chains)
    for t in (1, 10, 30):
        x = traj.at(t)
        assert np.all(np.abs(x.mean(axis=0)) <= 5 * math.sqrt(0.25 / traj.chains))
        assert np.all(np.abs(x.var(axis=0) - 0.25) <= 5 * se_var)


def test_iteration_order_by_hand():
    # recorded w~_t is the diffused point; the gradient step feeds the next diffusion
    lik = quadratic_likelihood([[2.0, 0.3], [0.3, 1.0]], [1.0, -1.0])
    prior = PriorSpec.gaussian(1.5)
    s = StepSchedule.smooth(1.5, 2.2)
    traj = run_lapd(lik, prior, s, 5, beta=0.7, rng=np.random.default_rng(2), chains=3)
    noise_rng, _ = np.random.default_rng(2).spawn(2)
    w = init_from_prior(prior, 0.7, noise_rng, 2, 3)
    et, eta = s.steps(5)
    for t in range(5):
        wt = ou_exact_step(w, 1.5, 0.7, eta[t], noise_rng)
        np.testing.assert_array_equal(traj.samples[t], wt)
        w = wt - et[t] * lik.grad(wt)


def test_single_step_trajectory():
    traj = run_lapd(zero_likelihood(1), PriorSpec.gaussian(1.0), StepSchedule.lipschitz(1.0), 1,
                    rng=np.random.default_rng(3))
    assert len(traj) == 1 and traj.samples.shape == (1, 1, 1)
    np.testing.assert_array_equal(traj.final, traj.samples[0])


def test_sampler_matches_oracle_moments():
    lik, model = _ridge(d=2, n=8)
    A, b = model.quadratic_form()
    s = StepSchedule.smooth(1.0, model.L_ell)
    tr = run_moment_recursion(A, b, 1.0, 1.0, s, 20)
    traj = run_lapd(lik, PriorSpec.gaussian(1.0), s, 20, rng=np.random.default_rng(4), chains=40000)
    for t in (1, 5, 20):
        x = traj.at(t)
        se = x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
        assert np.all(np.abs(x.mean(axis=0) - tr.moments(t).mean) <= 5 * se)
        cov_se = np.sqrt(np.outer(x.var(axis=0), x.var(axis=0)) * 2 / x.shape[0])
        assert np.all(np.abs(np.cov(x, rowvar=False) - tr.moments(t).cov_matrix()) <= 5 * cov_se)


def test_determinism():
    lik, _ = _ridge()
    args = (lik, PriorSpec.gaussian(1.0), StepSchedule.smooth(1.0, 1.0), 50)
    a = run_sgld(*args, batch_size=3, rng=np.random.default_rng(5), chains=4)
    b = run_sgld(*args, batch_size=3, rng=np.random.default_rng(5), chains=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = run_lapd(*args, rng=np.random.default_rng(6), chains=4)
    d = run_lapd(*args, rng=np.random.default_rng(6), chains=4)
    assert c.samples.tobytes() == d.samples.tobytes()


def test_sgld_identical_data_reproduces_lapd():
    z = np.array([[0.5], [-1.0]])
    Z = np.repeat(z, 6, axis=1)
    lik, _ = build_ridge_separable(Z, "half_squared", np.full(6, 0.3))
    args = (lik, PriorSpec.gaussian(1.0), StepSchedule.smooth(1.0, 1.25), 40)
    full = run_lapd(*args, beta=0.2, rng=np.random.default_rng(7), chains=5)
    for S in (1, 6):
        sg = run_sgld(*args, beta=0.2, batch_size=S, rng=np.random.default_rng(7), chains=5)
        np.testing.assert_allclose(sg.samples, full.samples, rtol=0, atol=1e-12)


def test_sgld_single_datum_reproduces_lapd():
    lik, _ = build_ridge_separable(np.array([[1.0], [2.0]]), "logistic", [1.0])
    args = (lik, PriorSpec.gaussian(0.5), StepSchedule.smooth(0.5, 1.25), 25)
    full = run_lapd(*args, rng=np.random.default_rng(8), chains=3)
    sg = run_sgld(*args, beta=1.0, batch_size=4, rng=np.random.default_rng(8), chains=3)
    np.testing.assert_allclose(sg.samples, full.samples, rtol=0, atol=1e-12)


def test_sgld_zero_gradient_reduction():
    lik, _ = build_ridge_separable(np.zeros((3, 5)), "half_squared", np.zeros(5))
    args = (lik, PriorSpec.gaussian(1.0), StepSchedule.lipschitz(1.0), 20)
    a = run_lapd(*args, beta=0.3, rng=np.random.default_rng(9), chains=2)
    b = run_sgld(*args, beta=0.3, batch_size=2, rng=np.random.default_rng(9), chains=2)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_sgld_default_temperature():
    lik, _ = _ridge(n=40)
    traj = run_sgld(lik, PriorSpec.gaussian(1.0), StepSchedule.smooth(1.0, 1.0), 3, rng=np.random.default_rng(0))
    assert traj.beta == 1 / 40


def test_batch_variance_example():
    # targets +-1 at w* = 0: per-datum gradients are -+1
    lik, _ = build_ridge_separable(np.ones((1, 2)), "half_squared", [1.0, -1.0])
    rng = np.random.default_rng(10)
    v1, _ = minibatch_variance(lik, np.zeros(1), 1, 10**5, rng)
    v2, _ = minibatch_variance(lik, np.zeros(1), 2, 10**5, rng)
    assert v1 == pytest.approx(1.0, rel=0.05)
    assert v2 == pytest.approx(0.5, rel=0.05)


def test_error_paths():
    lik, _ = _ridge()
    prior = PriorSpec.gaussian(1.0)
    with pytest.raises(ValueError):
        run_lapd(lik, prior, StepSchedule.lipschitz(2.0), 5)
    with pytest.raises(ValueError):
        run_lapd(lik, prior, StepSchedule.lipschitz(1.0), 0)
    with pytest.raises(ValueError):
        run_sgld(quadratic_likelihood(np.eye(3)), prior, StepSchedule.lipschitz(1.0), 5)
    with pytest.raises(ValueError):
        run_sgld(lik, prior, StepSchedule.lipschitz(1.0), 5, batch_size=0)
    nan = LikelihoodSpec(lambda w: 0 * w[..., 0], lambda w: np.full_like(w, np.nan), 3, Regularity("smooth", L=1.0))
    with pytest.raises(FloatingPointError):
        run_lapd(nan, prior, StepSchedule.lipschitz(1.0), 5, rng=np.random.default_rng())


def test_separable_prior_needs_start_point():
    lik, _ = _ridge()
    prior = PriorSpec.elastic_net(1.0, 0.1)
    with pytest.raises(NotImplementedError):
        run_lapd(lik, prior, StepSchedule.smooth(1.0, 1.0), 2)
    traj = run_lapd(lik, prior, StepSchedule.smooth(1.0, 1.0), 3, w0=np.zeros(3), rng=np.random.default_rng(1))
    assert np.all(np.isfinite(traj.samples))


def test_recorder_policies():
    lik, _ = _ridge()
    args = (lik, PriorSpec.gaussian(1.0), StepSchedule.smooth(1.0, 1.0), 30)
    w = StepSchedule.smooth(1.0, 1.0).weights(30)
    full = run_lapd(*args, rng=np.random.default_rng(11), chains=7, recorder=Recorder(store="full", weights=w))
    mom = run_lapd(*args, rng=np.random.default_rng(11), chains=7,
                   recorder=Recorder(store="moments", keep_times=(4,), weights=w))
    assert mom.samples is None
    np.testing.assert_array_equal(mom.at(4), full.at(4))
    np.testing.assert_array_equal(mom.at(30), full.at(30))
    with pytest.raises(KeyError):
        mom.at(5)
    np.testing.assert_allclose(mom.sums, full.samples.sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(mom.sq_sums, (full.samples**2).sum(axis=1), atol=1e-12)
    np.testing.assert_allclose(mom.weighted, np.tensordot(w, full.samples, axes=1), atol=1e-12)
    assert Recorder().resolve(10, 10, 10**5).store == "full"
    assert Recorder().resolve(10, 100, 10**5).store == "moments"
    with pytest.raises(ValueError):
        Recorder(store="disk").resolve(1, 1, 1)


def test_ensemble_independent_of_thread_count():
    lik, _ = _ridge()
    kw = dict(lik=lik, prior=PriorSpec.gaussian(1.0), schedule=StepSchedule.smooth(1.0, 1.0), T=20)
    one = run_ensemble(run_sgld, 3, 50, block_size=16, threads=1, batch_size=2, **kw)
    many = run_ensemble(run_sgld, 3, 50, block_size=16, threads=4, batch_size=2, **kw)
    assert one.chains == 50 and one.samples.shape == (20, 50, 3)
    assert one.samples.tobytes() == many.samples.tobytes()
    assert one.sums.tobytes() == many.sums.tobytes()
    # blocks get distinct streams
    assert not np.array_equal(one.samples[:, :16], one.samples[:, 16:32])


def test_merge_rejects_mismatched_schedules():
    kw = dict(beta=1.0, chains=1, sums=np.zeros((2, 1)), sq_sums=np.zeros((2, 1)), final=np.zeros((1, 1)))
    a = Trajectory(eta=np.array([1.0, 0.5]), eta_tilde=np.array([0.6, 0.4]), **kw)
    b = Trajectory(eta=np.array([1.0, 0.4]), eta_tilde=np.array([0.6, 0.3]), **kw)
    with pytest.raises(ValueError):
        Trajectory.merge([a, b])


def test_steps_keep_diffusion_finite():
    lik, _ = _ridge()
    traj = run_lapd(lik, PriorSpec.gaussian(3.0), StepSchedule.lipschitz(3.0), 100, rng=np.random.default_rng(0))
    assert np.all(3.0 * traj.eta_tilde < 1) and np.all(np.isfinite(traj.eta))
