"""Exact ground truth for the sampler.

With quadratic ``f`` (``grad f(w) = A w - b``), a Gaussian prior and a
Gaussian start, both algorithm steps are affine maps plus Gaussian noise, so
the law of every iterate is Gaussian and can be propagated exactly. One-dimensional
posteriors of any shape are handled by quadrature on a grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize
from scipy.integrate import cumulative_trapezoid, trapezoid

from .prior_diffusion import ou_transition
from .schedule import StepSchedule

__all__ = [
    "GaussianMoments",
    "ou_moment_step",
    "grad_moment_step",
    "gaussian_kl",
    "gaussian_w2",
    "posterior_moments",
    "MomentTrace",
    "run_moment_recursion",
    "expected_grad_sq_norm",
    "GridPosterior1D",
    "quadrature_posterior_1d",
    "empirical_w2_1d",
    "DENSE_W2_MAX_DIM",
]

DENSE_W2_MAX_DIM = 512


@dataclass(frozen=True)
class GaussianMoments:
    """Mean and covariance; ``cov`` of shape ``(d,)`` means a diagonal covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1)
        d = mean.shape[0]
        if cov.shape not in ((d,), (d, d)):
            raise ValueError(f"covariance shape {cov.shape} does not match dimension {d}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    def dense(self) -> "GaussianMoments":
        return self if not self.is_diagonal else GaussianMoments(self.mean, np.diag(self.cov))

    def cov_matrix(self) -> np.ndarray:
        return np.diag(self.cov) if self.is_diagonal else self.cov

    def check(self, tol: float = 1e-12) -> None:
        if self.is_diagonal:
            ok = np.all(self.cov > 0)
        else:
            C = self.cov
            if np.max(np.abs(C - C.T)) > tol * max(1.0, np.max(np.abs(C))):
                raise ValueError("covariance is not symmetric")
            ok = np.linalg.eigvalsh(C)[0] > 0
        if not ok:
            raise ValueError("covariance is not positive definite")


def ou_moment_step(gm: GaussianMoments, m: float, beta: float, eta: float) -> GaussianMoments:
    """Moments after an exact Gaussian-prior diffusion of duration ``eta``."""
    scale, var = ou_transition(m, beta, eta)
    if gm.is_diagonal:
        cov = scale**2 * gm.cov + var
    else:
        cov = scale**2 * gm.cov + var * np.eye(gm.dim)
    return GaussianMoments(scale * gm.mean, cov)


def grad_moment_step(gm: GaussianMoments, A, b, eta_tilde: float) -> GaussianMoments:
    """Moments after ``w <- w - eta_tilde (A w - b)``.

    ``A`` of shape ``(d,)`` is a diagonal matrix; with a diagonal ``gm`` the
    result stays diagonal.
    """
    A = np.asarray(A, dtype=float)
    b = np.zeros(gm.dim) if b is None else np.asarray(b, dtype=float)
    if A.ndim == 1:
        M = 1.0 - eta_tilde * A
        mean = M * gm.mean + eta_tilde * b
        cov = M * M * gm.cov if gm.is_diagonal else M[:, None] * gm.cov * M[None, :]
        return GaussianMoments(mean, cov)
    M = np.eye(gm.dim) - eta_tilde * A
    C = gm.cov_matrix()
    cov = M @ C @ M.T
    return GaussianMoments(M @ gm.mean + eta_tilde * b, 0.5 * (cov + cov.T))


def is_unstable(A, eta_tilde: float) -> bool:
    """True when ``I - eta_tilde A`` has an eigenvalue ``<= -1``."""
    A = np.asarray(A, dtype=float)
    eig = A if A.ndim == 1 else np.linalg.eigvalsh(A)
    return bool(np.any(1.0 - eta_tilde * eig <= -1.0))


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """``KL(p || q)`` between Gaussians."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    diff = q.mean - p.mean
    if p.is_diagonal and q.is_diagonal:
        if np.any(p.cov <= 0) or np.any(q.cov <= 0):
            raise ValueError("singular covariance")
        r = p.cov / q.cov
        val = 0.5 * (np.sum(r) + np.sum(diff * diff / q.cov) - d - np.sum(np.log(r)))
        return max(float(val), 0.0)
    Sp, Sq = p.cov_matrix(), q.cov_matrix()
    try:
        cq = linalg.cho_factor(Sq, lower=True)
        cp = linalg.cho_factor(Sp, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("singular covariance") from exc
    tr = np.trace(linalg.cho_solve(cq, Sp))
    maha = diff @ linalg.cho_solve(cq, diff)
    logdet = 2.0 * (np.sum(np.log(np.diag(cq[0]))) - np.sum(np.log(np.diag(cp[0]))))
    return max(float(0.5 * (tr + maha - d + logdet)), 0.0)


def _sqrtm_psd(C):
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    floor = 1e-12 * max(np.trace(C), 0.0)
    lam = np.sqrt(np.maximum(lam, floor))
    return (V * lam) @ V.T


def gaussian_w2(p: GaussianMoments, q: GaussianMoments) -> float:
    """Squared 2-Wasserstein distance (Bures-Wasserstein formula).

    Returns ``W2^2``; the dense path is limited to ``d <= 512``.
    """
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    diff = p.mean - q.mean
    mean_term = float(diff @ diff)
    if p.is_diagonal and q.is_diagonal:
        return mean_term + float(np.sum((np.sqrt(p.cov) - np.sqrt(q.cov)) ** 2))
    if p.dim > DENSE_W2_MAX_DIM:
        raise ValueError(f"dense W2 is limited to d <= {DENSE_W2_MAX_DIM}")
    Sp, Sq = p.cov_matrix(), q.cov_matrix()
    rq = _sqrtm_psd(Sq)
    cross = _sqrtm_psd(rq @ Sp @ rq)
    return max(mean_term + float(np.trace(Sp) + np.trace(Sq) - 2.0 * np.trace(cross)), 0.0)


def posterior_moments(A, b, m: float, beta: float) -> GaussianMoments:
    """``p* = N((A + m I)^{-1} b, beta (A + m I)^{-1})`` for quadratic ``f``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    P = A + m * np.eye(A.shape[0])
    Pinv = np.linalg.inv(P)
    return GaussianMoments(Pinv @ np.asarray(b, dtype=float), beta * 0.5 * (Pinv + Pinv.T))


def expected_grad_sq_norm(A, b, m: float, beta: float) -> float:
    """Closed-form ``E_{p*} ||A w - b||^2`` for quadratic ``f``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    post = posterior_moments(A, b, m, beta)
    r = A @ post.mean - np.asarray(b, dtype=float)
    return float(r @ r + np.trace(A @ post.cov @ A))


@dataclass
class MomentTrace:
    """Exact laws of ``w~_t`` for ``t = 1..T``.

    Moments are stored in the eigenbasis ``Q`` of ``A`` (diagonal covariances)
    unless the recursion was run densely, in which case ``Q`` is ``None``.
    ``weighted_kl[T-1]`` is the theorem's weighted sum of ``KL(p~_t || p*)``
    for horizon ``T``.
    """

    eta_tilde: np.ndarray
    eta: np.ndarray
    kl: np.ndarray
    weighted_kl: np.ndarray
    posterior: GaussianMoments
    means: np.ndarray
    covs: np.ndarray
    Q: Optional[np.ndarray]
    final: GaussianMoments

    @property
    def T(self) -> int:
        return len(self.kl)

    def moments(self, t: int) -> GaussianMoments:
        """Law of ``w~_t`` in the original coordinates (1-based ``t``)."""
        mean, cov = self.means[t - 1], self.covs[t - 1]
        if self.Q is None:
            return GaussianMoments(mean, cov)
        Q = self.Q
        return GaussianMoments(Q @ mean, (Q * cov) @ Q.T)

    def weighted_mean(self, weights) -> np.ndarray:
        """Mean of the weighted-average law of ``w~_t``."""
        mu = np.asarray(weights) @ self.means
        return mu if self.Q is None else self.Q @ mu


def _cumulative_weighted(kl, schedule: StepSchedule):
    T = len(kl)
    raw = schedule.raw_weights(T)
    num = np.cumsum(raw * kl)
    if schedule.tau == 2:
        t = np.arange(1, T + 1, dtype=float)
        den = t / (schedule.m * schedule.eta_tilde_0) + 0.25 * t * (t + 1)
    else:
        den = np.cumsum(raw)
    return num / den


def run_moment_recursion(
    A,
    b,
    m: float,
    beta: float,
    schedule: StepSchedule,
    T: int,
    *,
    diagonalize: bool = True,
) -> MomentTrace:
    """Propagate the exact Gaussian law through ``T`` iterations.

    Starts from ``w_0 ~ N(0, beta/m I)`` and alternates the prior diffusion
    and the gradient step. With ``diagonalize`` the recursion runs in the
    eigenbasis of ``A``, where every covariance is diagonal.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
    if not math.isclose(schedule.m, m, rel_tol=1e-12):
        raise ValueError("schedule m does not match prior m")
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    eta_tilde, eta = schedule.steps(T)
    post = posterior_moments(A, b, m, beta)

    if diagonalize:
        lam, Q = np.linalg.eigh(0.5 * (A + A.T))
        lam = np.maximum(lam, 0.0)
        A_step, b_step = lam, Q.T @ b
        post_basis = GaussianMoments(b_step / (lam + m), beta / (lam + m))
        gm = GaussianMoments(np.zeros(d), np.full(d, beta / m))
        covs = np.empty((T, d))
    else:
        Q = None
        A_step, b_step = A, b
        post_basis = post
        gm = GaussianMoments(np.zeros(d), beta / m * np.eye(d))
        covs = np.empty((T, d, d))

    means = np.empty((T, d))
    kl = np.empty(T)
    for t in range(T):
        gm = ou_moment_step(gm, m, beta, eta[t])
        means[t] = gm.mean
        covs[t] = gm.cov
        kl[t] = gaussian_kl(gm, post_basis)
        gm = grad_moment_step(gm, A_step, b_step, eta_tilde[t])

    final = gm if Q is None else GaussianMoments(Q @ gm.mean, (Q * gm.cov) @ Q.T)
    return MomentTrace(
        eta_tilde=eta_tilde,
        eta=eta,
        kl=kl,
        weighted_kl=_cumulative_weighted(kl, schedule),
        posterior=post,
        means=means,
        covs=covs,
        Q=Q,
        final=final,
    )


@dataclass(frozen=True)
class GridPosterior1D:
    """Normalized one-dimensional density tabulated on a grid."""

    grid: np.ndarray
    density: np.ndarray
    cdf: np.ndarray

    def quantile(self, u):
        """Inverse CDF by monotone linear interpolation."""
        keep = np.concatenate([[True], np.diff(self.cdf) > 0])
        return np.interp(u, self.cdf[keep], self.grid[keep])

    def mean(self) -> float:
        return float(trapezoid(self.grid * self.density, self.grid))

    def var(self) -> float:
        mu = self.mean()
        return float(trapezoid((self.grid - mu) ** 2 * self.density, self.grid))


def quadrature_posterior_1d(
    f_value: Callable,
    g_value: Callable,
    beta: float,
    *,
    m: float = 1.0,
    points: int = 20001,
    center: Optional[float] = None,
    half_width: Optional[float] = None,
    grid=None,
) -> GridPosterior1D:
    """Tabulate ``p*(w) ∝ exp(-(f(w) + g(w)) / beta)`` on a uniform grid.

    The default grid is centered at the mode and spans ``10 sqrt(beta/m)``
    on each side. Oracles take scalar-valued arrays of shape ``(k,)``.
    """
    if grid is None:
        if points < 10**4:
            raise ValueError(f"need at least 10^4 grid points, got {points}")
        if center is None:
            res = optimize.minimize_scalar(lambda x: float(f_value(np.array([x]))[0] + g_value(np.array([x]))[0]))
            center = float(res.x)
        if half_width is None:
            half_width = 10.0 * math.sqrt(beta / m)
        grid = np.linspace(center - half_width, center + half_width, points)
    else:
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size < 10**4:
            raise ValueError("need a 1-D grid with at least 10^4 points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
    logp = -(np.asarray(f_value(grid), dtype=float) + np.asarray(g_value(grid), dtype=float)) / beta
    if not np.any(np.isfinite(logp)):
        raise ValueError("density underflowed everywhere; grid is misplaced")
    logp = logp - np.max(logp)
    dens = np.exp(logp)
    if not np.all(np.isfinite(dens)) or np.max(dens) == 0:
        raise ValueError("density underflowed everywhere; grid is misplaced")
    Z = trapezoid(dens, grid)
    dens = dens / Z
    cdf = cumulative_trapezoid(dens, grid, initial=0.0)
    cdf = np.clip(cdf / cdf[-1], 0.0, 1.0)
    return GridPosterior1D(grid=grid, density=dens, cdf=cdf)


def empirical_w2_1d(samples, reference, weights=None) -> float:
    """Squared W2 between a weighted sample and a reference law in 1-D.

    Uses the monotone coupling: sorted samples are matched to reference
    quantiles at the weighted midpoint ranks ``u_k``. ``reference`` is a
    :class:`GridPosterior1D` or any vectorized quantile function.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("empty sample set")
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != x.shape or np.any(w < 0):
        raise ValueError("weights must be non-negative and match the samples")
    w = w / np.sum(w)
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    u = np.cumsum(w) - 0.5 * w
    qf = reference.quantile if isinstance(reference, GridPosterior1D) else reference
    q = np.asarray(qf(u), dtype=float)
    return float(np.sum(w * (x - q) ** 2))
