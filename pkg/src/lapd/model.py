"""Potentials, per-datum losses and the regularity constants derived from data.

The posterior is ``p(w) ∝ exp(-(f(w) + g(w)) / beta)`` with ``g`` an
``m``-strongly convex prior term and ``f`` a convex negative log-likelihood.
All oracles act on arrays of shape ``(..., d)`` so that many chains can be
evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

__all__ = [
    "ConvergenceError",
    "PriorSpec",
    "Regularity",
    "LikelihoodSpec",
    "RidgeSeparableModel",
    "SGVariance",
    "quadratic_likelihood",
    "norm_likelihood",
    "zero_likelihood",
    "build_ridge_separable",
    "find_mode",
    "sg_variance_at_mode",
    "probe_convexity",
    "probe_lipschitz",
    "probe_smoothness",
    "ACTIVATIONS",
]

ACTIVATIONS = ("half_squared", "logistic")


class ConvergenceError(RuntimeError):
    """Raised when the mode solver exhausts its iteration budget."""


def _sign0(x):
    # minimum-norm subgradient of |x|: zero exactly at the kink
    return np.sign(x)


@dataclass(frozen=True)
class PriorSpec:
    """Strongly convex prior term ``g``.

    ``isotropic_gaussian`` is ``g(w) = m/2 ||w||^2``. ``separable`` is
    ``g(w) = sum_j m/2 w_j^2 + alpha_j |w_j|`` (Bayesian elastic net when
    ``alpha > 0``); each coordinate evolves independently under the prior
    diffusion.
    """

    m: float
    kind: str = "isotropic_gaussian"
    alpha: np.ndarray | float = 0.0

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"strong convexity m must be positive, got {self.m}")
        if self.kind not in ("isotropic_gaussian", "separable"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        alpha = np.asarray(self.alpha, dtype=float)
        if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
            raise ValueError("elastic-net weights alpha must be finite and >= 0")
        if self.kind == "isotropic_gaussian" and np.any(alpha != 0):
            raise ValueError("isotropic_gaussian prior cannot carry an L1 term")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def gaussian(cls, m: float) -> "PriorSpec":
        return cls(m=m)

    @classmethod
    def elastic_net(cls, m: float, alpha) -> "PriorSpec":
        return cls(m=m, kind="separable", alpha=alpha)

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "isotropic_gaussian"

    def value(self, w):
        w = np.asarray(w, dtype=float)
        out = 0.5 * self.m * np.sum(w * w, axis=-1)
        if self.kind == "separable":
            out = out + np.sum(self.alpha * np.abs(w), axis=-1)
        return out

    def grad(self, w):
        w = np.asarray(w, dtype=float)
        out = self.m * w
        if self.kind == "separable":
            out = out + self.alpha * _sign0(w)
        return out

    def prox(self, v, gamma: float):
        """``argmin_x g(x) + ||x - v||^2 / (2 gamma)``."""
        v = np.asarray(v, dtype=float)
        if self.kind == "separable":
            v = np.sign(v) * np.maximum(np.abs(v) - gamma * self.alpha, 0.0)
        return v / (1.0 + gamma * self.m)


@dataclass(frozen=True)
class Regularity:
    """Trusted regularity metadata for ``f``.

    ``kind='lipschitz'`` carries ``G`` with ``||grad f|| <= G``;
    ``kind='smooth'`` carries ``L`` and optionally a matrix ``hessian``
    with ``hess f(w) <= hessian`` in the Loewner order.
    """

    kind: str
    G: Optional[float] = None
    L: Optional[float] = None
    hessian: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "lipschitz":
            if self.G is None or self.G < 0:
                raise ValueError("lipschitz regularity needs G >= 0")
        elif self.kind == "smooth":
            if self.L is None or self.L < 0:
                raise ValueError("smooth regularity needs L >= 0")
        else:
            raise ValueError(f"unknown regularity kind {self.kind!r}")

    @property
    def trace_H2(self) -> Optional[float]:
        if self.hessian is None:
            return None
        H = np.asarray(self.hessian)
        return float(np.sum(H * H))

    @property
    def trace_H(self) -> Optional[float]:
        if self.hessian is None:
            return None
        return float(np.trace(self.hessian))


@dataclass
class LikelihoodSpec:
    """Convex negative log-likelihood ``f`` with its oracles.

    ``grad_loss(w, idx)`` returns per-datum gradients ``grad l(w, z_i)`` with
    shape ``idx.shape + (d,)`` for ``w`` of shape ``idx.shape[:-1] + (d,)``.
    ``quadratic`` holds ``(A, b)`` when ``grad f(w) = A w - b``, which enables
    closed-form mode finding and the Gaussian moment oracle. ``prox(v, gamma)``
    is optional and only used by :func:`find_mode`. ``batch_grad(w, idx)`` is
    an optional faster equivalent of ``grad_loss(w, idx).mean(axis=-2)``.
    """

    value: Callable
    grad: Callable
    dim: int
    regularity: Regularity
    grad_loss: Optional[Callable] = None
    n: int = 0
    quadratic: Optional[tuple] = None
    prox: Optional[Callable] = None
    name: str = "custom"
    dataset: Optional[np.ndarray] = field(default=None, repr=False)
    batch_grad: Optional[Callable] = field(default=None, repr=False)

    @property
    def has_data(self) -> bool:
        return self.grad_loss is not None and self.n > 0

    def minibatch_grad(self, w, idx):
        """Average per-datum gradient over the last axis of ``idx``."""
        if self.grad_loss is None:
            raise ValueError(f"likelihood {self.name!r} has no per-datum gradient oracle")
        if self.batch_grad is not None:
            return self.batch_grad(w, idx)
        return self.grad_loss(w, idx).mean(axis=-2)


def zero_likelihood(dim: int) -> LikelihoodSpec:
    """``f == 0``: the posterior is the prior."""

    def value(w):
        return np.zeros(np.shape(w)[:-1])

    def grad(w):
        return np.zeros(np.shape(w))

    return LikelihoodSpec(
        value=value,
        grad=grad,
        dim=dim,
        regularity=Regularity("smooth", G=0.0, L=0.0, hessian=np.zeros((dim, dim))),
        quadratic=(np.zeros((dim, dim)), np.zeros(dim)),
        prox=lambda v, gamma: np.asarray(v, dtype=float),
        name="zero",
    )


def quadratic_likelihood(A, b=None, c: float = 0.0) -> LikelihoodSpec:
    """``f(w) = 1/2 w^T A w - b^T w + c`` for symmetric PSD ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("A must be a symmetric square matrix")
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float).reshape(d)
    eig = np.linalg.eigvalsh(A)
    if eig[0] < -1e-12 * max(1.0, eig[-1]):
        raise ValueError("A must be positive semidefinite for f to be convex")

    def value(w):
        w = np.asarray(w, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", w, A, w) - w @ b + c

    def grad(w):
        return np.asarray(w, dtype=float) @ A - b

    return LikelihoodSpec(
        value=value,
        grad=grad,
        dim=d,
        regularity=Regularity("smooth", L=float(max(eig[-1], 0.0)), hessian=A),
        quadratic=(A, b),
        name="quadratic",
    )


def norm_likelihood(center, G: float = 1.0) -> LikelihoodSpec:
    """``f(w) = G ||w - center||_2``, convex and ``G``-Lipschitz.

    In one dimension this is ``G |w - c|``. The gradient oracle returns the
    minimum-norm subgradient (zero) at ``w = center``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    d = center.shape[0]

    def value(w):
        return G * np.linalg.norm(np.asarray(w, dtype=float) - center, axis=-1)

    def grad(w):
        diff = np.asarray(w, dtype=float) - center
        r = np.linalg.norm(diff, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(r > 0, G * diff / r, 0.0)
        return out

    def prox(v, gamma):
        # block soft-thresholding towards the center
        diff = np.asarray(v, dtype=float) - center
        r = np.linalg.norm(diff, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            shrink = np.where(r > gamma * G, 1.0 - gamma * G / r, 0.0)
        return center + shrink * diff

    return LikelihoodSpec(
        value=value,
        grad=grad,
        dim=d,
        regularity=Regularity("lipschitz", G=float(G)),
        prox=prox,
        name="norm",
    )


@dataclass(frozen=True)
class RidgeSeparableModel:
    """``f(w) = (1/n) sum_i s_i(w^T z_i)`` with data columns ``Z[:, i]``."""

    Z: np.ndarray
    y: np.ndarray
    family: str
    L_s: float
    R_z: float

    @property
    def d(self) -> int:
        return self.Z.shape[0]

    @property
    def n(self) -> int:
        return self.Z.shape[1]

    @property
    def L_ell(self) -> float:
        return self.L_s * self.R_z

    @property
    def hessian_bound(self) -> np.ndarray:
        """``H = L_s Z Z^T / n``."""
        return self.L_s * (self.Z @ self.Z.T) / self.n

    @property
    def trace_H2(self) -> float:
        # ||Z^T Z||_F^2 = trace((Z Z^T)^2), cheaper when n < d
        gram = self.Z.T @ self.Z
        return float(self.L_s**2 * np.sum(gram * gram) / self.n**2)

    @property
    def trace_H(self) -> float:
        return float(self.L_s * np.sum(self.Z * self.Z) / self.n)

    def s(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "half_squared":
            return 0.5 * (x - self.y) ** 2
        return np.logaddexp(0.0, -self.y * x)

    def ds(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "half_squared":
            return x - self.y
        return -self.y * expit(-self.y * x)

    def d2s(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "half_squared":
            return np.ones_like(x * self.y)
        p = expit(self.y * x)
        return self.y**2 * p * (1.0 - p)

    def quadratic_form(self):
        """``(A, b)`` with ``grad f(w) = A w - b`` for half-squared error."""
        if self.family != "half_squared":
            raise ValueError("only the half-squared-error model is quadratic")
        return (self.Z @ self.Z.T) / self.n, (self.Z @ self.y) / self.n

    def check(self, rng=None, probes: int = 1000) -> None:
        """Validate the R1/R2 metadata on the data and on random probes."""
        norms = np.sum(self.Z * self.Z, axis=0)
        if np.any(norms > self.R_z * (1 + 1e-12)):
            raise ValueError("some datum violates ||z_i||^2 <= R_z")
        rng = np.random.default_rng(rng)
        x = rng.normal(scale=10.0, size=(probes, 1))
        if np.any(np.abs(self.d2s(x)) > self.L_s * (1 + 1e-12)):
            raise ValueError("activation second derivative exceeds L_s")


def build_ridge_separable(Z, family: str = "half_squared", targets=None):
    """Assemble the ridge-separable likelihood and its constants.

    Parameters
    ----------
    Z : array (d, n)
        Data matrix with one datum per column.
    family : {"half_squared", "logistic"}
        ``s_i(x) = (x - y_i)^2 / 2`` or ``s_i(x) = log(1 + exp(-y_i x))``.
    targets : array (n,), optional
        Per-datum targets ``y_i``; zeros for half-squared error, ones for
        logistic when omitted.

    Returns
    -------
    (LikelihoodSpec, RidgeSeparableModel)
    """
    if family not in ACTIVATIONS:
        raise ValueError(f"unknown activation family {family!r}; expected one of {ACTIVATIONS}")
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.size == 0:
        raise ValueError("Z must be a non-empty (d, n) matrix")
    d, n = Z.shape
    if targets is None:
        y = np.zeros(n) if family == "half_squared" else np.ones(n)
    else:
        y = np.asarray(targets, dtype=float).reshape(-1)
    if y.shape != (n,):
        raise ValueError(f"expected {n} targets, got {y.shape[0]}")

    L_s = 1.0 if family == "half_squared" else 0.25 * float(np.max(y * y))
    R_z = float(np.max(np.sum(Z * Z, axis=0)))
    model = RidgeSeparableModel(Z=Z, y=y, family=family, L_s=L_s, R_z=R_z)
    Zt = Z.T.copy()

    def value(w):
        return np.mean(model.s(np.asarray(w, dtype=float) @ Z), axis=-1)

    def grad(w):
        return model.ds(np.asarray(w, dtype=float) @ Z) @ Zt / n

    def grad_loss(w, idx):
        idx = np.asarray(idx)
        w = np.asarray(w, dtype=float)
        z = Zt[idx]  # (..., k, d)
        proj = np.einsum("...kd,...d->...k", z, w)
        return _per_datum_ds(model, proj, idx)[..., None] * z

    def batch_grad(w, idx):
        # scatter the per-datum coefficients into a (rows, n) matrix, one matmul
        idx = np.asarray(idx)
        w = np.asarray(w, dtype=float)
        lead = idx.shape[:-1]
        w = np.broadcast_to(w, lead + (d,)).reshape(-1, d)
        idx2 = idx.reshape(-1, idx.shape[-1])
        proj = np.take_along_axis(w @ Z, idx2, axis=-1)
        coef = _per_datum_ds(model, proj, idx2) / idx2.shape[-1]
        flat = (np.arange(idx2.shape[0])[:, None] * n + idx2).ravel()
        C = np.bincount(flat, weights=coef.ravel(), minlength=idx2.shape[0] * n)
        return (C.reshape(-1, n) @ Zt).reshape(lead + (d,))

    quadratic = model.quadratic_form() if family == "half_squared" else None
    H = model.hessian_bound
    L = float(np.linalg.eigvalsh(H)[-1]) if d <= 2048 else model.L_ell
    lik = LikelihoodSpec(
        value=value,
        grad=grad,
        dim=d,
        regularity=Regularity("smooth", L=L, hessian=H),
        grad_loss=grad_loss,
        n=n,
        quadratic=quadratic,
        name=f"ridge_{family}",
        dataset=np.column_stack([Zt, y]),
        batch_grad=batch_grad,
    )
    return lik, model


def _per_datum_ds(model: RidgeSeparableModel, x, idx):
    y = model.y[idx]
    if model.family == "half_squared":
        return x - y
    return -y * expit(-y * x)


def _subgradient_residual(lik, prior, w):
    return float(np.linalg.norm(lik.grad(w) + prior.grad(w)))


def find_mode(lik: LikelihoodSpec, prior: PriorSpec, *, tol: float = 1e-8, max_iter: int = 10**6, x0=None):
    """Minimizer ``w*`` of ``f + g``.

    Quadratic ``f`` with a Gaussian prior is solved in closed form. Otherwise
    proximal gradient iterations are used (forward step on the smooth part,
    prox on the other) and stopped once an explicit element of the
    subdifferential at the iterate has norm ``<= tol * max(1, ||w||)``.
    Lipschitz ``f`` without a prox falls back to subgradient descent with
    steps ``1/(m (k+1))``.
    """
    d = lik.dim
    if lik.quadratic is not None and prior.is_gaussian:
        A, b = lik.quadratic
        return np.linalg.solve(A + prior.m * np.eye(d), b)
    if lik.prox is not None and prior.is_gaussian:
        # argmin f + m/2 ||w||^2 is exactly prox_{f/m}(0)
        return np.asarray(lik.prox(np.zeros(d), 1.0 / prior.m), dtype=float)

    w = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    if lik.regularity.kind == "smooth":
        gamma = 1.0 / (lik.regularity.L + prior.m)
        for _ in range(max_iter):
            gw = lik.grad(w)
            w_next = prior.prox(w - gamma * gw, gamma)
            # (w - w_next)/gamma - grad f(w) + grad f(w_next) lies in d(f+g)(w_next)
            resid = (w - w_next) / gamma - gw + lik.grad(w_next)
            w = w_next
            if np.linalg.norm(resid) <= tol * max(1.0, np.linalg.norm(w)):
                return w
        raise ConvergenceError(f"proximal gradient did not reach tolerance in {max_iter} iterations")

    best, best_res = w.copy(), np.inf
    for k in range(max_iter):
        sub = lik.grad(w) + prior.grad(w)
        res = float(np.linalg.norm(sub))
        if res < best_res:
            best, best_res = w.copy(), res
        if res <= tol * max(1.0, np.linalg.norm(w)):
            return w
        w = w - sub / (prior.m * (k + 1))
    raise ConvergenceError(
        f"subgradient descent stalled at residual {best_res:.3g} after {max_iter} iterations; "
        "the oracles may be inconsistent or the mode sits on a kink (supply a prox)"
    )


@dataclass(frozen=True)
class SGVariance:
    """Stochastic-gradient variance at the mode.

    ``bound`` is ``4 R_z b_s^2`` for ridge-separable models, else ``None``.
    """

    b2: float
    bound: Optional[float] = None
    b_s: Optional[float] = None


def sg_variance_at_mode(source, w_star) -> SGVariance:
    """``(1/n) sum_i ||grad l(w*, z_i) - grad f(w*)||^2``.

    ``source`` is a :class:`RidgeSeparableModel` or a :class:`LikelihoodSpec`
    carrying a dataset.
    """
    w_star = np.asarray(w_star, dtype=float)
    if isinstance(source, RidgeSeparableModel):
        ds = source.ds(w_star @ source.Z)
        per = ds[:, None] * source.Z.T
        b_s = float(np.max(np.abs(ds)))
        dev = per - per.mean(axis=0)
        b2 = float(np.mean(np.sum(dev * dev, axis=1)))
        return SGVariance(b2=b2, bound=4.0 * source.R_z * b_s**2, b_s=b_s)
    if not isinstance(source, LikelihoodSpec) or not source.has_data:
        raise ValueError("stochastic-gradient variance needs a per-datum gradient oracle and a dataset")
    per = source.grad_loss(w_star, np.arange(source.n))
    full = source.grad(w_star)
    dev = per - full
    return SGVariance(b2=float(np.mean(np.sum(dev * dev, axis=1))))


def _probe_pairs(dim, rng, pairs, scale):
    rng = np.random.default_rng(rng)
    return rng.normal(scale=scale, size=(pairs, dim)), rng.normal(scale=scale, size=(pairs, dim))


def probe_convexity(lik: LikelihoodSpec, rng=None, pairs: int = 1000, scale: float = 3.0, rtol: float = 1e-9) -> bool:
    """First-order convexity inequality on random probe pairs."""
    x, y = _probe_pairs(lik.dim, rng, pairs, scale)
    fx, fy = lik.value(x), lik.value(y)
    lin = fx + np.sum(lik.grad(x) * (y - x), axis=-1)
    slack = rtol * np.maximum(1.0, np.abs(fx) + np.abs(fy))
    return bool(np.all(fy >= lin - slack))


def probe_lipschitz(lik: LikelihoodSpec, rng=None, probes: int = 1000, scale: float = 3.0) -> bool:
    G = lik.regularity.G
    if G is None:
        raise ValueError("likelihood carries no Lipschitz constant")
    x, _ = _probe_pairs(lik.dim, rng, probes, scale)
    return bool(np.all(np.linalg.norm(lik.grad(x), axis=-1) <= G * (1 + 1e-12)))


def probe_smoothness(lik: LikelihoodSpec, rng=None, pairs: int = 1000, scale: float = 3.0) -> bool:
    L = lik.regularity.L
    if L is None:
        raise ValueError("likelihood carries no smoothness constant")
    x, y = _probe_pairs(lik.dim, rng, pairs, scale)
    lhs = np.linalg.norm(lik.grad(x) - lik.grad(y), axis=-1)
    rhs = L * np.linalg.norm(x - y, axis=-1)
    return bool(np.all(lhs <= rhs * (1 + 1e-10) + 1e-12))
