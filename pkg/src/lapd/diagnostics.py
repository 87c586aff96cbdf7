"""Weighted trajectory estimators and the convergence bounds they are checked against."""

from __future__ import annotations

import math
from typing import Callable, Optional, Union

import numpy as np

from .sampler import Trajectory, minibatch_gradient

__all__ = [
    "weighted_estimate",
    "weighted_chain_estimates",
    "pooled_weighted_samples",
    "theorem_bound",
    "theorem_horizon",
    "iterations_to_epsilon",
    "grad_sq_bound",
    "sg_grad_sq_bound",
    "minibatch_variance",
    "NEVER",
    "SGLD_CONSTANT",
]

NEVER = math.inf
# order-level constant for the minibatch bound, a convention rather than a derived value
SGLD_CONSTANT = 64.0


def _normalize(weights, T):
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != T:
        raise ValueError(f"{w.shape[0]} weights for a trajectory of length {T}")
    if np.any(w < 0) or not np.sum(w) > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return w / np.sum(w)


def weighted_estimate(traj: Trajectory, weights, statistic: Union[str, Callable] = "mean"):
    """``sum_t weight_t * mean over chains of statistic(w~_t)``.

    ``statistic`` is ``"mean"``, ``"second_moment"`` (coordinate-wise) or a
    callable mapping an array ``(chains, d)`` to ``(chains, ...)``; callables
    need stored samples.
    """
    w = _normalize(weights, traj.T)
    if statistic == "mean":
        return w @ traj.mean
    if statistic == "second_moment":
        return w @ traj.second_moment
    if not callable(statistic):
        raise ValueError(f"unknown statistic {statistic!r}")
    if traj.samples is None:
        raise ValueError("a custom statistic needs stored samples")
    vals = np.stack([np.mean(np.asarray(statistic(traj.samples[t]), dtype=float), axis=0) for t in range(traj.T)])
    return np.tensordot(w, vals, axes=1)


def weighted_chain_estimates(traj: Trajectory, weights=None) -> np.ndarray:
    """Per-chain weighted averages ``sum_t weight_t w~_t``, shape ``(chains, d)``.

    Without ``weights`` the accumulator recorded during the run is returned.
    """
    if weights is None:
        if traj.weighted is None:
            raise ValueError("no weighted accumulator was recorded; pass weights")
        return traj.weighted
    if traj.samples is None:
        raise ValueError("per-chain estimates with new weights need stored samples")
    w = _normalize(weights, traj.T)
    return np.tensordot(w, traj.samples, axes=1)


def pooled_weighted_samples(traj: Trajectory, weights, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` states ``w~_t`` of random chains with ``t ~ weights``.

    The result is a sample from the weighted-average law of the run; shape
    ``(size, d)``. ``weights`` may be shorter than the trajectory, in which
    case only its first ``len(weights)`` iterations are used.
    """
    if traj.samples is None:
        raise ValueError("pooling needs stored samples; this trajectory only kept streaming moments")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] > traj.T:
        raise ValueError("more weights than recorded iterations")
    w = _normalize(w, w.shape[0])
    t_idx = rng.choice(w.shape[0], size=size, p=w)
    c_idx = rng.integers(0, traj.chains, size=size)
    return traj.samples[t_idx, c_idx]


def theorem_bound(case: str, T: int, **c) -> float:
    """Right-hand side of the weighted-KL guarantee after ``T`` iterations.

    ``lipschitz``: ``5 G^2 / (beta m T)`` with constants ``G, beta, m``.
    ``smooth``: ``(64 L^2 / (m^2 T (T+1)) + 16 / (T+1)) K`` where
    ``K = 8 trace(H^2) / m^2 + 2 U(0)``; constants ``trace_H2, U0, L, m``.
    ``sgld-smooth``: ``C max(L_ell trace(H) / m^2, U(0), (n/S) b^2 / m) / T``
    with ``C = SGLD_CONSTANT`` unless ``constant`` is given; only meaningful
    up to that constant.
    """
    need = {
        "lipschitz": ("G", "beta", "m"),
        "smooth": ("trace_H2", "U0", "L", "m"),
        "sgld-smooth": ("L_ell", "trace_H", "U0", "n", "batch_size", "b2", "m"),
    }
    if case not in need:
        raise ValueError(f"unknown case {case!r}; expected one of {sorted(need)}")
    missing = [k for k in need[case] if c.get(k) is None]
    if missing:
        raise ValueError(f"missing constants for {case}: {missing}")
    if T < 1:
        raise ValueError("T must be >= 1")
    m = c["m"]
    if case == "lipschitz":
        return 5.0 * c["G"] ** 2 / (c["beta"] * m * T)
    if case == "smooth":
        K = 8.0 * c["trace_H2"] / m**2 + 2.0 * c["U0"]
        return (64.0 * c["L"] ** 2 / (m**2 * T * (T + 1)) + 16.0 / (T + 1)) * K
    C = c.get("constant", SGLD_CONSTANT)
    terms = (c["L_ell"] * c["trace_H"] / m**2, c["U0"], c["n"] / c["batch_size"] * c["b2"] / m)
    return C * max(terms) / T


def theorem_horizon(case: str, epsilon: float, **c) -> float:
    """Iterations the guarantee needs to reach weighted KL ``<= epsilon``.

    ``lipschitz``: ``5 G^2 / (beta m eps)``; ``smooth``:
    ``64 max(8 trace(H^2) / (m^2 eps), 2 U(0) / eps)``; ``sgld-smooth``: the
    order-level three-term maximum times ``SGLD_CONSTANT``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m = c.get("m")
    if case == "lipschitz":
        return 5.0 * c["G"] ** 2 / (c["beta"] * m * epsilon)
    if case == "smooth":
        return 64.0 * max(8.0 * c["trace_H2"] / (m**2 * epsilon), 2.0 * c["U0"] / epsilon)
    if case == "sgld-smooth":
        return theorem_bound(case, 1, **c) / epsilon
    raise ValueError(f"unknown case {case!r}")


def iterations_to_epsilon(series, epsilon: float):
    """Smallest horizon ``T`` (1-based) with ``series[T-1] <= epsilon``; ``NEVER`` otherwise."""
    s = np.asarray(series, dtype=float).reshape(-1)
    if s.size == 0:
        raise ValueError("empty series")
    hit = np.flatnonzero(s <= epsilon)
    return int(hit[0]) + 1 if hit.size else NEVER


def grad_sq_bound(trace_H2: float, m: float, beta: float, w_star) -> float:
    """``16 (beta/m) trace(H^2) + 2 m^2 ||w*||^2``, an upper bound on ``E_{p*} ||grad f||^2``."""
    w_star = np.asarray(w_star, dtype=float)
    return 16.0 * beta / m * trace_H2 + 2.0 * m**2 * float(w_star @ w_star)


def sg_grad_sq_bound(L_ell: float, trace_H: float, m: float, beta: float, w_star, b2: float, batch_size: int) -> float:
    """``(2 beta L_ell / m) trace(H) + 4 m^2 ||w*||^2 + 4 b^2 / |S|``."""
    w_star = np.asarray(w_star, dtype=float)
    return 2.0 * beta * L_ell / m * trace_H + 4.0 * m**2 * float(w_star @ w_star) + 4.0 * b2 / batch_size


def minibatch_variance(lik, w, batch_size: int, draws: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo ``E ||g_S(w) - grad f(w)||^2`` and its standard error."""
    w = np.asarray(w, dtype=float)
    W = np.broadcast_to(w, (draws, w.shape[-1]))
    g = minibatch_gradient(lik, W, batch_size, rng)
    dev = np.sum((g - lik.grad(w)) ** 2, axis=-1)
    return float(dev.mean()), float(dev.std(ddof=1) / math.sqrt(draws))
