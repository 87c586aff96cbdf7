"""Prior diffusion: the SDE ``dw = -grad g(w) ds + sqrt(2 beta) dB_s`` over a
duration ``eta``.

Gaussian priors are stepped exactly (Ornstein-Uhlenbeck transition).
Separable priors are integrated coordinate-wise by Euler-Maruyama.
"""

from __future__ import annotations

import math

import numpy as np

from .model import PriorSpec

__all__ = ["ou_exact_step", "ou_transition", "separable_numeric_step", "diffuse", "DEFAULT_SUBSTEP_CAP"]

# substep h <= DEFAULT_SUBSTEP_CAP / m
DEFAULT_SUBSTEP_CAP = 1e-3


def _check(m, beta, eta):
    if not m > 0:
        raise ValueError(f"m must be positive, got {m}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not eta >= 0:
        raise ValueError(f"diffusion time must be >= 0, got {eta}")


def ou_transition(m: float, beta: float, eta: float) -> tuple[float, float]:
    """Contraction ``e^{-m eta}`` and added variance ``(1 - e^{-2 m eta}) beta / m``."""
    _check(m, beta, eta)
    if math.isinf(eta):
        return 0.0, beta / m
    return math.exp(-m * eta), -math.expm1(-2.0 * m * eta) * beta / m


def ou_exact_step(w, m: float, beta: float, eta: float, rng: np.random.Generator):
    """Draw from ``N(e^{-m eta} w, (1 - e^{-2 m eta}) beta / m I)``.

    ``eta = inf`` draws from the prior ``N(0, beta/m I)``.
    """
    w = np.asarray(w, dtype=float)
    scale, var = ou_transition(m, beta, eta)
    noise = rng.standard_normal(w.shape)
    return scale * w + math.sqrt(var) * noise


def separable_numeric_step(
    w,
    prior: PriorSpec,
    beta: float,
    eta: float,
    rng: np.random.Generator,
    substep_cap: float = DEFAULT_SUBSTEP_CAP,
):
    """Euler-Maruyama integration of the prior diffusion, one SDE per coordinate.

    Uses ``ceil(m eta / substep_cap)`` equal substeps, so every substep is at
    most ``substep_cap / m`` long. The L1 part of the drift uses the
    subgradient ``0`` at the kink.
    """
    _check(prior.m, beta, eta)
    if math.isinf(eta):
        raise NotImplementedError("no stationary sampler for non-Gaussian separable priors; eta must be finite")
    if not substep_cap > 0:
        raise ValueError("substep_cap must be positive")
    x = np.array(w, dtype=float)
    if eta == 0:
        return x
    steps = max(1, math.ceil(prior.m * eta / substep_cap - 1e-12))
    h = eta / steps
    sd = math.sqrt(2.0 * beta * h)
    for _ in range(steps):
        x += -h * prior.grad(x) + sd * rng.standard_normal(x.shape)
    return x


def diffuse(w, prior: PriorSpec, beta: float, eta: float, rng: np.random.Generator, substep_cap: float = DEFAULT_SUBSTEP_CAP):
    """Exact OU step for Gaussian priors, numeric integration otherwise."""
    if prior.is_gaussian:
        return ou_exact_step(w, prior.m, beta, eta, rng)
    return separable_numeric_step(w, prior, beta, eta, rng, substep_cap)
