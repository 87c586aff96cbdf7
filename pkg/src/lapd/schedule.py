"""Decreasing step sizes and the trajectory weights that go with them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = ["StepSchedule", "eta_from_eta_tilde", "eta_tilde_from_eta", "trajectory_weights"]


def eta_from_eta_tilde(eta_tilde, m: float):
    """Diffusion time ``eta`` with ``(1 - e^{-m eta}) / m = eta_tilde``."""
    x = m * np.asarray(eta_tilde, dtype=float)
    if np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("need 0 < m * eta_tilde < 1; m * eta_tilde >= 1 would need infinite diffusion time")
    out = -np.log1p(-x) / m
    return float(out) if out.ndim == 0 else out


def eta_tilde_from_eta(eta, m: float):
    out = -np.expm1(-m * np.asarray(eta, dtype=float)) / m
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StepSchedule:
    """``eta_tilde_t = tau / (tau / eta_tilde_0 + m t)`` for ``t >= 1``.

    ``mode='lipschitz'`` is normally paired with ``eta_tilde_0 = 1/m`` and
    ``mode='smooth'`` with ``eta_tilde_0 = min(1/(4L), 1/m)``, which keeps
    every step below ``1/(4L)`` and every ``m eta_tilde_t`` below 1.
    """

    m: float
    tau: float = 2.0
    eta_tilde_0: Optional[float] = None
    mode: str = "lipschitz"
    L: Optional[float] = None

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("m must be positive")
        if not self.tau >= 1:
            raise ValueError("tau must be >= 1")
        if self.mode not in ("lipschitz", "smooth"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "smooth" and not (self.L is not None and self.L > 0):
            raise ValueError("smooth mode needs a positive smoothness constant L")
        if self.eta_tilde_0 is None:
            e0 = 1.0 / self.m if self.mode == "lipschitz" else min(1.0 / (4.0 * self.L), 1.0 / self.m)
            object.__setattr__(self, "eta_tilde_0", e0)
        if not self.eta_tilde_0 > 0:
            raise ValueError("eta_tilde_0 must be positive")
        if self.mode == "smooth" and self.eta_tilde_0 > 1.0 / (4.0 * self.L) * (1 + 1e-15):
            raise ValueError("smooth mode requires eta_tilde_0 <= 1/(4L)")
        if not self.m * self.tau / (self.tau / self.eta_tilde_0 + self.m) < 1:
            raise ValueError("schedule gives m * eta_tilde_1 >= 1 (infinite diffusion time)")

    @classmethod
    def lipschitz(cls, m: float, tau: float = 2.0) -> "StepSchedule":
        return cls(m=m, tau=tau, eta_tilde_0=1.0 / m, mode="lipschitz")

    @classmethod
    def smooth(cls, m: float, L: float, tau: float = 2.0) -> "StepSchedule":
        return cls(m=m, tau=tau, mode="smooth", L=L)

    def eta_tilde(self, t):
        """Step size at iteration ``t >= 1`` (scalar or array)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 1):
            raise ValueError("iterations are indexed from t = 1")
        out = self.tau / (self.tau / self.eta_tilde_0 + self.m * t)
        return float(out) if out.ndim == 0 else out

    def eta(self, t):
        """Diffusion time matching :meth:`eta_tilde`."""
        return eta_from_eta_tilde(self.eta_tilde(t), self.m)

    def steps(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        """``(eta_tilde_t, eta_t)`` for ``t = 1..T``."""
        et = self.eta_tilde(np.arange(1, T + 1))
        return et, eta_from_eta_tilde(et, self.m)

    def raw_weights(self, T: int) -> np.ndarray:
        """Unnormalized weights ``eta_tilde_t^{1 - tau}``, rescaled for tau = 2
        to ``1/(m eta_tilde_0) + t/2``."""
        if T < 1:
            raise ValueError("horizon T must be >= 1")
        t = np.arange(1, T + 1, dtype=float)
        if self.tau == 2:
            return 1.0 / (self.m * self.eta_tilde_0) + 0.5 * t
        return self.eta_tilde(t) ** (1.0 - self.tau)

    def weights(self, T: int) -> np.ndarray:
        """Normalized trajectory weights for horizon ``T``."""
        raw = self.raw_weights(T)
        if self.tau == 2:
            c = 1.0 / (self.m * self.eta_tilde_0)
            return raw / (T * c + 0.25 * T * (T + 1))
        return raw / math.fsum(raw)


def trajectory_weights(schedule: StepSchedule, T: int) -> np.ndarray:
    return schedule.weights(T)

