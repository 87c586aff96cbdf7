"""Synthetic ridge-regression data and CSV ingestion."""

from __future__ import annotations

import numpy as np

__all__ = ["synthetic_ridge_data", "load_csv_dataset"]


def synthetic_ridge_data(
    d: int,
    n: int,
    R_z: float,
    rng: np.random.Generator,
    noise: float = 0.5,
    family: str = "half_squared",
    targets: str = "linear",
):
    """Isotropic Gaussian features rescaled to ``||z_i||^2 = R_z`` exactly.

    Returns ``(Z, y)`` with ``Z`` of shape ``(d, n)``. With
    ``targets="linear"`` the scores are ``w^T z_i + noise * eps_i`` for
    ``w ~ N(0, I)``, so ``w^T z_i`` has variance ``R_z`` whatever ``d`` is.
    With ``targets="noise"`` the scores are independent of the features and
    rescaled to unit mean square, so ``f(0) = 1/2`` for every ``d``. For the
    logistic family the targets are the score signs.
    """
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    if targets not in ("linear", "noise"):
        raise ValueError(f"unknown target model {targets!r}")
    Z = rng.standard_normal((d, n))
    Z *= np.sqrt(R_z) / np.linalg.norm(Z, axis=0)
    if targets == "linear":
        score = rng.standard_normal(d) @ Z + noise * rng.standard_normal(n)
    else:
        score = rng.standard_normal(n)
        score /= np.sqrt(np.mean(score * score))
    y = np.where(score >= 0, 1.0, -1.0) if family == "logistic" else score
    return Z, y


def load_csv_dataset(path, has_target: bool = True):
    """Read one datum per row; the last column is the target when ``has_target``."""
    arr = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    if arr.size == 0:
        raise ValueError(f"{path} holds no data")
    if has_target:
        if arr.shape[1] < 2:
            raise ValueError("need at least one feature column plus the target")
        return arr[:, :-1].T.copy(), arr[:, -1].copy()
    return arr.T.copy(), None
