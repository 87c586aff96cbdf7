"""Langevin algorithm with prior diffusion, full-gradient and minibatch.

Every iteration first diffuses under the prior for time ``eta_t`` and then
takes a gradient step of size ``eta_tilde_t`` on ``f``. The recorded iterate
is the post-diffusion point ``w~_t``; that is the law the convergence
guarantees are about.

Chains are vectorized: state arrays have shape ``(chains, d)``. Large
ensembles are split into fixed-size blocks, each seeded from
``SeedSequence(seed, spawn_key=(block,))``, so results do not depend on how
many worker threads execute the blocks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import LikelihoodSpec, PriorSpec
from .prior_diffusion import DEFAULT_SUBSTEP_CAP, diffuse
from .schedule import StepSchedule

__all__ = [
    "Recorder",
    "Trajectory",
    "init_from_prior",
    "run_lapd",
    "run_sgld",
    "run_ensemble",
    "minibatch_gradient",
    "chain_rng",
    "FULL_STORAGE_LIMIT",
]

# store every sample while chains * d * T stays below this many entries
FULL_STORAGE_LIMIT = 10**7
DEFAULT_BLOCK = 4096


def chain_rng(seed: int, block: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


@dataclass(frozen=True)
class Recorder:
    """What to keep from a run.

    store : ``"auto"``, ``"full"`` or ``"moments"``. ``auto`` keeps every
        sample when ``chains * d * T <= FULL_STORAGE_LIMIT``.
    keep_times : iterations at which all chain states are kept even in
        ``moments`` mode.
    weights : length-``T`` weights; when given, each chain's weighted
        average ``sum_t weights[t] w~_t`` is accumulated.
    """

    store: str = "auto"
    keep_times: tuple = ()
    weights: Optional[np.ndarray] = None

    def resolve(self, chains: int, dim: int, T: int) -> "Recorder":
        if self.store not in ("auto", "full", "moments"):
            raise ValueError(f"unknown storage policy {self.store!r}")
        if self.weights is not None and len(self.weights) != T:
            raise ValueError("recorder weights must have length T")
        if self.store != "auto":
            return self
        store = "full" if chains * dim * T <= FULL_STORAGE_LIMIT else "moments"
        return Recorder(store=store, keep_times=tuple(self.keep_times), weights=self.weights)


@dataclass
class Trajectory:
    """Recorded post-diffusion iterates of one or many chains.

    ``samples`` has shape ``(T, chains, d)`` when stored. ``sums`` and
    ``sq_sums`` (shape ``(T, d)``) hold per-iteration sums over chains of
    ``w~_t`` and ``w~_t**2`` and are always present.
    """

    eta: np.ndarray
    eta_tilde: np.ndarray
    beta: float
    chains: int
    sums: np.ndarray
    sq_sums: np.ndarray
    final: np.ndarray
    samples: Optional[np.ndarray] = None
    kept: dict = field(default_factory=dict)
    weighted: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.eta)

    @property
    def T(self) -> int:
        return len(self.eta)

    @property
    def dim(self) -> int:
        return self.sums.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """Ensemble mean of ``w~_t`` for every ``t``, shape ``(T, d)``."""
        return self.sums / self.chains

    @property
    def second_moment(self) -> np.ndarray:
        return self.sq_sums / self.chains

    def at(self, t: int) -> np.ndarray:
        """All chain states ``w~_t`` (1-based ``t``), shape ``(chains, d)``."""
        if self.samples is not None:
            return self.samples[t - 1]
        if t in self.kept:
            return self.kept[t]
        if t == self.T:
            return self.final
        raise KeyError(f"iteration {t} was not kept; pass it in Recorder.keep_times")

    @classmethod
    def merge(cls, parts: list["Trajectory"]) -> "Trajectory":
        """Concatenate chain blocks; sums are added in block order."""
        first = parts[0]
        for p in parts[1:]:
            if p.T != first.T or not np.array_equal(p.eta, first.eta):
                raise ValueError("cannot merge trajectories with different schedules")
        sums = first.sums.copy()
        sq = first.sq_sums.copy()
        for p in parts[1:]:
            sums += p.sums
            sq += p.sq_sums
        samples = None
        if all(p.samples is not None for p in parts):
            samples = np.concatenate([p.samples for p in parts], axis=1)
        weighted = None
        if all(p.weighted is not None for p in parts):
            weighted = np.concatenate([p.weighted for p in parts], axis=0)
        kept = {t: np.concatenate([p.kept[t] for p in parts], axis=0) for t in first.kept}
        return cls(
            eta=first.eta,
            eta_tilde=first.eta_tilde,
            beta=first.beta,
            chains=sum(p.chains for p in parts),
            sums=sums,
            sq_sums=sq,
            final=np.concatenate([p.final for p in parts], axis=0),
            samples=samples,
            kept=kept,
            weighted=weighted,
        )


def init_from_prior(prior: PriorSpec, beta: float, rng: np.random.Generator, dim: int, chains: Optional[int] = None):
    """Draw ``w_0 ~ N(0, beta/m I)``; only Gaussian priors are supported."""
    if not prior.is_gaussian:
        raise NotImplementedError("exact initialization from a non-Gaussian separable prior is not supported")
    if not beta > 0:
        raise ValueError("beta must be positive")
    shape = (dim,) if chains is None else (chains, dim)
    return math.sqrt(beta / prior.m) * rng.standard_normal(shape)


def minibatch_gradient(lik: LikelihoodSpec, w, batch_size: int, rng: np.random.Generator):
    """Average of ``batch_size`` per-datum gradients drawn i.i.d. with replacement."""
    if not lik.has_data:
        raise ValueError("minibatch gradients need a likelihood with a dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    w = np.asarray(w, dtype=float)
    idx = rng.integers(0, lik.n, size=w.shape[:-1] + (batch_size,))
    return lik.minibatch_grad(w, idx)


def _run(lik, prior, schedule, T, beta, rng, recorder, chains, w0, grad_fn, substep_cap):
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not math.isclose(schedule.m, prior.m, rel_tol=1e-12):
        raise ValueError(f"schedule m={schedule.m} does not match prior m={prior.m}")
    d = lik.dim
    rec = (recorder or Recorder()).resolve(chains, d, T)
    eta_tilde, eta = schedule.steps(T)
    if np.any(prior.m * eta_tilde >= 1):
        raise ValueError("schedule produces m * eta_tilde >= 1")

    noise_rng, batch_rng = rng.spawn(2)
    if w0 is None:
        w = init_from_prior(prior, beta, noise_rng, d, chains)
    else:
        w = np.array(np.broadcast_to(np.asarray(w0, dtype=float), (chains, d)))

    sums = np.empty((T, d))
    sq = np.empty((T, d))
    samples = np.empty((T, chains, d)) if rec.store == "full" else None
    keep = set(int(t) for t in rec.keep_times)
    kept = {}
    weighted = np.zeros((chains, d)) if rec.weights is not None else None

    wt = w
    for t in range(1, T + 1):
        wt = diffuse(w, prior, beta, eta[t - 1], noise_rng, substep_cap)
        if not np.all(np.isfinite(wt)):
            raise FloatingPointError(f"non-finite iterate at t={t}")
        sums[t - 1] = wt.sum(axis=0)
        sq[t - 1] = np.sum(wt * wt, axis=0)
        if samples is not None:
            samples[t - 1] = wt
        if t in keep:
            kept[t] = wt.copy()
        if weighted is not None:
            weighted += rec.weights[t - 1] * wt
        g = grad_fn(wt, batch_rng)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at t={t}")
        w = wt - eta_tilde[t - 1] * g

    return Trajectory(
        eta=eta,
        eta_tilde=eta_tilde,
        beta=beta,
        chains=chains,
        sums=sums,
        sq_sums=sq,
        final=wt.copy(),
        samples=samples,
        kept=kept,
        weighted=weighted,
    )


def run_lapd(
    lik: LikelihoodSpec,
    prior: PriorSpec,
    schedule: StepSchedule,
    T: int,
    beta: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    recorder: Optional[Recorder] = None,
    chains: int = 1,
    w0=None,
    substep_cap: float = DEFAULT_SUBSTEP_CAP,
) -> Trajectory:
    """Full-gradient Langevin algorithm with prior diffusion.

    For ``t = 1..T``: ``w~_t`` is the prior diffusion of ``w_{t-1}`` over
    ``eta_t``, then ``w_t = w~_t - eta_tilde_t grad f(w~_t)``. The chains
    start from the prior unless ``w0`` is given.
    """
    rng = np.random.default_rng() if rng is None else rng
    return _run(lik, prior, schedule, T, beta, rng, recorder, chains, w0, lambda w, _: lik.grad(w), substep_cap)


def run_sgld(
    lik: LikelihoodSpec,
    prior: PriorSpec,
    schedule: StepSchedule,
    T: int,
    beta: Optional[float] = None,
    batch_size: int = 1,
    rng: Optional[np.random.Generator] = None,
    recorder: Optional[Recorder] = None,
    chains: int = 1,
    w0=None,
    substep_cap: float = DEFAULT_SUBSTEP_CAP,
) -> Trajectory:
    """Minibatch variant of :func:`run_lapd`.

    The gradient step averages ``batch_size`` per-datum gradients drawn
    i.i.d. with replacement from the dataset; ``batch_size=1`` is streaming
    SGLD. ``beta`` defaults to ``1/n``. Minibatch indices come from a stream
    separate from the diffusion noise, so a run whose minibatch gradient
    equals the full gradient reproduces :func:`run_lapd` with the same seed.
    """
    if not lik.has_data:
        raise ValueError("SGLD needs a likelihood with a non-empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    beta = 1.0 / lik.n if beta is None else beta
    rng = np.random.default_rng() if rng is None else rng
    return _run(
        lik, prior, schedule, T, beta, rng, recorder, chains, w0,
        lambda w, r: minibatch_gradient(lik, w, batch_size, r), substep_cap,
    )


def _threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get("SAMPLER_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def run_ensemble(
    runner,
    seed: int,
    chains: int,
    *,
    recorder: Optional[Recorder] = None,
    block_size: int = DEFAULT_BLOCK,
    threads: Optional[int] = None,
    **kwargs,
) -> Trajectory:
    """Run ``chains`` independent chains in seeded blocks and merge them.

    ``runner`` is :func:`run_lapd` or :func:`run_sgld`; ``kwargs`` are passed
    through. The storage policy is resolved for the whole ensemble before
    splitting. Worker count defaults to ``SAMPLER_THREADS`` or the CPU count.
    """
    if chains < 1:
        raise ValueError("need at least one chain")
    rec = (recorder or Recorder()).resolve(chains, kwargs["lik"].dim, kwargs["T"])
    sizes = [min(block_size, chains - start) for start in range(0, chains, block_size)]

    def one(block):
        return runner(rng=chain_rng(seed, block), recorder=rec, chains=sizes[block], **kwargs)

    n_workers = min(_threads(threads), len(sizes))
    if n_workers == 1:
        parts = [one(b) for b in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    return parts[0] if len(parts) == 1 else Trajectory.merge(parts)
