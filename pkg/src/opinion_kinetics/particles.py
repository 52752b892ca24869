"""Euler-Maruyama agent simulation of the opinion SDEs.

Two interaction forms are provided: the full bounded-confidence pairwise
drift and the mean-field (McKean) drift toward the ensemble means.  Noise
draws for a step depend only on ``(seed, step)`` so both forms can be run
on identical increments.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import COMPARTMENTS, DomainError, KineticParams, OpinionGrid, OpinionPair

MODES = ("pairwise", "mckean")
DIFFUSIONS = ("beta_root", "abs_deviation")


class StabilityError(DomainError):
    """dt is too large for the explicit drift update."""


@dataclass(frozen=True, eq=False)
class Ensemble:
    """N agents: opinions ``w`` of shape (N, 2) (pos, neg) and static labels."""

    w: np.ndarray
    compartment: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 2 or w.shape[1] != 2:
            raise DomainError("opinions must have shape (N, 2)")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
            raise DomainError("every opinion must lie in [0,1]^2")
        lab = np.array(self.compartment, dtype="<U1")
        if lab.shape != (w.shape[0],):
            raise DomainError(f"{lab.size} labels for {w.shape[0]} agents")
        bad = set(np.unique(lab)) - set(COMPARTMENTS)
        if bad:
            raise DomainError(f"unknown compartment labels {sorted(bad)}")
        if not (self.time >= 0 and math.isfinite(self.time)):
            raise DomainError("time must be finite and nonnegative")
        w.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "compartment", lab)

    @classmethod
    def from_pairs(cls, pairs, compartment=None, time: float = 0.0) -> "Ensemble":
        w = np.array([[p.w_pos, p.w_neg] if isinstance(p, OpinionPair) else p for p in pairs],
                     dtype=float).reshape(-1, 2)
        lab = np.full(len(w), "S") if compartment is None else compartment
        return cls(w, lab, time)

    @classmethod
    def uniform(cls, n: int, seed: int = 0) -> "Ensemble":
        rng = np.random.default_rng(seed)
        return cls(rng.random((n, 2)), np.full(n, "S"))

    @classmethod
    def from_beta(cls, n: int, mean, spread, seed: int = 0) -> "Ensemble":
        """Independent Beta draws per axis, parameterized by mean and spread."""
        rng = np.random.default_rng(seed)
        m = np.broadcast_to(np.asarray(mean, dtype=float), (2,))
        mu = np.broadcast_to(np.asarray(spread, dtype=float), (2,))
        w = np.column_stack([rng.beta(m[k] / mu[k], (1 - m[k]) / mu[k], n) for k in range(2)])
        return cls(w, np.full(n, "S"))

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def agents(self) -> list[OpinionPair]:
        return [OpinionPair(float(a), float(b)) for a, b in self.w]

    def fractions(self) -> np.ndarray:
        return np.array([(self.compartment == c).mean() for c in COMPARTMENTS])


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.01
    steps: int = 100
    seed: int = 0
    mode: str = "mckean"
    diffusion: str = "beta_root"

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DomainError("dt must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError("steps must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if self.diffusion not in DIFFUSIONS:
            raise DomainError(f"diffusion must be one of {DIFFUSIONS}")

    def check(self, p: KineticParams) -> None:
        lam = max(max(p.lambda_pos), max(p.lambda_neg))
        if self.dt * lam >= 1.0:
            raise StabilityError(f"dt*max(lambda) = {self.dt * lam:.3g} must be < 1")


def reflect_unit(x: np.ndarray) -> np.ndarray:
    """Fold onto [0, 1] by repeated mirror reflection at 0 and 1."""
    y = np.mod(x, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def step_normals(seed: int, step: int, n: int) -> np.ndarray:
    """Standard normals of shape (n, 2) for one step; column k is axis k."""
    bits = np.random.Philox(np.random.SeedSequence([int(seed), int(step)]))
    return np.random.Generator(bits).standard_normal((n, 2))


def _layer_index(labels: np.ndarray) -> np.ndarray:
    idx = np.zeros(labels.shape, dtype=int)
    for k, c in enumerate(COMPARTMENTS):
        idx[labels == c] = k
    return idx


def _agent_rates(ens: Ensemble, p: KineticParams):
    idx = _layer_index(ens.compartment)
    lam = np.column_stack([np.asarray(p.lambda_pos)[idx], np.asarray(p.lambda_neg)[idx]])
    sig = np.column_stack([np.asarray(p.sigma_pos)[idx], np.asarray(p.sigma_neg)[idx]])
    return lam, sig


def confidence_drift(x: np.ndarray, delta: float) -> np.ndarray:
    """``(1/N) sum_j 1{|x_i - x_j| <= delta} (x_j - x_i)`` for every i.

    Uses sorted prefix sums, so it is exact but O(N log N).
    """
    n = x.size
    if delta >= 1.0:
        return x.mean() - x
    xs = np.sort(x)
    csum = np.concatenate([[0.0], np.cumsum(xs)])
    lo = np.searchsorted(xs, x - delta, side="left")
    hi = np.searchsorted(xs, x + delta, side="right")
    return ((csum[hi] - csum[lo]) - (hi - lo) * x) / n


def _diffusion(w: np.ndarray, means: np.ndarray, kind: str) -> np.ndarray:
    if kind == "beta_root":
        return np.sqrt(np.clip(w * (1.0 - w), 0.0, None))
    return np.abs(w - means)


def _em_update(ens, drift, p, cfg, step):
    lam, sig = _agent_rates(ens, p)
    means = ens.w.mean(axis=0)
    noise = sig * _diffusion(ens.w, means, cfg.diffusion) * math.sqrt(cfg.dt)
    if np.any(noise):
        noise = noise * step_normals(cfg.seed, step, ens.n)
    w = reflect_unit(ens.w + lam * drift * cfg.dt + noise)
    return Ensemble(w, ens.compartment, ens.time + cfg.dt)


def _step_index(ens: Ensemble, cfg: SimConfig) -> int:
    return int(round(ens.time / cfg.dt))


def step_pairwise(ens: Ensemble, p: KineticParams, cfg: SimConfig, step: int | None = None) -> Ensemble:
    """One Euler-Maruyama step with the bounded-confidence pairwise drift."""
    cfg.check(p)
    k = _step_index(ens, cfg) if step is None else step
    drift = np.column_stack([confidence_drift(ens.w[:, 0], p.confidence_pos),
                             confidence_drift(ens.w[:, 1], p.confidence_neg)])
    return _em_update(ens, drift, p, cfg, k)


def step_mckean(ens: Ensemble, p: KineticParams, cfg: SimConfig, step: int | None = None) -> Ensemble:
    """One Euler-Maruyama step with drift toward the current ensemble means."""
    cfg.check(p)
    if p.confidence_pos != 1.0 or p.confidence_neg != 1.0:
        raise DomainError("the mean-field step needs confidence levels equal to 1")
    k = _step_index(ens, cfg) if step is None else step
    return _em_update(ens, ens.w.mean(axis=0) - ens.w, p, cfg, k)


def simulate(ens: Ensemble, p: KineticParams, cfg: SimConfig, every: int = 1) -> list[Ensemble]:
    """Run ``cfg.steps`` steps; keep the initial state and every ``every``-th state."""
    cfg.check(p)
    step = step_pairwise if cfg.mode == "pairwise" else step_mckean
    out = [ens]
    for k in range(cfg.steps):
        ens = step(ens, p, cfg, step=k)
        if (k + 1) % every == 0 or k + 1 == cfg.steps:
            out.append(ens)
    return out


def ensemble_means(ens: Ensemble) -> tuple[float, float]:
    if ens.n == 0:
        raise DomainError("empty ensemble")
    m = ens.w.mean(axis=0)
    return float(m[0]), float(m[1])


def empirical_density(ens: Ensemble, grid: OpinionGrid):
    """Histogram density per compartment layer; all layers together integrate to 1."""
    from .fokker_planck import DensityField

    ip = np.minimum((ens.w[:, 0] * grid.n_pos).astype(int), grid.n_pos - 1)
    jn = np.minimum((ens.w[:, 1] * grid.n_neg).astype(int), grid.n_neg - 1)
    layer = _layer_index(ens.compartment)
    counts = np.zeros((4, grid.n_pos, grid.n_neg))
    np.add.at(counts, (layer, ip, jn), 1.0)
    return DensityField(grid, counts / (ens.n * grid.cell_area), ens.time)


def variance_trajectory(history) -> np.ndarray:
    """Per-snapshot variances ``(V+, V-)``, shape (len(history), 2)."""
    if len(history) < 2:
        raise DomainError("need at least two snapshots")
    # shift by the first agent so identical opinions give exactly zero
    return np.array([(e.w - e.w[:1]).var(axis=0) if e.n else np.zeros(2) for e in history])


def fit_decay_rate(times, values) -> float:
    """Rate ``r`` of a least-squares fit ``log v = c - r t``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = v > 0
    if keep.sum() < 2:
        raise DomainError("need two positive values to fit a decay rate")
    slope = np.polyfit(t[keep], np.log(v[keep]), 1)[0]
    return float(-slope)


def write_snapshots_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "agent_id", "w_pos", "w_neg", "compartment"])
        for ens in history:
            t = repr(float(ens.time))
            for i in range(ens.n):
                w.writerow([t, i, repr(float(ens.w[i, 0])), repr(float(ens.w[i, 1])), ens.compartment[i]])


def write_summary_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean_pos", "mean_neg", "var_pos", "var_neg"]
                   + [f"frac_{c}" for c in COMPARTMENTS])
        for ens in history:
            m = ens.w.mean(axis=0)
            v = ens.w.var(axis=0)
            w.writerow([repr(float(x)) for x in (ens.time, *m, *v, *ens.fractions())])


__all__ = ["Ensemble", "SimConfig", "StabilityError", "step_pairwise", "step_mckean", "simulate",
           "ensemble_means", "empirical_density", "variance_trajectory", "fit_decay_rate",
           "reflect_unit", "confidence_drift", "write_snapshots_csv", "write_summary_csv"]
