"""Least-squares fit of a shared-mean two-Beta mixture to a marginal histogram."""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import betainc
from scipy.stats import qmc

from .core import DomainError, MixtureFit, beta_cell_mass, beta_logpdf, BetaSpec

# (weight_S, mean, mu_S, mu_R[, mean_R]) search box
BOX_LO = np.array([0.0, 0.01, 0.01, 0.01, 0.01])
BOX_HI = np.array([1.0, 0.99, 2.0, 2.0, 0.99])


class FitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MarginalHistogram:
    """Per-bin density on a uniform partition of [0, 1]."""

    centers: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if c.ndim != 1 or c.shape != d.shape or c.size < 2:
            raise DomainError("centers and density must be 1-D arrays of equal length >= 2")
        n = c.size
        if not np.allclose(c, (np.arange(n) + 0.5) / n, atol=1e-9):
            raise DomainError("bin centers must be those of a uniform partition of [0,1]")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError("density must be finite and nonnegative")
        if abs(d.sum() / n - 1.0) > 1e-8:
            raise DomainError(f"density integrates to {d.sum() / n!r}, expected 1")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "density", d)

    @property
    def n(self) -> int:
        return self.centers.size

    @property
    def dw(self) -> float:
        return 1.0 / self.n

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 1)

    @classmethod
    def from_density(cls, density) -> "MarginalHistogram":
        d = np.asarray(density, dtype=float)
        n = d.size
        return cls((np.arange(n) + 0.5) / n, d)

    @classmethod
    def from_field(cls, field, axis: str = "neg") -> "MarginalHistogram":
        from .fokker_planck import field_marginals

        m = field_marginals(field)
        arr = m.h_total if axis == "neg" else m.g_total
        return cls.from_density(arr / (arr.sum() / arr.size))

    @classmethod
    def from_mixture(cls, fit: MixtureFit, n: int = 20, model: str = "cell") -> "MarginalHistogram":
        return cls.from_density(mixture_bins(_as_vector(fit), n, model))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "density"])
            for c, d in zip(self.centers, self.density):
                w.writerow([repr(float(c)), repr(float(d))])

    @classmethod
    def from_csv(cls, path) -> "MarginalHistogram":
        centers, dens = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"bin_center", "density"} - set(reader.fieldnames or ())
            if missing:
                raise DomainError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                centers.append(float(row["bin_center"]))
                dens.append(float(row["density"]))
        return cls(np.array(centers), np.array(dens))


def _as_vector(candidate) -> np.ndarray:
    if isinstance(candidate, MixtureFit):
        v = list(candidate.params())
        if candidate.mean_R is not None:
            v.append(candidate.mean_R)
        return np.array(v, dtype=float)
    return np.asarray(candidate, dtype=float)


def _in_box(x: np.ndarray) -> bool:
    w, m, ms, mr = x[:4]
    ok = 0.0 <= w <= 1.0 and 0.0 < m < 1.0 and ms > 0 and mr > 0
    if x.size == 5:
        ok = ok and 0.0 < x[4] < 1.0
    return bool(ok and np.all(np.isfinite(x)))


@functools.lru_cache(maxsize=32)
def _edges(n: int) -> np.ndarray:
    e = np.linspace(0.0, 1.0, n + 1)
    e.setflags(write=False)
    return e


def component_bins(m, mu, n: int, model: str = "cell") -> np.ndarray:
    """Beta(m/mu, (1-m)/mu) per bin; broadcasts over ``m`` and ``mu``."""
    m = np.asarray(m, dtype=float)
    mu = np.asarray(mu, dtype=float)
    a, b = m / mu, (1.0 - m) / mu
    if model == "cell":
        if a.ndim == 0 and b.ndim == 0:
            # absolute accuracy is enough for least squares; skip the tail-safe path
            return np.diff(betainc(a, b, _edges(n))) * n
        return beta_cell_mass(a, b, _edges(n)) * n
    if model == "point":
        c = (np.arange(n) + 0.5) / n
        a, b = np.broadcast_arrays(a, b)
        out = np.empty(a.shape + (n,))
        for idx in np.ndindex(a.shape):
            out[idx] = np.exp(beta_logpdf(BetaSpec(float(a[idx]), float(b[idx])), c))
        return out
    raise ValueError(f"unknown model {model!r}")


def mixture_bins(x, n: int, model: str = "cell") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mean_r = x[4] if x.size == 5 else x[1]
    return x[0] * component_bins(x[1], x[2], n, model) + (1.0 - x[0]) * component_bins(mean_r, x[3], n, model)


def objective(candidate, hist: MarginalHistogram, model: str = "cell") -> float:
    """Discrete L2 distance ``sqrt(sum (model - data)^2 dw)`` over the bins.

    ``model="cell"`` compares bin-averaged mixture density with the data,
    ``model="point"`` the density at bin centers.  Candidates outside the
    parameter domain score ``inf``.
    """
    x = _as_vector(candidate)
    if x.size not in (4, 5) or not _in_box(x):
        return math.inf
    diff = mixture_bins(x, hist.n, model) - hist.density
    val = math.sqrt(float(diff @ diff) * hist.dw)
    return val if math.isfinite(val) else math.inf


def _reflect(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def _to_fit(x: np.ndarray, residual: float) -> MixtureFit:
    return MixtureFit(float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(residual),
                      float(x[4]) if x.size == 5 else None)


def fit_mixture(hist: MarginalHistogram, starts: int = 8, seed: int = 0, relaxed: bool = False,
                model: str = "cell", maxfev: int = 4000) -> MixtureFit:
    """Multi-start Nelder-Mead over the parameter box.

    Starting points are a Latin hypercube over the box; the simplex runs on
    an unconstrained variable mapped back into the box by reflection.
    """
    if starts < 1:
        raise DomainError("starts must be >= 1")
    d = 5 if relaxed else 4
    lo, hi = BOX_LO[:d], BOX_HI[:d]
    sampler = qmc.LatinHypercube(d=d, seed=np.random.default_rng(seed))
    initial = qmc.scale(sampler.random(starts), lo, hi)

    def f(z):
        return objective(_reflect(z, lo, hi), hist, model)

    results = []
    for x0 in initial:
        f0 = f(x0)
        best = (f0, tuple(x0))
        if math.isfinite(f0):
            # restart until the simplex stops improving
            z = x0
            for _ in range(4):
                res = minimize(f, z, method="Nelder-Mead",
                               options={"xatol": 1e-10, "fatol": 1e-15, "maxfev": maxfev,
                                        "adaptive": True})
                x = _reflect(res.x, lo, hi)
                if res.fun < best[0]:
                    improved = best[0] - res.fun
                    best = (float(res.fun), tuple(x))
                    z = x
                    if improved < 1e-15:
                        break
                else:
                    break
        results.append(best)
    finite = [r for r in results if math.isfinite(r[0])]
    if not finite:
        raise FitError("every start produced a non-finite residual")
    resid, x = min(finite)
    return _to_fit(np.array(x), resid)


def _anchored_axis(lo: float, mid: float, hi: float, k: int) -> np.ndarray:
    """``k`` nodes on [lo, hi], uniform on each side of ``mid``, which is a node."""
    left = (k + 1) // 2
    return np.concatenate([np.linspace(lo, mid, left), np.linspace(mid, hi, k - left + 1)[1:]])


def brute_force_fit(hist: MarginalHistogram, grid_points_per_axis: int = 15,
                    model: str = "cell") -> MixtureFit:
    """Exhaustive search over a regular grid on the 4-D parameter box."""
    k = int(grid_points_per_axis)
    if not 5 <= k <= 30:
        raise DomainError("grid_points_per_axis must lie in [5, 30]")
    weights = np.linspace(BOX_LO[0], BOX_HI[0], k)
    # pin mean 1/2 and spread 1/2 (Beta(1,1)) so the flat density is a grid point
    means = _anchored_axis(BOX_LO[1], 0.5, BOX_HI[1], k)
    mus = _anchored_axis(BOX_LO[2], 0.5, BOX_HI[2], k)
    table = component_bins(means[:, None], mus[None, :], hist.n, model)  # (k, k, n)
    dw = hist.dw
    best = (math.inf, None)
    for iw, w in enumerate(weights):
        # (mean, mu_S, mu_R, bins)
        mix = w * table[:, :, None, :] + (1.0 - w) * table[:, None, :, :]
        err = np.sqrt(((mix - hist.density) ** 2).sum(axis=-1) * dw)
        idx = np.unravel_index(np.argmin(err), err.shape)
        val = float(err[idx])
        if val < best[0]:
            best = (val, (w, means[idx[0]], mus[idx[1]], mus[idx[2]]))
    return _to_fit(np.array(best[1]), best[0])


def param_distance(a: MixtureFit, b: MixtureFit) -> float:
    """Max-abs parameter difference, minimized over component relabeling."""
    pa = np.array(a.params())
    return float(min(np.abs(pa - np.array(b.params())).max(),
                     np.abs(pa - np.array(b.relabeled().params())).max()))


def write_fit_table(fit: MixtureFit, hist: MarginalHistogram, path, model: str = "cell") -> None:
    """Model-vs-data CSV, one row per bin."""
    model_vals = mixture_bins(_as_vector(fit), hist.n, model)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "data", "model", "model_S", "model_R"])
        comp_s = component_bins(fit.mean, fit.mu_S, hist.n, model)
        comp_r = component_bins(fit.mean if fit.mean_R is None else fit.mean_R, fit.mu_R, hist.n, model)
        for i, c in enumerate(hist.centers):
            w.writerow([repr(float(c)), repr(float(hist.density[i])), repr(float(model_vals[i])),
                        repr(float(fit.weight_S * comp_s[i])),
                        repr(float((1 - fit.weight_S) * comp_r[i]))])


__all__ = ["MarginalHistogram", "objective", "fit_mixture", "brute_force_fit", "param_distance",
           "mixture_bins", "component_bins", "write_fit_table", "FitError"]
