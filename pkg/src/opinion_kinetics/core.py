"""Shared domain types and closed-form Beta / Beta-mixture equilibria.

Opinions live in the unit square; each marginal equilibrium of the
mean-field dynamics with diffusion ``sqrt(w(1-w))`` is a Beta density
parameterized by its mean ``m`` and a spread ``mu`` so that
``a = m/mu`` and ``b = (1-m)/mu``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc, betaincc, betaln

COMPARTMENTS = ("S", "E", "I", "R")


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def _check_unit(name: str, value: float, closed: bool = True) -> None:
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not (ok and math.isfinite(value)):
        interval = "[0,1]" if closed else "(0,1)"
        raise DomainError(f"{name}={value!r} must lie in {interval}")


@dataclass(frozen=True)
class OpinionPair:
    w_pos: float
    w_neg: float

    def __post_init__(self):
        _check_unit("w_pos", self.w_pos)
        _check_unit("w_neg", self.w_neg)


@dataclass(frozen=True)
class OpinionGrid:
    """Uniform cell-centered grid on the unit square."""

    n_pos: int = 20
    n_neg: int = 20

    def __post_init__(self):
        for name in ("n_pos", "n_neg"):
            n = getattr(self, name)
            if int(n) != n or n < 1:
                raise DomainError(f"{name} must be a positive integer, got {n!r}")

    @property
    def dw_pos(self) -> float:
        return 1.0 / self.n_pos

    @property
    def dw_neg(self) -> float:
        return 1.0 / self.n_neg

    @property
    def cell_area(self) -> float:
        return self.dw_pos * self.dw_neg

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_pos, self.n_neg)

    @property
    def centers_pos(self) -> np.ndarray:
        return cell_centers(self.n_pos)

    @property
    def centers_neg(self) -> np.ndarray:
        return cell_centers(self.n_neg)

    @property
    def edges_pos(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_pos + 1)

    @property
    def edges_neg(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_neg + 1)


def cell_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


@dataclass(frozen=True)
class ContactKernel:
    """Contact function ``kappa(w) = beta * k_pos(w+) * k_neg(w-)``.

    ``k_pos``/``k_neg`` are tabulated on cell centers; ``None`` means the
    factor is identically one, so ``ContactKernel(beta)`` is the constant kernel.
    """

    beta: float
    k_pos: tuple[float, ...] | None = None
    k_neg: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise DomainError(f"beta={self.beta!r} must be nonnegative")
        for name in ("k_pos", "k_neg"):
            tab = getattr(self, name)
            if tab is not None:
                arr = np.asarray(tab, dtype=float)
                if arr.ndim != 1 or np.any(arr < 0) or not np.all(np.isfinite(arr)):
                    raise DomainError(f"{name} must be a finite nonnegative 1-D table")
                object.__setattr__(self, name, tuple(float(x) for x in arr))

    @classmethod
    def constant(cls, beta: float) -> "ContactKernel":
        return cls(beta)

    @classmethod
    def separable(cls, beta: float, k_pos=None, k_neg=None) -> "ContactKernel":
        return cls(beta, None if k_pos is None else tuple(k_pos),
                   None if k_neg is None else tuple(k_neg))

    @property
    def is_constant(self) -> bool:
        return self.k_pos is None and self.k_neg is None

    def on_grid(self, grid: OpinionGrid) -> np.ndarray:
        kp = np.ones(grid.n_pos) if self.k_pos is None else np.asarray(self.k_pos)
        kn = np.ones(grid.n_neg) if self.k_neg is None else np.asarray(self.k_neg)
        if kp.shape != (grid.n_pos,) or kn.shape != (grid.n_neg,):
            raise DomainError(
                f"kernel tables of length {kp.size}x{kn.size} do not match grid {grid.shape}")
        return self.beta * np.outer(kp, kn)


def _per_compartment(name: str, value) -> tuple[float, float, float, float]:
    if np.isscalar(value):
        value = (value,) * 4
    out = tuple(float(v) for v in value)
    if len(out) != 4:
        raise DomainError(f"{name} needs one value per compartment {COMPARTMENTS}")
    for v in out:
        if not (v >= 0 and math.isfinite(v)):
            raise DomainError(f"{name} entries must be finite and nonnegative, got {v!r}")
    return out


@dataclass(frozen=True)
class KineticParams:
    """Alignment, noise and epidemiological rates.

    Per-compartment entries are ordered as :data:`COMPARTMENTS`.  Zero rates
    are accepted so that frozen or drift-only dynamics can be expressed.
    """

    lambda_pos: tuple[float, float, float, float] = (1.0,) * 4
    lambda_neg: tuple[float, float, float, float] = (1.0,) * 4
    sigma_pos: tuple[float, float, float, float] = (0.5,) * 4
    sigma_neg: tuple[float, float, float, float] = (0.5,) * 4
    kernel: ContactKernel = field(default_factory=lambda: ContactKernel(0.0))
    zeta: float = 0.5
    gamma: float = 0.2
    alpha: float = 1.0
    eta: float = 0.0
    confidence_pos: float = 1.0
    confidence_neg: float = 1.0

    def __post_init__(self):
        for name in ("lambda_pos", "lambda_neg", "sigma_pos", "sigma_neg"):
            object.__setattr__(self, name, _per_compartment(name, getattr(self, name)))
        if not isinstance(self.kernel, ContactKernel):
            object.__setattr__(self, "kernel", ContactKernel(float(self.kernel)))
        for name in ("zeta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name}={v!r} must be finite and nonnegative")
        for name in ("alpha", "eta", "confidence_pos", "confidence_neg"):
            _check_unit(name, getattr(self, name))

    @property
    def beta(self) -> float:
        return self.kernel.beta

    def lam(self, axis: str) -> tuple[float, ...]:
        return self.lambda_pos if axis == "pos" else self.lambda_neg

    def sigma(self, axis: str) -> tuple[float, ...]:
        return self.sigma_pos if axis == "pos" else self.sigma_neg

    @classmethod
    def opinion_only(cls, lam_pos: float, lam_neg: float, sigma_pos: float,
                     sigma_neg: float, **kw) -> "KineticParams":
        return cls(lambda_pos=lam_pos, lambda_neg=lam_neg, sigma_pos=sigma_pos,
                   sigma_neg=sigma_neg, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = {"beta": self.kernel.beta,
                       "k_pos": None if self.kernel.k_pos is None else list(self.kernel.k_pos),
                       "k_neg": None if self.kernel.k_neg is None else list(self.kernel.k_neg)}
        for key in ("lambda_pos", "lambda_neg", "sigma_pos", "sigma_neg"):
            d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class BetaSpec:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and math.isfinite(self.a) and math.isfinite(self.b)):
            raise DomainError(f"Beta shapes must be positive and finite, got a={self.a}, b={self.b}")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    @property
    def spread(self) -> float:
        return 1.0 / (self.a + self.b)

    @property
    def variance(self) -> float:
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1.0))

    @property
    def log_norm(self) -> float:
        """Log of the normalization constant ``1/B(a, b)``."""
        return -float(betaln(self.a, self.b))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


@dataclass(frozen=True)
class MixtureFit:
    """Two-component Beta mixture sharing a mean.

    ``mean_R`` is only set for the relaxed two-mean variant.
    """

    weight_S: float
    mean: float
    mu_S: float
    mu_R: float
    residual: float = 0.0
    mean_R: float | None = None

    def __post_init__(self):
        _check_unit("weight_S", self.weight_S)
        _check_unit("mean", self.mean, closed=False)
        if self.mean_R is not None:
            _check_unit("mean_R", self.mean_R, closed=False)
        if not (self.mu_S > 0 and self.mu_R > 0):
            raise DomainError("component spreads mu_S, mu_R must be positive")
        if not self.residual >= 0:
            raise DomainError("residual must be nonnegative")

    @property
    def component_S(self) -> BetaSpec:
        return beta_from_mean_spread(self.mean, self.mu_S)

    @property
    def component_R(self) -> BetaSpec:
        m = self.mean if self.mean_R is None else self.mean_R
        return beta_from_mean_spread(m, self.mu_R)

    def params(self) -> tuple[float, float, float, float]:
        return (self.weight_S, self.mean, self.mu_S, self.mu_R)

    def relabeled(self) -> "MixtureFit":
        """Same density with the component labels swapped."""
        if self.mean_R is None:
            return MixtureFit(1.0 - self.weight_S, self.mean, self.mu_R, self.mu_S, self.residual)
        return MixtureFit(1.0 - self.weight_S, self.mean_R, self.mu_R, self.mu_S,
                          self.residual, self.mean)

    def to_dict(self) -> dict:
        d = {"weight_S": self.weight_S, "mean": self.mean, "mu_S": self.mu_S,
             "mu_R": self.mu_R, "residual": self.residual}
        if self.mean_R is not None:
            d["mean_R"] = self.mean_R
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureFit":
        return cls(float(d["weight_S"]), float(d["mean"]), float(d["mu_S"]), float(d["mu_R"]),
                   float(d.get("residual", 0.0)),
                   None if d.get("mean_R") is None else float(d["mean_R"]))


# Table of fitted equilibrium parameters for the negative-opinion marginal.
TABLE1_FIT = MixtureFit(weight_S=0.5188, mean=0.0793, mu_S=0.3164, mu_R=0.3408)
TABLE1_LAMBDA = {"pos_S": 6.0, "pos_R": 1.5, "neg_S": 4.0, "neg_R": 0.47}


def beta_from_mean_spread(m: float, mu: float) -> BetaSpec:
    if not (0.0 < m < 1.0):
        raise DomainError(f"mean m={m!r} must lie in (0,1)")
    if not mu > 0:
        raise DomainError(f"spread mu={mu!r} must be positive")
    return BetaSpec(m / mu, (1.0 - m) / mu)


def mu_from_rates(lam: float, sigma: float) -> float:
    """Spread of the stationary Beta for alignment rate ``lam`` and noise ``sigma``.

    Stationarity of ``lam (w-m) g + sigma^2/2 d/dw[w(1-w) g] = 0`` forces
    ``mu = sigma^2 / (2 lam)``.
    """
    if not (lam > 0 and sigma > 0):
        raise DomainError(f"lambda={lam!r} and sigma={sigma!r} must both be positive")
    return sigma * sigma / (2.0 * lam)


def sigma_from_spread(lam: float, mu: float) -> float:
    """Inverse of :func:`mu_from_rates` for a given alignment rate."""
    if not (lam > 0 and mu > 0):
        raise DomainError("lambda and mu must both be positive")
    return math.sqrt(2.0 * lam * mu)


def beta_logpdf(spec: BetaSpec, w):
    w = np.asarray(w, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lw = np.log(w)
        l1w = np.log1p(-w)
        # a unit exponent contributes 0 even where the log is infinite
        left = np.zeros_like(w) if spec.a == 1.0 else (spec.a - 1.0) * lw
        right = np.zeros_like(w) if spec.b == 1.0 else (spec.b - 1.0) * l1w
        return left + right + spec.log_norm


def beta_pdf(spec: BetaSpec, w):
    """Beta density, normalized through log-Gamma.

    Endpoints with an unbounded tail (``a < 1`` at 0, ``b < 1`` at 1)
    return ``inf``; use :func:`beta_cell_average` on grids.
    """
    w = np.asarray(w, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise DomainError("beta_pdf is defined on [0,1]")
    out = np.exp(beta_logpdf(spec, w))
    return float(out) if out.ndim == 0 else out


def beta_cdf(spec: BetaSpec, w):
    return betainc(spec.a, spec.b, np.clip(np.asarray(w, dtype=float), 0.0, 1.0))


def beta_cell_mass(a, b, edges: np.ndarray) -> np.ndarray:
    """Probability of each cell ``[edges[i], edges[i+1]]`` under Beta(a, b).

    Left of the mean the lower regularized integral is differenced, right of
    it the upper one, which keeps tail cells accurate.  ``a``/``b`` broadcast
    against a trailing cell axis.
    """
    edges = np.asarray(edges, dtype=float)
    if np.ndim(a) or np.ndim(b):
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
    lo = betainc(a, b, edges)
    hi = betaincc(a, b, edges)
    left = lo[..., 1:] - lo[..., :-1]
    right = hi[..., :-1] - hi[..., 1:]
    use_left = edges[1:] <= a / (a + b)
    return np.maximum(np.where(use_left, left, right), 0.0)


def beta_cell_average(spec: BetaSpec, edges: np.ndarray) -> np.ndarray:
    """Cell-averaged density (cell mass divided by cell width)."""
    edges = np.asarray(edges, dtype=float)
    return beta_cell_mass(spec.a, spec.b, edges) / np.diff(edges)


def mixture_pdf(fit: MixtureFit, w):
    w = np.asarray(w, dtype=float)
    out = fit.weight_S * np.asarray(beta_pdf(fit.component_S, w))
    if fit.weight_S < 1.0:
        out = out + (1.0 - fit.weight_S) * np.asarray(beta_pdf(fit.component_R, w))
    return float(out) if out.ndim == 0 else out


def mixture_cell_average(fit: MixtureFit, edges: np.ndarray) -> np.ndarray:
    out = fit.weight_S * beta_cell_average(fit.component_S, edges)
    if fit.weight_S < 1.0:
        out = out + (1.0 - fit.weight_S) * beta_cell_average(fit.component_R, edges)
    return out


def count_modes(fit: MixtureFit, resolution: int = 4096) -> int:
    """Number of local maxima of the mixture sampled at interior points.

    Samples sit at ``(k + 1/2)/resolution``.  Runs of equal samples are
    merged into one plateau, and a plateau counts as a mode when it is
    strictly above both neighbours; a missing neighbour past the end of the
    sample range counts as lower, so a monotone density has one mode.
    """
    if resolution < 64:
        raise DomainError("resolution must be at least 64")
    return count_sampled_modes(mixture_pdf(fit, cell_centers(int(resolution))))


def count_sampled_modes(values: Sequence[float]) -> int:
    v = np.asarray(values, dtype=float)
    # plateau merge
    keep = np.concatenate(([True], v[1:] != v[:-1]))
    v = v[keep]
    if v.size == 1:
        return 1
    padded = np.concatenate(([-np.inf], v, [-np.inf]))
    peaks = (padded[1:-1] > padded[:-2]) & (padded[1:-1] > padded[2:])
    return int(np.count_nonzero(peaks))
