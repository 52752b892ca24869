"""Mean-field Fokker-Planck solver for the four-compartment opinion system.

The 2D problem is split by dimension and by physics: one 1D drift-diffusion
sweep per opinion axis plus a pointwise compartment-exchange step.  Each 1D
sweep uses a finite-volume flux written relative to a target profile ``t``,

    F_{k+1/2} = c_k * (f_{k+1}/t_{k+1} - f_k/t_k),

so any positive ``c_k`` makes ``t`` an exact discrete equilibrium.  Two
coefficient rules are available:

``"exact"``
    exponential fitting (Scharfetter-Gummel / Chang-Cooper weights) with the
    diffusion ``sigma^2/2 w(1-w)`` sampled at the interfaces; the target is
    the Beta equilibrium for the *given* mean.  Used when means are held fixed.
``"conservative"``
    ``c_k = lam * sum_{l<=k} (m - w_l) t_l``, the discrete form of the Pearson
    identity ``sigma^2/2 w(1-w) t = lam int_0^w (m - v) t dv``.  The global
    first moment is then an exact discrete invariant when alignment rates are
    equal across compartments.  The target is the Beta of spread ``mu`` whose
    discrete (midpoint) mean equals the current global mean.

Targets are either cell averages of the Beta density (``profile="cell"``,
exactly normalized, default) or point samples at cell centers
(``profile="point"``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Literal

import numpy as np
from scipy.linalg import expm, solve_banded
from scipy.optimize import brentq
from scipy.special import exprel

from .core import (COMPARTMENTS, DomainError, KineticParams, OpinionGrid, beta_cell_mass,
                   beta_from_mean_spread, beta_logpdf, cell_centers, mu_from_rates)

Axis = Literal["pos", "neg"]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DensityField:
    """Per-compartment densities on a cell-centered grid.

    ``values`` has shape ``(4, n_pos, n_neg)``; axis 1 is the positive
    opinion, axis 2 the negative one.
    """

    grid: OpinionGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (4,) + self.grid.shape:
            raise DomainError(f"values shape {v.shape} does not match (4,)+{self.grid.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DomainError("densities must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_product(cls, grid: OpinionGrid, g, h, masses=(1.0, 0.0, 0.0, 0.0),
                     time: float = 0.0) -> "DensityField":
        """Compartments share the separable profile ``g (x) h``, scaled to ``masses``."""
        g = np.asarray(g, dtype=float)
        h = np.asarray(h, dtype=float)
        base = np.outer(g, h)
        base = base / (base.sum() * grid.cell_area)
        masses = np.asarray(masses, dtype=float)
        return cls(grid, masses[:, None, None] * base[None], time)

    @classmethod
    def uniform(cls, grid: OpinionGrid, masses=(1.0, 0.0, 0.0, 0.0)) -> "DensityField":
        return cls.from_product(grid, np.ones(grid.n_pos), np.ones(grid.n_neg), masses)

    def replace(self, values=None, time=None) -> "DensityField":
        return DensityField(self.grid, self.values if values is None else values,
                            self.time if time is None else time)

    @property
    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)

    @property
    def masses(self) -> np.ndarray:
        return self.values.sum(axis=(1, 2)) * self.grid.cell_area

    @property
    def total_mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)

    def global_means(self) -> tuple[float, float]:
        tot = self.total
        mass = tot.sum()
        mp = float(self.grid.centers_pos @ tot.sum(axis=1) / mass)
        mn = float(self.grid.centers_neg @ tot.sum(axis=0) / mass)
        return mp, mn


@dataclass(frozen=True, eq=False)
class Marginals:
    g: np.ndarray        # (4, n_pos) positive-opinion marginals
    h: np.ndarray        # (4, n_neg)
    rho: np.ndarray      # (4,)
    m_pos: np.ndarray    # (4,), nan for empty compartments
    m_neg: np.ndarray
    mbar: tuple[float, float]

    @property
    def g_total(self) -> np.ndarray:
        return self.g.sum(axis=0)

    @property
    def h_total(self) -> np.ndarray:
        return self.h.sum(axis=0)


def field_marginals(field: DensityField) -> Marginals:
    grid = field.grid
    g = field.values.sum(axis=2) * grid.dw_neg
    h = field.values.sum(axis=1) * grid.dw_pos
    rho = g.sum(axis=1) * grid.dw_pos
    q_pos = g @ grid.centers_pos * grid.dw_pos
    q_neg = h @ grid.centers_neg * grid.dw_neg
    with np.errstate(invalid="ignore", divide="ignore"):
        m_pos = np.where(rho > 0, q_pos / rho, np.nan)
        m_neg = np.where(rho > 0, q_neg / rho, np.nan)
    total = rho.sum()
    return Marginals(g, h, rho, m_pos, m_neg, (float(q_pos.sum() / total), float(q_neg.sum() / total)))


# --- 1D targets ---------------------------------------------------------------

def _log_beta_profile(m: float, mu: float, n: int, profile: str) -> np.ndarray:
    spec = beta_from_mean_spread(m, mu)
    c = cell_centers(n)
    point = beta_logpdf(spec, c)
    if profile == "point":
        return point
    mass = beta_cell_mass(spec.a, spec.b, np.linspace(0.0, 1.0, n + 1))
    with np.errstate(divide="ignore"):
        logt = np.log(mass * n)
    # cells whose mass underflows fall back to the point value
    bad = ~np.isfinite(logt)
    logt[bad] = point[bad]
    return logt


def _discrete_mean(logt: np.ndarray, c: np.ndarray) -> float:
    t = np.exp(logt - logt.max())
    return float(c @ t / t.sum())


_TARGET_CACHE: dict[tuple, tuple[float, float, np.ndarray]] = {}


def matched_target(mbar: float, mu: float, n: int, profile: str = "cell") -> tuple[np.ndarray, float]:
    """Log-profile of the Beta with spread ``mu`` whose discrete mean is ``mbar``.

    Returns ``(log_t, m_shape)`` where ``m_shape`` is the continuous mean of
    that Beta.  Results are memoized per ``(mu, n, profile)`` and reused while
    ``mbar`` moves by less than 1e-13.
    """
    c = cell_centers(n)
    if not (c[0] <= mbar <= c[-1]):
        raise SolverError(f"mean {mbar!r} outside the range of cell centers")
    key = (mu, n, profile)
    hit = _TARGET_CACHE.get(key)
    if hit is not None and abs(hit[0] - mbar) <= 1e-13:
        return hit[2], hit[1]

    def resid(m):
        return _discrete_mean(_log_beta_profile(m, mu, n, profile), c) - mbar

    guess = mbar if hit is None else min(max(hit[1] + (mbar - hit[0]), 1e-12), 1 - 1e-12)
    root = None
    # secant from the last solution, falling back to bracketing
    x0, x1 = guess, min(guess + 1e-7, 1 - 1e-12)
    f0, f1 = resid(x0), resid(x1)
    for _ in range(30):
        if f1 == f0:
            break
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
        if not (0.0 < x2 < 1.0):
            break
        x0, f0, x1 = x1, f1, x2
        f1 = resid(x1)
        if abs(f1) <= 2e-16 or abs(x1 - x0) <= 1e-16:
            root = x1
            break
    if root is None:
        root = brentq(resid, 1e-12, 1 - 1e-12, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
    logt = _log_beta_profile(root, mu, n, profile)
    _TARGET_CACHE[key] = (mbar, root, logt)
    if len(_TARGET_CACHE) > 256:
        _TARGET_CACHE.pop(next(iter(_TARGET_CACHE)))
    return logt, root


def _bernoulli(x: np.ndarray) -> np.ndarray:
    """``x / (exp(x) - 1)`` with the removable singularity at 0."""
    with np.errstate(over="ignore"):
        return 1.0 / exprel(x)


def interface_coefficients(n: int, lam: float, sigma: float, mbar: float,
                           scheme: str = "conservative", profile: str = "cell"):
    """Flux coefficients ``(u, v)`` with ``F_{k+1/2} = u_k f_{k+1} - v_k f_k``.

    Returns ``None`` for frozen dynamics (``lam == sigma == 0``).
    """
    if lam == 0 and sigma == 0:
        return None
    dw = 1.0 / n
    edges = np.arange(1, n) * dw          # interior interfaces
    if sigma == 0 or (lam > 0 and sigma * sigma / (2.0 * lam) == 0.0):
        # pure alignment (or noise too weak to resolve): first-order upwinding of lam (w - m) f
        drift = lam * (edges - mbar)
        return np.maximum(drift, 0.0), np.maximum(-drift, 0.0)
    c = cell_centers(n)
    if lam == 0:
        logt = -np.log(c * (1.0 - c))
        scheme = "exact"
    elif scheme == "exact":
        logt = _log_beta_profile(mbar, mu_from_rates(lam, sigma), n, profile)
    elif scheme == "conservative":
        logt, _ = matched_target(mbar, mu_from_rates(lam, sigma), n, profile)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    if scheme == "conservative":
        t = np.exp(logt - logt.max())
        if np.any(t == 0):
            scheme = "exact"
        else:
            m_t = float(c @ t / t.sum())
            s_fwd = np.cumsum((m_t - c) * t)[:-1]
            s_bwd = np.cumsum(((c - m_t) * t)[::-1])[::-1][1:]
            s = np.where(edges <= m_t, s_fwd, s_bwd)
            ck = lam * np.maximum(s, 0.0)
            return ck / t[1:], ck / t[:-1]

    diff = 0.5 * sigma * sigma * edges * (1.0 - edges) / dw
    lt = logt[:-1] - logt[1:]
    return diff * _bernoulli(-lt), diff * _bernoulli(lt)


def generator_bands(u: np.ndarray, v: np.ndarray, dw: float):
    """Tridiagonal ``A`` of ``df/dt = A f`` as (upper, diag, lower)."""
    n = u.size + 1
    diag = np.zeros(n)
    diag[:-1] -= v
    diag[1:] -= u
    return u / dw, diag / dw, v / dw


def _advance_1d(block: np.ndarray, u, v, dw: float, dt: float, method: str) -> np.ndarray:
    """Advance every column of ``block`` (cells along axis 0) by ``dt``."""
    upper, diag, lower = generator_bands(u, v, dw)
    if method == "implicit":
        n = diag.size
        ab = np.zeros((3, n))
        ab[0, 1:] = -dt * upper
        ab[1] = 1.0 - dt * diag
        ab[2, :-1] = -dt * lower
        return solve_banded((1, 1), ab, block, check_finite=False)
    if method == "exponential":
        a = np.diag(diag) + np.diag(upper, 1) + np.diag(lower, -1)
        return expm(dt * a) @ block
    raise ValueError(f"unknown sweep method {method!r}")


def sweep_axis(field: DensityField, axis: Axis, means, p: KineticParams, dt: float,
               scheme: str = "conservative", profile: str = "cell",
               method: str = "implicit") -> DensityField:
    """One drift-diffusion step along ``axis`` for every compartment and slice.

    ``means`` are the global means ``(m_pos, m_neg)`` used as the drift
    center; pass ``None`` to take them from ``field``.
    """
    if axis not in ("pos", "neg"):
        raise ValueError(f"axis must be 'pos' or 'neg', got {axis!r}")
    if means is None:
        means = field.global_means()
    k = 0 if axis == "pos" else 1
    mbar = float(means[k])
    grid = field.grid
    n = grid.n_pos if axis == "pos" else grid.n_neg
    dw = 1.0 / n
    lams, sigmas = p.lam(axis), p.sigma(axis)
    out = np.array(field.values)
    for j in range(4):
        coeff = interface_coefficients(n, lams[j], sigmas[j], mbar, scheme, profile)
        if coeff is None or not out[j].any():
            continue
        block = out[j] if axis == "pos" else out[j].T
        try:
            new = _advance_1d(block, *coeff, dw, dt, method)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"{axis}-sweep failed for compartment {COMPARTMENTS[j]}: {exc}") from exc
        if not np.all(np.isfinite(new)):
            raise SolverError(f"non-finite values in {axis}-sweep, compartment {COMPARTMENTS[j]}")
        worst = new.min()
        if worst < -1e-13:
            bad = np.unravel_index(np.argmin(new), new.shape)
            raise SolverError(f"negative density {worst:.3e} in {axis}-sweep, compartment "
                              f"{COMPARTMENTS[j]}, slice {bad[1]}")
        new = np.maximum(new, 0.0)
        out[j] = new if axis == "pos" else new.T
    return field.replace(values=out)


# --- compartment exchange --------------------------------------------------------

def incidence(field: DensityField, p: KineticParams) -> float:
    """Midpoint quadrature of ``int kappa(w) f_I(w) dw``."""
    kappa = p.kernel.on_grid(field.grid)
    return float((kappa * field.values[2]).sum() * field.grid.cell_area)


def _exchange_rhs(f: np.ndarray, p: KineticParams, kappa: np.ndarray, area: float,
                  zeta, gamma) -> np.ndarray:
    S, E, I, R = f
    inc = S * float((kappa * I).sum() * area)
    a, e = p.alpha, p.eta
    return np.stack([
        -inc + (1.0 - a) * gamma * I,
        inc - zeta * E,
        (1.0 - e) * zeta * E - gamma * I,
        e * zeta * E + a * gamma * I,
    ])


def reaction_step(field: DensityField, p: KineticParams, dt: float, method: str = "euler",
                  zeta=None, gamma=None) -> DensityField:
    """Explicit step of the pointwise compartment exchange.

    ``zeta``/``gamma`` may be tabulated on the grid to override the constant
    rates.  If a compartment would turn negative the step is re-run with the
    interval split into 2, 4, 8 and 16 substeps before giving up.
    """
    kappa = p.kernel.on_grid(field.grid)
    area = field.grid.cell_area
    zeta = p.zeta if zeta is None else np.asarray(zeta, dtype=float)
    gamma = p.gamma if gamma is None else np.asarray(gamma, dtype=float)

    def rhs(f):
        return _exchange_rhs(f, p, kappa, area, zeta, gamma)

    f0 = np.asarray(field.values)
    scale = max(float(f0.max()), 1e-300)
    with np.errstate(over="ignore", invalid="ignore"):
        return _guarded_reaction(field, f0, rhs, dt, method, scale)


def _guarded_reaction(field, f0, rhs, dt, method, scale):
    for attempt in range(5):
        nsub = 2 ** attempt
        h = dt / nsub
        f = f0
        for _ in range(nsub):
            k1 = rhs(f)
            if method == "euler":
                f = f + h * k1
            elif method == "heun":
                f1 = f + h * k1
                f = f + 0.5 * h * (k1 + rhs(f1))
            else:
                raise ValueError(f"unknown reaction method {method!r}")
        if np.all(np.isfinite(f)) and f.min() >= -1e-14 * scale:
            return field.replace(values=np.maximum(f, 0.0))
    raise SolverError(f"reaction step produced negative densities even with {nsub} substeps")


# --- splitting -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitStepPlan:
    """Time step, splitting order and per-stage integrators.

    Lie splitting uses implicit-Euler sweeps and an explicit-Euler exchange;
    Strang splitting defaults to exact (matrix exponential) sweeps and a Heun
    exchange step so that the splitting error dominates.  ``fixed_means``
    pins the drift centers and switches the sweeps to the exact-target rule.
    """

    dt: float
    order: Literal["lie", "strang"] = "lie"
    courant: float = 1.0
    fixed_means: tuple[float, float] | None = None
    profile: Literal["cell", "point"] = "cell"
    sweep_method: Literal["implicit", "exponential"] | None = None
    reaction_method: Literal["euler", "heun"] | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.order not in ("lie", "strang"):
            raise DomainError(f"order must be 'lie' or 'strang', got {self.order!r}")
        if not (0 < self.courant <= 1):
            raise DomainError("courant factor must lie in (0, 1]")
        if self.profile not in ("cell", "point"):
            raise DomainError(f"profile must be 'cell' or 'point', got {self.profile!r}")
        if self.fixed_means is not None:
            for m in self.fixed_means:
                _ = float(m)
                if not 0 < m < 1:
                    raise DomainError("fixed means must lie in (0,1)")

    @property
    def sweep(self) -> str:
        if self.sweep_method:
            return self.sweep_method
        return "implicit" if self.order == "lie" else "exponential"

    @property
    def reaction(self) -> str:
        if self.reaction_method:
            return self.reaction_method
        return "euler" if self.order == "lie" else "heun"

    @property
    def scheme(self) -> str:
        return "conservative" if self.fixed_means is None else "exact"

    def stages(self) -> list[tuple[str, float]]:
        if self.order == "lie":
            return [("pos", 1.0), ("neg", 1.0), ("reaction", 1.0)]
        return [("pos", 0.5), ("neg", 0.5), ("reaction", 1.0), ("neg", 0.5), ("pos", 0.5)]

    def check(self, grid: OpinionGrid) -> None:
        dw = min(grid.dw_pos, grid.dw_neg)
        if self.dt > self.courant * dw * (1 + 1e-12):
            raise DomainError(f"dt={self.dt} exceeds courant*dw={self.courant * dw}")


def split_step(field: DensityField, p: KineticParams, plan: SplitStepPlan,
               zeta=None, gamma=None) -> DensityField:
    plan.check(field.grid)
    f = field
    for stage, frac in plan.stages():
        h = frac * plan.dt
        if stage == "reaction":
            if p.beta == 0 and p.zeta == 0 and p.gamma == 0 and zeta is None and gamma is None:
                continue
            f = reaction_step(f, p, h, plan.reaction, zeta, gamma)
        else:
            means = plan.fixed_means if plan.fixed_means is not None else f.global_means()
            f = sweep_axis(f, stage, means, p, h, plan.scheme, plan.profile, plan.sweep)
    return f.replace(time=field.time + plan.dt)


@dataclass(frozen=True, eq=False)
class SteadyResult:
    field: DensityField
    converged: bool
    residual: float
    steps: int


def solve_to_steady(field0: DensityField, p: KineticParams, plan: SplitStepPlan,
                    tol: float = 1e-10, max_steps: int = 100_000, callback=None) -> SteadyResult:
    """Iterate :func:`split_step` until the L1 change per unit time drops below ``tol``."""
    if not tol > 0:
        raise DomainError("tol must be positive")
    f = field0
    area = f.grid.cell_area
    residual = math.inf
    for step in range(1, max_steps + 1):
        nxt = split_step(f, p, plan)
        residual = float(np.abs(nxt.values - f.values).sum() * area / plan.dt)
        f = nxt
        if callback is not None:
            callback(f)
        if residual < tol:
            return SteadyResult(f, True, residual, step)
    return SteadyResult(f, False, residual, max_steps)


def run(field0: DensityField, p: KineticParams, plan: SplitStepPlan, t_end: float,
        every: int = 0, zeta=None, gamma=None) -> list[DensityField]:
    """Advance to ``t_end``; returns snapshots every ``every`` steps plus the last one."""
    nsteps = int(round(t_end / plan.dt))
    if abs(nsteps * plan.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise DomainError("t_end must be a multiple of dt")
    f = field0
    snaps = [f]
    for k in range(1, nsteps + 1):
        f = split_step(f, p, plan, zeta, gamma)
        if (every and k % every == 0) or k == nsteps:
            snaps.append(f)
    return snaps


# --- export ----------------------------------------------------------------------

def field_header(field: DensityField) -> dict:
    m = field_marginals(field)
    return {
        "grid": {"n_pos": field.grid.n_pos, "n_neg": field.grid.n_neg},
        "time": field.time,
        "masses": dict(zip(COMPARTMENTS, map(float, m.rho))),
        "means": {"pos": m.mbar[0], "neg": m.mbar[1],
                  "per_compartment": {J: [None if math.isnan(a) else float(a),
                                          None if math.isnan(b) else float(b)]
                                      for J, a, b in zip(COMPARTMENTS, m.m_pos, m.m_neg)}},
    }


def write_field_csv(field: DensityField, path) -> None:
    cp, cn = field.grid.centers_pos, field.grid.centers_neg
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["compartment", "i", "j", "w_pos_center", "w_neg_center", "density"])
        for k, J in enumerate(COMPARTMENTS):
            vals = field.values[k]
            for i in range(field.grid.n_pos):
                for j in range(field.grid.n_neg):
                    w.writerow([J, i, j, repr(float(cp[i])), repr(float(cn[j])),
                                repr(float(vals[i, j]))])


def write_field_header(field: DensityField, path) -> None:
    with open(path, "w") as fh:
        json.dump(field_header(field), fh, indent=2)


def read_field_csv(path, grid: OpinionGrid | None = None, time: float = 0.0) -> DensityField:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((COMPARTMENTS.index(row["compartment"]), int(row["i"]), int(row["j"]),
                         float(row["density"])))
    if grid is None:
        grid = OpinionGrid(max(r[1] for r in rows) + 1, max(r[2] for r in rows) + 1)
    vals = np.zeros((4,) + grid.shape)
    for k, i, j, d in rows:
        vals[k, i, j] = d
    return DensityField(grid, vals, time)


def write_marginals_csv(snapshots: list[DensityField], path, axis: Axis) -> None:
    """One row per (snapshot, cell) with per-compartment and total marginals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "w_center"] + [f"density_{J}" for J in COMPARTMENTS] + ["density_total"])
        for f in snapshots:
            m = field_marginals(f)
            arr = m.g if axis == "pos" else m.h
            centers = f.grid.centers_pos if axis == "pos" else f.grid.centers_neg
            for i, c in enumerate(centers):
                w.writerow([repr(f.time), repr(float(c))] + [repr(float(x)) for x in arr[:, i]]
                           + [repr(float(arr[:, i].sum()))])
