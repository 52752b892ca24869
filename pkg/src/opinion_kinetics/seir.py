"""Fake-news SEIR system, its first-moment extension and the final-size relation."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import COMPARTMENTS, DomainError, KineticParams


class StepSizeError(ValueError):
    pass


class DegenerateFinalSize(RuntimeWarning):
    """No nontrivial final-size root exists; the initial value is returned."""


@dataclass(frozen=True)
class SeirState:
    rho_S: float
    rho_E: float
    rho_I: float
    rho_R: float

    def __post_init__(self):
        arr = self.as_array()
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise DomainError(f"compartment masses must be nonnegative, got {arr}")
        if abs(arr.sum() - 1.0) > 1e-12:
            raise DomainError(f"compartment masses must sum to 1, got {arr.sum()!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.rho_S, self.rho_E, self.rho_I, self.rho_R], dtype=float)

    @classmethod
    def from_array(cls, x) -> "SeirState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class MomentState:
    """Mass-weighted first moments ``q[J, axis] = rho_J * m_J``; axis 0 is pos."""

    q: tuple[tuple[float, float], ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float).reshape(4, 2)

    @classmethod
    def from_array(cls, q) -> "MomentState":
        q = np.asarray(q, dtype=float).reshape(4, 2)
        return cls(tuple((float(a), float(b)) for a, b in q))

    @classmethod
    def from_means(cls, s: SeirState, means) -> "MomentState":
        """Build from per-compartment means (shape (4, 2)) or one shared pair."""
        means = np.broadcast_to(np.asarray(means, dtype=float), (4, 2))
        return cls.from_array(s.as_array()[:, None] * means)

    def global_means(self) -> tuple[float, float]:
        q = self.as_array()
        return float(q[:, 0].sum()), float(q[:, 1].sum())


def _rhs(x: np.ndarray, p: KineticParams) -> np.ndarray:
    S, E, I, R = x
    b, z, g, a, e = p.beta, p.zeta, p.gamma, p.alpha, p.eta
    inc = b * S * I
    return np.array([
        -inc + (1.0 - a) * g * I,
        inc - z * E,
        (1.0 - e) * z * E - g * I,
        e * z * E + a * g * I,
    ])


def seir_rhs(s: SeirState | np.ndarray, p: KineticParams) -> np.ndarray:
    """Time derivative of ``(rho_S, rho_E, rho_I, rho_R)``; the entries sum to zero."""
    x = s.as_array() if isinstance(s, SeirState) else np.asarray(s, dtype=float)
    return _rhs(x, p)


def moment_rhs(m: MomentState | np.ndarray, s: SeirState | np.ndarray, p: KineticParams,
               global_means=None, literal_exposed_term: bool = False) -> np.ndarray:
    """Derivative of the mass-weighted first moments, shape (4, 2).

    Each compartment relaxes its mean toward the global mean at its own
    alignment rate while the epidemic transfers carry moments along with
    mass.  ``literal_exposed_term`` replaces the latency outflow ``zeta q_E``
    by ``zeta rho_E``; that form does not conserve the global mean and is
    kept only for comparison.
    """
    q = m.as_array() if isinstance(m, MomentState) else np.asarray(m, dtype=float).reshape(4, 2)
    x = s.as_array() if isinstance(s, SeirState) else np.asarray(s, dtype=float)
    if global_means is None:
        global_means = q.sum(axis=0)
    mbar = np.asarray(global_means, dtype=float)
    S, E, I, R = x
    b, z, g, a, e = p.beta, p.zeta, p.gamma, p.alpha, p.eta
    lam = np.array([p.lambda_pos, p.lambda_neg]).T  # (4, 2)

    qS, qE, qI, qR = q
    exposed_out = z * E * np.ones(2) if literal_exposed_term else z * qE
    transfer = np.array([
        -b * qS * I + (1.0 - a) * g * qI,
        b * qS * I - exposed_out,
        (1.0 - e) * z * qE - g * qI,
        e * z * qE + a * g * qI,
    ])
    align = -lam * (q - x[:, None] * mbar[None, :])
    return transfer + align


@dataclass(frozen=True)
class SeirTrajectory:
    times: np.ndarray
    states: np.ndarray          # (n, 4)
    moments: np.ndarray | None = None  # (n, 4, 2)

    @property
    def final(self) -> SeirState:
        x = np.clip(self.states[-1], 0.0, None)
        return SeirState.from_array(x / x.sum())

    def global_means(self) -> np.ndarray:
        if self.moments is None:
            raise ValueError("trajectory was integrated without moments")
        return self.moments.sum(axis=1)

    def to_csv(self, path) -> None:
        header = ["time", "rho_S", "rho_E", "rho_I", "rho_R"]
        if self.moments is not None:
            header += [f"q_{ax}_{J}" for J in COMPARTMENTS for ax in ("pos", "neg")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, t in enumerate(self.times):
                row = [repr(float(t))] + [repr(float(v)) for v in self.states[k]]
                if self.moments is not None:
                    row += [repr(float(v)) for v in self.moments[k].ravel()]
                w.writerow(row)


def integrate_seir(s0: SeirState, p: KineticParams, t_end: float, dt: float,
                   moments0: MomentState | None = None) -> SeirTrajectory:
    """Classic fixed-step RK4 integration, optionally with the moment system."""
    rate = max(p.beta, p.zeta, p.gamma)
    if not (dt > 0 and t_end > 0):
        raise StepSizeError("dt and t_end must be positive")
    if dt * rate > 0.1:
        raise StepSizeError(f"dt*max(beta, zeta, gamma) = {dt * rate:.3g} exceeds 0.1")
    n = int(math.ceil(t_end / dt - 1e-9))
    times = np.minimum(np.arange(n + 1) * dt, t_end)

    with_m = moments0 is not None
    y = np.concatenate([s0.as_array(), moments0.as_array().ravel()]) if with_m else s0.as_array()

    def f(y):
        x = y[:4]
        if not with_m:
            return _rhs(x, p)
        q = y[4:].reshape(4, 2)
        return np.concatenate([_rhs(x, p), moment_rhs(q, x, p).ravel()])

    out = np.empty((n + 1, y.size))
    out[0] = y
    for k in range(n):
        h = times[k + 1] - times[k]
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    moments = out[:, 4:].reshape(-1, 4, 2) if with_m else None
    return SeirTrajectory(times, out[:, :4], moments)


def final_size(p: KineticParams, rho_S0: float, tol: float = 1e-10) -> float:
    """Limit of ``rho_S`` for ``alpha=1, eta=0`` starting with no removed mass.

    Solves ``ln(s/rho_S0) = -(beta/gamma)(1 - s)`` by bisection on
    ``(0, rho_S0)``.  When ``rho_S0 == 1`` and ``beta/gamma <= 1`` the only
    root is ``rho_S0`` itself; it is returned with a
    :class:`DegenerateFinalSize` warning.
    """
    if not (0.0 < rho_S0 <= 1.0):
        raise DomainError(f"rho_S0={rho_S0!r} must lie in (0,1]")
    if not (p.beta > 0 and p.gamma > 0):
        raise DomainError("final size needs beta > 0 and gamma > 0")
    if p.alpha != 1.0 or p.eta != 0.0:
        raise DomainError("final size relation holds for alpha=1, eta=0")
    r0 = p.beta / p.gamma

    def g(s):
        return math.log(s / rho_S0) + r0 * (1.0 - s)

    hi = rho_S0
    if rho_S0 == 1.0:
        if r0 <= 1.0:
            warnings.warn("no spreading root below rho_S0", DegenerateFinalSize, stacklevel=2)
            return rho_S0
        # g(1) = 0 but g > 0 on [1/r0, 1), so bracket below the maximum
        hi = 1.0 / r0
    lo = min(hi, math.exp(-r0) * rho_S0) * 0.5
    while g(lo) > 0:
        lo *= 0.5
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
