"""Scored-post records: CSV ingestion, windowed binning and a synthetic generator."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc

from .core import DomainError, MixtureFit, OpinionGrid, TABLE1_FIT

FIELDS = ("t", "w_pos", "w_neg", "group")


class RecordError(DomainError):
    pass


@dataclass(frozen=True)
class SentimentRecord:
    t: float
    w_pos: float
    w_neg: float
    group: str = ""

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise RecordError(f"t={self.t!r} must be finite")
        for name in ("w_pos", "w_neg"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise RecordError(f"{name}={v!r} must lie in [0,1]")


def _arrays(records):
    if not len(records):
        return np.empty(0), np.empty((0, 2))
    t = np.fromiter((r.t for r in records), float, len(records))
    w = np.array([(r.w_pos, r.w_neg) for r in records], dtype=float)
    return t, w


def load_records(path) -> list[SentimentRecord]:
    """Parse a ``t,w_pos,w_neg,group`` CSV; errors name the line and field."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise RecordError(f"{path}: empty file")
        missing = set(FIELDS) - set(reader.fieldnames)
        if missing:
            raise RecordError(f"{path}: header lacks {sorted(missing)}")
        for row in reader:
            line = reader.line_num
            vals = {}
            for name in ("t", "w_pos", "w_neg"):
                try:
                    vals[name] = float(row[name])
                except (TypeError, ValueError):
                    raise RecordError(f"{path}: line {line}, field {name}: "
                                      f"cannot parse {row[name]!r}") from None
            if not math.isfinite(vals["t"]):
                raise RecordError(f"{path}: line {line}, field t: not finite")
            for name in ("w_pos", "w_neg"):
                if not 0.0 <= vals[name] <= 1.0:
                    raise RecordError(f"{path}: line {line}, field {name}: "
                                      f"{vals[name]!r} outside [0,1]")
            out.append(SentimentRecord(vals["t"], vals["w_pos"], vals["w_neg"], row["group"] or ""))
    if not out:
        raise RecordError(f"{path}: no records")
    return out


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in records:
            w.writerow([repr(r.t), repr(r.w_pos), repr(r.w_neg), r.group])


def _bin_index(x: np.ndarray, n: int) -> np.ndarray:
    # a score of exactly 1 belongs to the last bin
    return np.minimum((x * n).astype(int), n - 1)


def bin_snapshot(records, window, grid: OpinionGrid = OpinionGrid()):
    """Histogram the records with ``t0 <= t < t1``.

    Returns ``(hist_pos, hist_neg, field)`` where ``field`` holds the 2-D
    density in its S layer and the histograms are its marginals.
    """
    from .calibration import MarginalHistogram
    from .fokker_planck import DensityField

    t0, t1 = window
    t, w = _arrays(records)
    sel = (t >= t0) & (t < t1)
    k = int(sel.sum())
    if k == 0:
        raise RecordError(f"no records in window [{t0}, {t1})")
    counts = np.zeros((4, grid.n_pos, grid.n_neg))
    np.add.at(counts[0], (_bin_index(w[sel, 0], grid.n_pos), _bin_index(w[sel, 1], grid.n_neg)), 1.0)
    dens = counts / (k * grid.cell_area)
    g = dens[0].sum(axis=1) * grid.dw_neg
    h = dens[0].sum(axis=0) * grid.dw_pos
    field_ = DensityField(grid, dens, 0.5 * (t0 + t1))
    return MarginalHistogram.from_density(g), MarginalHistogram.from_density(h), field_


def snapshot_windows(records, count: int = 4) -> list[tuple[float, float]]:
    """Equal-width half-open windows covering the record span."""
    t, _ = _arrays(records)
    if t.size == 0:
        raise RecordError("no records")
    lo, hi = float(t.min()), float(np.nextafter(t.max(), np.inf))
    edges = np.linspace(lo, hi, count + 1)
    edges[-1] = hi
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def mean_trajectory(records, window_width: float, t0: float | None = None) -> np.ndarray:
    """Rows ``(t_mid, mean_pos, mean_neg, count)`` for non-empty windows."""
    if not window_width > 0:
        raise DomainError("window_width must be positive")
    t, w = _arrays(records)
    if t.size == 0:
        return np.empty((0, 4))
    start = float(t.min()) if t0 is None else t0
    keep = t >= start
    k = np.floor((t[keep] - start) / window_width).astype(np.int64)
    rows = []
    for idx in np.unique(k):
        sel = k == idx
        m = w[keep][sel].mean(axis=0)
        rows.append((start + (idx + 0.5) * window_width, m[0], m[1], int(sel.sum())))
    return np.array(rows, dtype=float)


@dataclass(frozen=True)
class GeneratorSpec:
    """Time-interpolated synthetic opinion law.

    The negative score moves from a single Beta (``early_neg``) to the
    mixture ``late_neg``; the weight of the late law ramps linearly and is
    one from ``ramp_end`` (fraction of the span) on.  The positive score is a
    single Beta interpolated the same way.  Beta laws are given as
    ``(mean, spread)``.
    """

    n: int = 4077
    t_start: float = 0.0
    t_end: float = 120.0
    early_pos: tuple[float, float] = (0.12, 0.3)
    late_pos: tuple[float, float] = (0.12, 0.3)
    early_neg: tuple[float, float] = (0.03, 0.3)
    late_neg: dict = field(default_factory=lambda: TABLE1_FIT.to_dict())
    ramp_end: float = 0.75
    strata: int = 4
    groups: int = 6

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise DomainError("n must be a positive integer")
        if not self.t_end > self.t_start:
            raise DomainError("t_end must exceed t_start")
        if not 0.0 < self.ramp_end <= 1.0:
            raise DomainError("ramp_end must lie in (0,1]")
        for name in ("early_pos", "late_pos", "early_neg"):
            m, mu = getattr(self, name)
            if not (0.0 < m < 1.0 and mu > 0):
                raise DomainError(f"{name} needs mean in (0,1) and spread > 0")
        object.__setattr__(self, "late_neg", self.late_mixture.to_dict())

    @property
    def late_mixture(self) -> MixtureFit:
        return self.late_neg if isinstance(self.late_neg, MixtureFit) else MixtureFit.from_dict(self.late_neg)

    def weight(self, t) -> np.ndarray:
        span = (self.t_end - self.t_start) * self.ramp_end
        return np.clip((np.asarray(t, dtype=float) - self.t_start) / span, 0.0, 1.0)

    def to_json(self, path=None) -> str:
        d = asdict(self)
        d["late_neg"] = self.late_mixture.to_dict()
        s = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s

    @classmethod
    def from_json(cls, text_or_dict) -> "GeneratorSpec":
        d = json.loads(text_or_dict) if isinstance(text_or_dict, str) else dict(text_or_dict)
        for k in ("early_pos", "late_pos", "early_neg"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _ab(m, mu):
    return m / mu, (1.0 - m) / mu


def _mixture_cdf_inverse(u, parts):
    """Invert ``sum_k c_k(t) I(a_k, b_k, w)`` by vectorized bisection."""
    lo = np.zeros_like(u)
    hi = np.ones_like(u)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        F = sum(c * betainc(a, b, mid) for c, a, b in parts)
        below = F < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _stratified_uniforms(rng, strata_index: np.ndarray) -> np.ndarray:
    # jittered stratification inside each time stratum, randomly assigned to records
    u = np.empty(strata_index.size)
    for s in np.unique(strata_index):
        idx = np.flatnonzero(strata_index == s)
        k = idx.size
        u[rng.permutation(idx)] = (np.arange(k) + rng.random(k)) / k
    return u


def generate_synthetic(spec: GeneratorSpec = GeneratorSpec(), n: int | None = None,
                       seed: int = 0) -> list[SentimentRecord]:
    """Draw ``n`` records sorted by time; deterministic given ``seed``."""
    n = spec.n if n is None else int(n)
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.sort(spec.t_start + (spec.t_end - spec.t_start) * rng.random(n))
    strata = np.minimum(((t - spec.t_start) / (spec.t_end - spec.t_start) * spec.strata).astype(int),
                        spec.strata - 1)
    pi = spec.weight(t)

    fit = spec.late_mixture
    a_e, b_e = _ab(*spec.early_neg)
    a_s, b_s = _ab(fit.mean, fit.mu_S)
    a_r, b_r = _ab(fit.mean if fit.mean_R is None else fit.mean_R, fit.mu_R)
    w_neg = _mixture_cdf_inverse(_stratified_uniforms(rng, strata), [
        (1.0 - pi, a_e, b_e), (pi * fit.weight_S, a_s, b_s), (pi * (1.0 - fit.weight_S), a_r, b_r)])

    m_pos = (1.0 - pi) * spec.early_pos[0] + pi * spec.late_pos[0]
    mu_pos = (1.0 - pi) * spec.early_pos[1] + pi * spec.late_pos[1]
    a_p, b_p = _ab(m_pos, mu_pos)
    w_pos = _mixture_cdf_inverse(_stratified_uniforms(rng, strata), [(1.0, a_p, b_p)])

    groups = rng.integers(0, spec.groups, n)
    return [SentimentRecord(float(t[i]), float(w_pos[i]), float(w_neg[i]), f"g{groups[i] + 1}")
            for i in range(n)]


__all__ = ["SentimentRecord", "RecordError", "load_records", "write_records", "bin_snapshot",
           "snapshot_windows", "mean_trajectory", "GeneratorSpec", "generate_synthetic"]
