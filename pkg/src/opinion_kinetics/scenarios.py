"""Ready-made coupled runs built from the fitted equilibrium table."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (TABLE1_FIT, TABLE1_LAMBDA, ContactKernel, DomainError, KineticParams,
                   MixtureFit, OpinionGrid, sigma_from_spread)
from .fokker_planck import DensityField, SplitStepPlan, matched_target, run


def beta_for_final_size(s_inf: float, s0: float, gamma: float) -> float:
    """Contact rate giving ``rho_S -> s_inf`` from ``rho_S(0) = s0``, nothing removed."""
    if not 0.0 < s_inf < s0 <= 1.0:
        raise DomainError("need 0 < s_inf < s0 <= 1")
    return -gamma * math.log(s_inf / s0) / (1.0 - s_inf)


@dataclass(frozen=True)
class CoupledSetup:
    params: KineticParams
    field0: DensityField
    plan: SplitStepPlan
    t_end: float


def table1_setup(fit: MixtureFit = TABLE1_FIT, n: int = 20, dt: float = 0.05, t_end: float = 100.0,
                 mu_pos: float = 0.25, mean_pos: float = 0.12, mu0: float = 0.5,
                 seed_infected: float = 0.01, zeta: float = 1.0, gamma: float = 0.5,
                 order: str = "lie") -> CoupledSetup:
    """Coupled SEIR-opinion run whose negative steady marginal targets ``fit``.

    Alignment rates come from the table (exposed and infected agents share
    the susceptible rates), noise levels follow from the fitted spreads, and
    the contact rate is set from the final-size relation so that the
    susceptible mass settles at ``fit.weight_S``.  All compartments start
    from the same profile, so the global means stay at their initial values.
    """
    lam_pos = (TABLE1_LAMBDA["pos_S"],) * 3 + (TABLE1_LAMBDA["pos_R"],)
    lam_neg = (TABLE1_LAMBDA["neg_S"],) * 3 + (TABLE1_LAMBDA["neg_R"],)
    mu_neg = (fit.mu_S,) * 3 + (fit.mu_R,)
    sig_pos = tuple(sigma_from_spread(l, mu_pos) for l in lam_pos)
    sig_neg = tuple(sigma_from_spread(l, m) for l, m in zip(lam_neg, mu_neg))
    s0 = 1.0 - seed_infected
    beta = beta_for_final_size(fit.weight_S, s0, gamma)
    p = KineticParams(lam_pos, lam_neg, sig_pos, sig_neg, ContactKernel(beta),
                      zeta=zeta, gamma=gamma, alpha=1.0, eta=0.0)
    grid = OpinionGrid(n, n)
    # start every compartment from Beta profiles whose discrete means are the targets
    g = np.exp(matched_target(mean_pos, mu0, n)[0])
    h = np.exp(matched_target(_discrete_mixture_mean(fit, n), mu0, n)[0])
    field0 = DensityField.from_product(grid, g, h, (s0, 0.0, seed_infected, 0.0))
    return CoupledSetup(p, field0, SplitStepPlan(dt, order), t_end)


def _discrete_mixture_mean(fit: MixtureFit, n: int) -> float:
    from .calibration import mixture_bins

    d = mixture_bins([fit.weight_S, fit.mean, fit.mu_S, fit.mu_R], n)
    c = (np.arange(n) + 0.5) / n
    return float(c @ d / d.sum())


def run_table1(setup: CoupledSetup | None = None, every: int = 0) -> list[DensityField]:
    s = table1_setup() if setup is None else setup
    return run(s.field0, s.params, s.plan, s.t_end, every=every)


__all__ = ["beta_for_final_size", "CoupledSetup", "table1_setup", "run_table1"]
