"""Kinetic opinion dynamics coupled with SEIR fake-news spreading."""
from .core import (COMPARTMENTS, TABLE1_FIT, BetaSpec, ContactKernel, DomainError, KineticParams,
                   MixtureFit, OpinionGrid, OpinionPair, beta_cdf, beta_from_mean_spread, beta_pdf,
                   count_modes, mixture_pdf, mu_from_rates)

__version__ = "0.1.0"
