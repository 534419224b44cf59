"""Calibration and Monte Carlo simulation of mean-reverting energy price models.

One-factor (lognormal or normal) mean reversion with irregular time steps,
the two-factor Spot-Prompt extension, joint multi-asset factor
correlations, residual diagnostics, and a risk-neutral simulator with
exact transition sampling.
"""

__version__ = "0.1.0"

from .timeseries import (  # noqa: F401
    DataError,
    FactorSeries,
    PriceSeries,
    StepSeries,
    align,
    daycount,
    load_csv,
    to_steps,
    year_fraction,
)
