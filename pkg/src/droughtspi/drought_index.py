"""Multi-scale standardized drought index built on the fitted Gamma model.

Accumulated precipitation is pushed through the fitted Gamma CDF and
then the standard normal quantile, giving values on an N(0,1) scale that
are comparable across stations, months and accumulation windows. Index
values are then binned into the usual seven drought/wet categories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .gamma_gam import GammaGamFit, predict
from .numerics import reg_lower_inc_gamma, std_normal_quantile

__all__ = [
    "AccumulatedSeries",
    "DroughtCategory",
    "DroughtIndexSeries",
    "accumulate",
    "gamma_cdf_at",
    "spi_transform",
    "spi_transform_batch",
    "classify",
    "classify_batch",
    "index_from_accumulated",
    "SEVERE_EVENT_THRESHOLD",
    "CLAMP_LO",
    "CLAMP_HI",
]

log = logging.getLogger(__name__)

SEVERE_EVENT_THRESHOLD = -1.5
CLAMP_LO = 1e-10
CLAMP_HI = 1.0 - 1e-10


class DroughtCategory(Enum):
    EXTREMELY_WET = "extremely_wet"
    VERY_WET = "very_wet"
    WET = "wet"
    NORMAL = "normal"
    DRY = "dry"
    VERY_DRY = "very_dry"
    EXTREMELY_DRY = "extremely_dry"


@dataclass
class AccumulatedSeries:
    """Backward rolling sums of monthly precipitation.

    The first m-1 entries (and any window containing a missing month)
    are NaN. ``valid_from`` is the first index with a complete window.
    """

    station_id: str
    m: int
    values: np.ndarray
    valid_from: int


@dataclass
class DroughtIndexSeries:
    station_id: str
    m: int
    d_values: np.ndarray  # NaN where the window was incomplete or nonpositive
    categories: List[Optional[DroughtCategory]]
    accumulated: np.ndarray
    gamma_cdf: np.ndarray
    clamped: np.ndarray  # bool per entry
    severe_event: np.ndarray  # d < -1.5
    n_zero_excluded: int
    n_clamped: int


def accumulate(raw, m: int, station_id: str = "") -> AccumulatedSeries:
    """Backward-looking rolling m-month sums; NaN propagates through windows."""
    raw = np.asarray(raw, dtype=float)
    if m < 1:
        raise ValueError("m must be >= 1")
    if raw.ndim != 1 or raw.size < m:
        raise ValueError("series shorter than the accumulation window")
    if m == 1:
        values = raw.copy()
    else:
        sums = np.lib.stride_tricks.sliding_window_view(raw, m).sum(axis=1)
        values = np.concatenate([np.full(m - 1, np.nan), sums])
    return AccumulatedSeries(station_id=station_id, m=m, values=values, valid_from=m - 1)


def gamma_cdf_at(fit: GammaGamFit, covariates: Dict[str, np.ndarray], x,
                 warn_extrapolation: bool = True):
    """Cumulative probability of accumulated value(s) under the fitted model."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x[np.isfinite(x)] <= 0):
        raise ValueError("accumulated precipitation must be positive")
    alpha, psi = predict(fit, covariates, warn_extrapolation=warn_extrapolation)
    return reg_lower_inc_gamma(alpha, x / psi)


def spi_transform(p: float) -> float:
    """Standard normal quantile of a cumulative probability.

    Values at or beyond the open interval are clamped to
    [1e-10, 1 - 1e-10]; clamp events are logged.
    """
    d, clamped = spi_transform_batch(np.array([p]))
    if clamped[0]:
        log.debug("cumulative probability %r clamped before quantile transform", p)
    return float(d[0])


def spi_transform_batch(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized transform; returns (index values, clamp mask)."""
    p = np.asarray(p, dtype=float)
    clamped = np.zeros(p.shape, dtype=bool)
    out = np.full(p.shape, np.nan)
    ok = np.isfinite(p)
    clamped[ok] = (p[ok] <= CLAMP_LO) | (p[ok] >= CLAMP_HI)
    safe = np.clip(p[ok], CLAMP_LO, CLAMP_HI)
    out[ok] = std_normal_quantile(safe)
    return out, clamped


def classify(d: float) -> DroughtCategory:
    """Drought category for one index value; boundaries follow the
    standard seven-band table, with +/-1.50 assigned to the moderate side."""
    if not np.isfinite(d):
        raise ValueError("index value must be finite")
    if d >= 2.0:
        return DroughtCategory.EXTREMELY_WET
    if d > 1.5:
        return DroughtCategory.VERY_WET
    if d > 1.0:
        return DroughtCategory.WET
    if d >= -1.0:
        return DroughtCategory.NORMAL
    if d >= -1.5:
        return DroughtCategory.DRY
    if d > -2.0:
        return DroughtCategory.VERY_DRY
    return DroughtCategory.EXTREMELY_DRY


def classify_batch(d: np.ndarray) -> List[Optional[DroughtCategory]]:
    return [classify(v) if np.isfinite(v) else None for v in np.asarray(d, dtype=float)]


def index_from_accumulated(
    acc: AccumulatedSeries,
    fit: GammaGamFit,
    covariates: Dict[str, np.ndarray],
    warn_extrapolation: bool = False,
) -> DroughtIndexSeries:
    """Turn an accumulated series into index values and categories.

    Entries with incomplete windows stay NaN; zero accumulations are
    excluded (counted, not Weibull-adjusted). ``covariates`` must hold
    one value per series entry for every name the fit consumes.
    """
    if fit.spec.accumulation_m != acc.m:
        raise ValueError(
            f"fit was trained at m={fit.spec.accumulation_m}, series accumulated at m={acc.m}"
        )
    values = acc.values
    usable = np.isfinite(values) & (values > 0)
    n_zero = int(np.sum(np.isfinite(values) & (values <= 0)))

    cdf = np.full(values.shape, np.nan)
    d = np.full(values.shape, np.nan)
    clamped = np.zeros(values.shape, dtype=bool)
    if usable.any():
        cov_sel = {k: np.asarray(v, dtype=float)[usable] for k, v in covariates.items()}
        cdf[usable] = gamma_cdf_at(fit, cov_sel, values[usable],
                                   warn_extrapolation=warn_extrapolation)
        d[usable], clamped[usable] = spi_transform_batch(cdf[usable])
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.info("station %s m=%d: %d probabilities clamped at the tails",
                 acc.station_id, acc.m, n_clamped)
    return DroughtIndexSeries(
        station_id=acc.station_id,
        m=acc.m,
        d_values=d,
        categories=classify_batch(d),
        accumulated=values,
        gamma_cdf=cdf,
        clamped=clamped,
        severe_event=np.where(np.isfinite(d), d < SEVERE_EVENT_THRESHOLD, False),
        n_zero_excluded=n_zero,
        n_clamped=n_clamped,
    )
