"""Extreme drought/wet risk models for per-location index samples.

Two full-range distributions are fitted to the drought-index values of a
station: a three-piece mixture (generalized Pareto lower tail, Gaussian
bulk, generalized Pareto upper tail, joined at fixed empirical
quantiles) and a bulk-and-tails family (Student-t CDF of a monotone warp
whose two shape parameters control tail heaviness/boundedness without
any thresholds). Drought risk is the fitted CDF at a critical index
value, -2 by default.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import FitError
from .numerics import ToleranceConfig, minimize, std_normal_cdf, student_t_cdf, student_t_pdf

__all__ = [
    "GpNgpParams",
    "BatsParams",
    "RiskEstimate",
    "gpd_cdf",
    "gpd_log_pdf",
    "gpngp_cdf",
    "gpngp_log_likelihood",
    "gpngp_fit",
    "upsilon",
    "upsilon_inv",
    "bats_inner_cdf",
    "bats_support",
    "bats_cdf",
    "bats_log_density",
    "bats_fit",
    "drought_risk",
    "threshold_sweep",
]

_XI_EPS = 1e-8
_GAMMA_EPS = 1e-8
_MIN_TAIL_POINTS = 10


@dataclass(frozen=True)
class GpNgpParams:
    """Gaussian bulk with generalized Pareto tails beyond fixed thresholds."""

    mu: float
    sigma: float
    xi_l: float
    beta_l: float
    xi_r: float
    beta_r: float
    d_l: float
    d_r: float

    def __post_init__(self):
        if not (self.sigma > 0 and self.beta_l > 0 and self.beta_r > 0):
            raise ValueError("sigma, beta_l and beta_r must be positive")
        if not self.d_l < self.d_r:
            raise ValueError("left threshold must lie below the right threshold")


@dataclass(frozen=True)
class BatsParams:
    """Bulk-and-tails parameters; index 1 is the lower tail, 2 the upper."""

    alpha1: float
    alpha2: float
    beta1: float
    beta2: float
    gamma1: float
    gamma2: float
    nu: float

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta2 > 0 and self.nu > 0):
            raise ValueError("beta1, beta2 and nu must be positive")
        L, U = bats_support(self)
        if not L < U:
            raise ValueError("support degenerate: lower endpoint not below upper endpoint")


@dataclass(frozen=True)
class RiskEstimate:
    station_id: str
    model: str  # "gpngp" | "bats"
    u_c: float
    risk: float

    def __post_init__(self):
        if not 0.0 <= self.risk <= 1.0:
            raise ValueError("risk must be a probability")


# ---------------------------------------------------------------------------
# generalized Pareto pieces


def gpd_cdf(y, xi: float, beta: float, threshold: float):
    """CDF of exceedances above ``threshold`` with shape xi and scale beta."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    y = np.asarray(y, dtype=float)
    w = y - threshold
    if np.any(w < 0):
        raise ValueError("y below the threshold")
    if abs(xi) < _XI_EPS:
        out = -np.expm1(-w / beta)
    else:
        t = 1.0 + xi * w / beta
        if np.any(t <= 0):
            raise ValueError("y beyond the upper support endpoint for xi < 0")
        out = 1.0 - t ** (-1.0 / xi)
    return float(out) if out.ndim == 0 else out


def gpd_log_pdf(y, xi: float, beta: float, threshold: float):
    y = np.asarray(y, dtype=float)
    w = y - threshold
    out = np.full(w.shape, -np.inf)
    ok = w >= 0
    if abs(xi) < _XI_EPS:
        out[ok] = -np.log(beta) - w[ok] / beta
    else:
        t = 1.0 + xi * w[ok] / beta
        good = t > 0
        vals = np.full(t.shape, -np.inf)
        vals[good] = -np.log(beta) - (1.0 / xi + 1.0) * np.log(t[good])
        out[ok] = vals
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# GPD - Normal - GPD mixture


def gpngp_cdf(y, p: GpNgpParams):
    """Piecewise mixture CDF; continuous at both thresholds by construction."""
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    out = np.empty(y.shape)

    z = lambda t: (t - p.mu) / p.sigma
    lo_w = std_normal_cdf(z(p.d_l))
    hi_w = std_normal_cdf(z(p.d_r))

    lower = y <= p.d_l
    upper = y >= p.d_r
    mid = ~(lower | upper)
    out[mid] = std_normal_cdf(z(y[mid]))
    if lower.any():
        g = np.asarray(gpd_cdf(-y[lower], p.xi_l, p.beta_l, -p.d_l))
        out[lower] = lo_w * (1.0 - g)
    if upper.any():
        g = np.asarray(gpd_cdf(y[upper], p.xi_r, p.beta_r, p.d_r))
        out[upper] = hi_w + (1.0 - hi_w) * g
    return float(out[0]) if scalar else out


def gpngp_log_likelihood(sample: np.ndarray, p: GpNgpParams) -> float:
    """Joint log-likelihood of the three-piece model (tail-mass weighted)."""
    x = np.asarray(sample, dtype=float)
    z_l = (p.d_l - p.mu) / p.sigma
    z_r = (p.d_r - p.mu) / p.sigma
    lo_w = std_normal_cdf(z_l)
    hi_w = std_normal_cdf(z_r)
    if lo_w <= 0.0 or hi_w >= 1.0:
        return -np.inf

    lower = x <= p.d_l
    upper = x >= p.d_r
    mid = ~(lower | upper)

    ll = 0.0
    if mid.any():
        zm = (x[mid] - p.mu) / p.sigma
        ll += float(np.sum(-np.log(p.sigma) - 0.5 * np.log(2 * np.pi) - 0.5 * zm * zm))
    if lower.any():
        ll += lower.sum() * np.log(lo_w)
        ll += float(np.sum(gpd_log_pdf(-x[lower], p.xi_l, p.beta_l, -p.d_l)))
    if upper.any():
        ll += upper.sum() * np.log1p(-hi_w)
        ll += float(np.sum(gpd_log_pdf(x[upper], p.xi_r, p.beta_r, p.d_r)))
    return ll if np.isfinite(ll) else -np.inf


def _shape_barrier(xi: float, lo: float = -0.5, hi: float = 1.0) -> float:
    # smooth penalty activating only outside the regular-MLE shape range
    over = max(0.0, xi - hi)
    under = max(0.0, lo - xi)
    return 1e4 * (over * over + under * under)


def gpngp_fit(
    sample,
    q_lo: float = 0.10,
    q_hi: float = 0.90,
    tol: Optional[ToleranceConfig] = None,
) -> GpNgpParams:
    """Fit the mixture with thresholds fixed at empirical quantiles.

    The thresholds are inputs, never estimated. Fits with fewer than 10
    points in either tail are refused as unstable.
    """
    x = np.asarray(sample, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 50:
        raise FitError(f"need at least 50 observations, got {x.size}")
    if not 0.0 < q_lo < q_hi < 1.0:
        raise ValueError("quantile levels must satisfy 0 < q_lo < q_hi < 1")
    d_l = float(np.quantile(x, q_lo))
    d_r = float(np.quantile(x, q_hi))
    n_lo = int(np.sum(x <= d_l))
    n_hi = int(np.sum(x >= d_r))
    if min(n_lo, n_hi) < _MIN_TAIL_POINTS:
        raise FitError(
            f"unstable fit: only {n_lo} lower / {n_hi} upper tail points beyond the thresholds"
        )

    mid = x[(x > d_l) & (x < d_r)]
    mu0 = float(mid.mean()) if mid.size else float(x.mean())
    sigma0 = float(mid.std()) if mid.size > 1 else float(x.std())
    sigma0 = max(sigma0, 1e-3)
    beta_l0 = max(float(np.mean(d_l - x[x <= d_l])), 1e-3)
    beta_r0 = max(float(np.mean(x[x >= d_r] - d_r)), 1e-3)
    theta0 = np.array([mu0, np.log(sigma0), 0.1, np.log(beta_l0), 0.1, np.log(beta_r0)])

    def unpack(theta):
        mu, log_sigma, xi_l, log_beta_l, xi_r, log_beta_r = theta
        return GpNgpParams(
            mu=float(mu), sigma=float(np.exp(log_sigma)),
            xi_l=float(xi_l), beta_l=float(np.exp(log_beta_l)),
            xi_r=float(xi_r), beta_r=float(np.exp(log_beta_r)),
            d_l=d_l, d_r=d_r,
        )

    def objective(theta):
        if np.abs(theta).max() > 50:
            return np.inf
        p = unpack(theta)
        ll = gpngp_log_likelihood(x, p)
        if not np.isfinite(ll):
            return np.inf
        return -ll + _shape_barrier(p.xi_l) + _shape_barrier(p.xi_r)

    res = minimize(objective, theta0, cfg=tol or ToleranceConfig(max_iter=500))
    if not np.isfinite(res.fun):
        raise FitError("mixture likelihood not finite at the optimizer result")
    return unpack(res.x)


# ---------------------------------------------------------------------------
# bulk-and-tails


def upsilon(y):
    """log(1 + e^y), overflow-safe; tends to 0 at -inf and to y at +inf."""
    y = np.asarray(y, dtype=float)
    out = np.logaddexp(0.0, y)
    return float(out) if out.ndim == 0 else out


def upsilon_inv(z):
    """Inverse of upsilon: log(e^z - 1) for z > 0, underflow-safe."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("upsilon_inv requires z > 0")
    small = z < 0.6931471805599453  # below log 2 use expm1 directly
    out = np.empty(z.shape)
    out[small] = np.log(np.expm1(z[small]))
    out[~small] = z[~small] + np.log1p(-np.exp(-z[~small]))
    return float(out) if out.ndim == 0 else out


def _log_bracket(z, gamma):
    """log of [1 + gamma*upsilon(z)]^(1/gamma), with the gamma->0 limit."""
    u = upsilon(z)
    if abs(gamma) < _GAMMA_EPS:
        return u
    base = 1.0 + gamma * u
    base = np.clip(base, 0.0, None)
    with np.errstate(divide="ignore"):
        return np.log(base) / gamma


def bats_support(p: BatsParams) -> Tuple[float, float]:
    """Interior support (L, U); infinite on any side with nonnegative shape."""
    if p.gamma1 < -_GAMMA_EPS:
        L = p.alpha1 - p.beta1 * upsilon_inv(-1.0 / p.gamma1)
    else:
        L = -np.inf
    if p.gamma2 < -_GAMMA_EPS:
        U = p.alpha2 + p.beta2 * upsilon_inv(-1.0 / p.gamma2)
    else:
        U = np.inf
    return float(L), float(U)


def bats_inner_cdf(y, p: BatsParams):
    """The monotone warp fed to the Student-t CDF; defined on (L, U)."""
    L, U = bats_support(p)
    y = np.asarray(y, dtype=float)
    if np.any(y <= L) or np.any(y >= U):
        raise ValueError("y outside the interior support")
    z2 = (y - p.alpha2) / p.beta2
    z1 = (p.alpha1 - y) / p.beta1
    with np.errstate(over="ignore"):
        upper = np.exp(np.minimum(_log_bracket(z2, p.gamma2), 700.0))
        lower = np.exp(np.minimum(_log_bracket(z1, p.gamma1), 700.0))
    out = upper - lower
    return float(out) if out.ndim == 0 else out


def bats_cdf(y, p: BatsParams):
    """Distribution function on all of R (0 below L, 1 above U)."""
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    L, U = bats_support(p)
    out = np.empty(y.shape)
    below = y <= L
    above = y >= U
    inside = ~(below | above)
    out[below] = 0.0
    out[above] = 1.0
    if inside.any():
        out[inside] = student_t_cdf(bats_inner_cdf(y[inside], p), p.nu)
    return float(out[0]) if scalar else out


def _log_bracket_deriv(z, gamma, beta):
    """log of (1/beta) [1 + g*ups(z)]^(1/g - 1) * sigmoid(z), stable in z."""
    log_sig = -upsilon(-z)  # log sigmoid(z)
    if abs(gamma) < _GAMMA_EPS:
        return -np.log(beta) + upsilon(z) + log_sig
    base = np.clip(1.0 + gamma * upsilon(z), 0.0, None)
    with np.errstate(divide="ignore"):
        return -np.log(beta) + (1.0 / gamma - 1.0) * np.log(base) + log_sig


def bats_log_density(y, p: BatsParams):
    """Log density; -inf outside the interior support."""
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    L, U = bats_support(p)
    out = np.full(y.shape, -np.inf)
    inside = (y > L) & (y < U)
    if inside.any():
        yi = y[inside]
        h = np.atleast_1d(bats_inner_cdf(yi, p))
        log_t = np.log(student_t_pdf(h, p.nu))
        log_h1 = np.logaddexp(
            _log_bracket_deriv((yi - p.alpha2) / p.beta2, p.gamma2, p.beta2),
            _log_bracket_deriv((p.alpha1 - yi) / p.beta1, p.gamma1, p.beta1),
        )
        out[inside] = log_t + log_h1
    return float(out[0]) if scalar else out


def bats_fit(sample, n_starts: int = 5, seed: int = 0,
             tol: Optional[ToleranceConfig] = None) -> BatsParams:
    """Maximum likelihood fit from several perturbed moment-based starts.

    Proposals whose support excludes any observation are rejected inside
    the optimizer. The best converged start wins; identical data and
    seed give identical parameters.
    """
    x = np.asarray(sample, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 100:
        raise FitError(f"need at least 100 observations, got {x.size}")

    q10, q25, q75, q90 = np.quantile(x, [0.10, 0.25, 0.75, 0.90])
    beta0 = max(float(q75 - q25) / 2.0, 1e-2)
    base = np.array([q10, q90, np.log(beta0), np.log(beta0), 0.1, 0.1, np.log(5.0)])

    def unpack(theta):
        a1, a2, lb1, lb2, g1, g2, lnu = theta
        return BatsParams(
            alpha1=float(a1), alpha2=float(a2),
            beta1=float(np.exp(lb1)), beta2=float(np.exp(lb2)),
            gamma1=float(g1), gamma2=float(g2), nu=float(np.exp(lnu)),
        )

    def objective(theta):
        if np.abs(theta).max() > 50:
            return np.inf
        try:
            p = unpack(theta)
        except ValueError:
            return np.inf
        ll = bats_log_density(x, p)
        total = float(np.sum(ll))
        return -total if np.isfinite(total) else np.inf

    rng = np.random.default_rng(seed)
    best = None
    failures = []
    cfg = tol or ToleranceConfig(max_iter=500)
    for k in range(n_starts):
        theta0 = base if k == 0 else base + rng.normal(scale=0.15, size=base.size)
        if not np.isfinite(objective(theta0)):
            failures.append({"start": k, "reason": "infeasible start"})
            continue
        res = minimize(objective, theta0, cfg=cfg)
        if np.isfinite(res.fun):
            if best is None or res.fun < best[0]:
                best = (res.fun, res.x)
        else:
            failures.append({"start": k, "reason": res.message})
    if best is None:
        raise FitError("all starts failed", diagnostics={"starts": failures})
    return unpack(best[1])


# ---------------------------------------------------------------------------
# risk


def drought_risk(
    model_cdf: Callable[[float], float],
    u_c: float = -2.0,
    station_id: str = "",
    model: str = "",
) -> RiskEstimate:
    """Probability mass below the critical index threshold under a fitted CDF."""
    risk = float(model_cdf(u_c))
    return RiskEstimate(station_id=station_id, model=model, u_c=float(u_c),
                        risk=min(max(risk, 0.0), 1.0))


def threshold_sweep(sample, q_pairs: Sequence[Tuple[float, float]],
                    u_c: float = -2.0) -> List[dict]:
    """Refit the mixture across threshold choices; shows tail sensitivity.

    Returns one record per (q_lo, q_hi) pair with the fitted tail shapes
    and the implied risk; pairs whose fit fails are reported with NaNs.
    """
    out = []
    for q_lo, q_hi in q_pairs:
        rec = {"q_lo": float(q_lo), "q_hi": float(q_hi),
               "xi_l": np.nan, "xi_r": np.nan, "risk": np.nan}
        try:
            p = gpngp_fit(sample, q_lo=q_lo, q_hi=q_hi)
            rec.update(xi_l=p.xi_l, xi_r=p.xi_r,
                       risk=drought_risk(lambda u: gpngp_cdf(u, p), u_c).risk)
        except FitError:
            pass
        out.append(rec)
    return out
