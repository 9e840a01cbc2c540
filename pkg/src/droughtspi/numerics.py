"""Scalar special functions and the shared quasi-Newton minimizer.

Every statistical module in the package funnels its special-function and
optimization needs through here so that domain validation and convergence
reporting are uniform. The heavy lifting is delegated to scipy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize as _opt
from scipy import special as _sp

__all__ = [
    "ToleranceConfig",
    "MinimizeResult",
    "log_gamma_fn",
    "reg_lower_inc_gamma",
    "std_normal_cdf",
    "std_normal_quantile",
    "student_t_cdf",
    "student_t_pdf",
    "minimize",
]

# Objective values at rejected (non-finite) points are replaced by this so
# the line search backs off instead of crashing.
_REJECT = 1e12


@dataclass(frozen=True)
class ToleranceConfig:
    """Iteration tolerances shared by all likelihood optimizations."""

    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    fun: float
    converged: bool
    n_iter: int
    grad_norm: float
    message: str


def _validated(x, name: str, positive: bool = False, nonneg: bool = False):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    if positive and np.any(arr <= 0.0):
        raise ValueError(f"{name} must be > 0")
    if nonneg and np.any(arr < 0.0):
        raise ValueError(f"{name} must be >= 0")
    return arr


def _like_input(result, template):
    if np.isscalar(template) or np.ndim(template) == 0:
        return float(result)
    return np.asarray(result, dtype=float)


def log_gamma_fn(x):
    """Natural log of the complete Gamma function, x > 0."""
    arr = _validated(x, "x", positive=True)
    return _like_input(_sp.gammaln(arr), x)


def reg_lower_inc_gamma(a, z):
    """Regularized lower incomplete Gamma function P(a, z) in [0, 1].

    Scipy evaluates this with the usual series expansion below the
    z ~ a + 1 crossover and a continued fraction above it, which keeps the
    absolute error comfortably under 1e-12 on the ranges used here.
    """
    a_arr = _validated(a, "a", positive=True)
    z_arr = _validated(z, "z", nonneg=True)
    return _like_input(_sp.gammainc(a_arr, z_arr), z if np.ndim(z) else a)


def std_normal_cdf(x):
    """Standard normal CDF."""
    arr = _validated(x, "x")
    return _like_input(_sp.ndtr(arr), x)


def std_normal_quantile(p):
    """Inverse of the standard normal CDF for p in (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("p must lie strictly inside (0, 1)")
    return _like_input(_sp.ndtri(arr), p)


def student_t_cdf(x, nu):
    """Student's t CDF with nu > 0 degrees of freedom."""
    arr = _validated(x, "x")
    nu = float(_validated(nu, "nu", positive=True))
    return _like_input(_sp.stdtr(nu, arr), x)


def student_t_pdf(x, nu):
    """Student's t density with nu > 0 degrees of freedom."""
    arr = _validated(x, "x")
    nu = float(_validated(nu, "nu", positive=True))
    log_norm = _sp.gammaln((nu + 1.0) / 2.0) - _sp.gammaln(nu / 2.0) - 0.5 * np.log(nu * np.pi)
    log_pdf = log_norm - 0.5 * (nu + 1.0) * np.log1p(arr * arr / nu)
    return _like_input(np.exp(log_pdf), x)


def minimize(
    objective: Callable[[np.ndarray], float],
    x0: Sequence[float],
    cfg: Optional[ToleranceConfig] = None,
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    grad_tol: Optional[float] = None,
    fd_rel_step: Optional[float] = None,
) -> MinimizeResult:
    """Unconstrained smooth minimization via BFGS.

    Gradients default to central finite differences (step ~ cbrt(eps),
    scaled per coordinate); pass ``grad`` for analytic ones. Non-finite
    objective values away from the start are treated as rejections, not
    errors. Convergence means the final gradient norm is below
    1e-6 * max(1, |f|); anything else is reported, never raised.
    """
    if cfg is None:
        cfg = ToleranceConfig()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    f0 = float(objective(x0))
    if not np.isfinite(f0):
        raise ValueError("objective is non-finite at the starting point")

    def guarded(x):
        val = float(objective(x))
        return val if np.isfinite(val) else _REJECT

    # scipy's gtol is an inf-norm test; ask for one spare decade so the
    # 2-norm convergence check below has headroom
    options = {"gtol": 0.1 * (grad_tol if grad_tol is not None else 1e-7), "maxiter": cfg.max_iter}
    if fd_rel_step is not None and grad is None:
        # noisy objectives (e.g. ones containing an inner optimization)
        # need a wider difference step than the smooth-function default
        options["finite_diff_rel_step"] = fd_rel_step
    res = _opt.minimize(
        guarded,
        x0,
        jac=grad if grad is not None else "3-point",
        method="BFGS",
        options=options,
    )
    grad_norm = float(np.linalg.norm(np.atleast_1d(res.jac))) if res.jac is not None else np.inf
    fun = float(res.fun)
    converged = bool(np.isfinite(fun)) and grad_norm <= 1e-6 * max(1.0, abs(fun))
    return MinimizeResult(
        x=np.asarray(res.x, dtype=float),
        fun=fun,
        converged=converged,
        n_iter=int(res.nit),
        grad_norm=grad_norm,
        message=str(res.message),
    )
