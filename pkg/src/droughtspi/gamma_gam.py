"""Space-time Gamma regression with penalized splines and REML smoothing.

The response is strictly positive (accumulated precipitation); both the
Gamma shape alpha and scale psi get their own log-link additive
predictor built from smooth terms. Coefficients for both predictors are
estimated jointly by penalized maximum likelihood (Newton with
step-halving and a ridge fallback); smoothing parameters are chosen by
maximizing a Laplace-approximate restricted likelihood over log-lambda
with the shared quasi-Newton engine, warm-starting each inner fit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special as _sp

from .errors import ExtrapolationWarning, FitError
from .numerics import ToleranceConfig, minimize
from .splines import BasisRealization, Evaluator, SmoothSpec, evaluator_from_dict, realize_smooth

__all__ = [
    "GammaGamSpec",
    "GammaGamFit",
    "gamma_log_density",
    "assemble_design",
    "penalized_loglik",
    "fit_inner",
    "reml_criterion",
    "fit",
    "predict",
    "effective_dof",
    "default_formula",
    "save_fit",
    "load_fit",
]

FIT_FORMAT = "droughtspi-gamma-fit"
FIT_FORMAT_VERSION = 1

# linear predictors beyond this are treated as a rejected step, not an error
_ETA_LIMIT = 40.0
_RANK_TOL = 1e-8


@dataclass(frozen=True)
class GammaGamSpec:
    """Model formula: smooth terms for log(psi) and log(alpha).

    Empty formulas are allowed and give an intercept-only predictor.
    """

    scale_formula: Tuple[SmoothSpec, ...]
    shape_formula: Tuple[SmoothSpec, ...]
    accumulation_m: int = 1

    def __post_init__(self):
        if self.accumulation_m < 1:
            raise ValueError("accumulation_m must be >= 1")

    def to_dict(self) -> dict:
        return {
            "scale_formula": [s.to_dict() for s in self.scale_formula],
            "shape_formula": [s.to_dict() for s in self.shape_formula],
            "accumulation_m": self.accumulation_m,
        }

    @staticmethod
    def from_dict(d: dict) -> "GammaGamSpec":
        return GammaGamSpec(
            scale_formula=tuple(SmoothSpec.from_dict(s) for s in d["scale_formula"]),
            shape_formula=tuple(SmoothSpec.from_dict(s) for s in d["shape_formula"]),
            accumulation_m=int(d["accumulation_m"]),
        )


def default_formula(tps_dim: int = 40, ccs_dim: int = 6, ncs_dim: int = 15,
                    accumulation_m: int = 1) -> GammaGamSpec:
    """Standard space-time formula.

    log psi: tensor(thin plate over lon/lat, cyclic cubic over month) plus
    a natural cubic effect of window-mean maximum temperature;
    log alpha: the same tensor term only.
    """
    tensor = SmoothSpec(
        kind="tensor_product",
        child_specs=(
            SmoothSpec(kind="thin_plate_2d", basis_dim=tps_dim, covariate_names=("lon", "lat")),
            SmoothSpec(kind="cyclic_cubic_1d", basis_dim=ccs_dim, covariate_names=("month",),
                       period=12.0),
        ),
    )
    temp = SmoothSpec(kind="cubic_regression_1d", basis_dim=ncs_dim, covariate_names=("temp",))
    return GammaGamSpec(scale_formula=(tensor, temp), shape_formula=(tensor,),
                        accumulation_m=accumulation_m)


def gamma_log_density(x, alpha, psi):
    """Log density of Gamma(shape alpha, scale psi) at x > 0."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(x <= 0) or np.any(alpha <= 0) or np.any(psi <= 0):
        raise ValueError("x, alpha and psi must all be positive")
    out = -alpha * np.log(psi) + (alpha - 1.0) * np.log(x) - x / psi - _sp.gammaln(alpha)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# design assembly


@dataclass
class _Term:
    label: str
    predictor: str  # "psi" | "alpha"
    sl: slice  # columns in the joint coefficient vector
    width: int
    penalties: List[np.ndarray]  # in block coordinates
    penalty_ids: List[int]  # indices into the global lambda vector
    evaluator: Evaluator
    null_space_dim: int


class DesignMatrices:
    """Joint realized design for both predictors plus penalty bookkeeping."""

    def __init__(self, y: np.ndarray, cov: Dict[str, np.ndarray], spec: GammaGamSpec):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or y.size == 0:
            raise ValueError("response must be a nonempty 1-d array")
        if np.any(~np.isfinite(y)) or np.any(y <= 0):
            raise ValueError("response values must be finite and > 0")
        self.y = y
        self.log_y = np.log(y)
        self.n = y.size
        self.spec = spec

        self.terms: List[_Term] = []
        self.intercept_cols: Dict[str, int] = {}
        blocks: List[np.ndarray] = []
        col = 0
        n_pen = 0
        for pred, formula in (("psi", spec.scale_formula), ("alpha", spec.shape_formula)):
            self.intercept_cols[pred] = col
            blocks.append(np.ones((self.n, 1)))
            col += 1
            for smooth in formula:
                b = realize_smooth(smooth, cov, center=True)
                ids = list(range(n_pen, n_pen + len(b.penalties)))
                n_pen += len(b.penalties)
                self.terms.append(
                    _Term(
                        label=f"{pred}:{_smooth_label(smooth)}",
                        predictor=pred,
                        sl=slice(col, col + b.width),
                        width=b.width,
                        penalties=b.penalties,
                        penalty_ids=ids,
                        evaluator=b.evaluator,
                        null_space_dim=b.null_space_dim,
                    )
                )
                blocks.append(b.design)
                col += b.width
            if pred == "psi":
                self.p_psi = col
        self.p = col
        self.n_lambda = n_pen
        design = np.column_stack(blocks)
        self.W_psi = design[:, : self.p_psi]
        self.W_alpha = design[:, self.p_psi:]

    def penalty_at(self, lam: np.ndarray) -> np.ndarray:
        """Block-diagonal penalty sum lambda_j * S_j embedded at full size."""
        lam = np.asarray(lam, dtype=float)
        if lam.size != self.n_lambda:
            raise ValueError(f"expected {self.n_lambda} smoothing parameters, got {lam.size}")
        if self.n_lambda and np.any(lam <= 0):
            raise ValueError("smoothing parameters must be positive")
        S = np.zeros((self.p, self.p))
        for term in self.terms:
            for S_block, j in zip(term.penalties, term.penalty_ids):
                S[term.sl, term.sl] += lam[j] * S_block
        return S

    def initial_beta(self) -> np.ndarray:
        mean = self.y.mean()
        var = self.y.var()
        alpha0 = max(mean * mean / max(var, 1e-12), 1e-3)
        psi0 = max(var / max(mean, 1e-12), 1e-12)
        beta = np.zeros(self.p)
        beta[self.intercept_cols["psi"]] = np.log(psi0)
        beta[self.intercept_cols["alpha"]] = np.log(alpha0)
        return beta

    def linear_predictors(self, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.W_psi @ beta[: self.p_psi], self.W_alpha @ beta[self.p_psi:]

    def loglik_derivs(self, beta: np.ndarray):
        """Log-likelihood with gradient and Hessian in coefficient space.

        Returns None when the proposed coefficients push a linear
        predictor outside the numerically safe range; the caller treats
        that as a rejected step.
        """
        eta_p, eta_a = self.linear_predictors(beta)
        if max(np.abs(eta_p).max(), np.abs(eta_a).max()) > _ETA_LIMIT:
            return None
        alpha = np.exp(eta_a)
        psi = np.exp(eta_p)
        ratio = self.y / psi
        ll = float(np.sum(-alpha * eta_p + (alpha - 1.0) * self.log_y - ratio - _sp.gammaln(alpha)))
        if not np.isfinite(ll):
            return None
        dig = _sp.psi(alpha)
        trig = _sp.polygamma(1, alpha)
        u = alpha * (self.log_y - eta_p - dig)  # d ll / d eta_alpha
        v = ratio - alpha  # d ll / d eta_psi
        grad = np.concatenate([self.W_psi.T @ v, self.W_alpha.T @ u])
        h_aa = u - alpha * alpha * trig
        h_pp = -ratio
        h_ap = -alpha
        H = np.empty((self.p, self.p))
        H[: self.p_psi, : self.p_psi] = self.W_psi.T @ (h_pp[:, None] * self.W_psi)
        H[self.p_psi:, self.p_psi:] = self.W_alpha.T @ (h_aa[:, None] * self.W_alpha)
        cross = self.W_psi.T @ (h_ap[:, None] * self.W_alpha)
        H[: self.p_psi, self.p_psi:] = cross
        H[self.p_psi:, : self.p_psi] = cross.T
        return ll, grad, H

    def loglik_only(self, beta: np.ndarray) -> Optional[float]:
        eta_p, eta_a = self.linear_predictors(beta)
        if max(np.abs(eta_p).max(), np.abs(eta_a).max()) > _ETA_LIMIT:
            return None
        alpha = np.exp(eta_a)
        psi = np.exp(eta_p)
        ll = float(
            np.sum(-alpha * eta_p + (alpha - 1.0) * self.log_y - self.y / psi - _sp.gammaln(alpha))
        )
        return ll if np.isfinite(ll) else None


def _smooth_label(s: SmoothSpec) -> str:
    if s.kind == "tensor_product":
        return "te(" + ",".join(_smooth_label(c) for c in s.child_specs) + ")"
    short = {"thin_plate_2d": "tps", "cubic_regression_1d": "ncs", "cyclic_cubic_1d": "ccs"}[s.kind]
    return f"{short}({','.join(s.covariate_names)},{s.basis_dim})"


def assemble_design(y, covariates: Dict[str, np.ndarray], spec: GammaGamSpec) -> DesignMatrices:
    """Realize all smooth terms of a spec on training data."""
    return DesignMatrices(np.asarray(y, dtype=float), covariates, spec)


def penalized_loglik(beta, lam, design: DesignMatrices) -> float:
    """Sum of Gamma log densities minus the quadratic roughness penalty."""
    beta = np.asarray(beta, dtype=float)
    ll = design.loglik_only(beta)
    if ll is None:
        return -np.inf
    S = design.penalty_at(np.asarray(lam, dtype=float))
    return ll - 0.5 * float(beta @ S @ beta)


# ---------------------------------------------------------------------------
# inner Newton fit


def fit_inner(
    lam,
    design: DesignMatrices,
    warm_start: Optional[np.ndarray] = None,
    tol: Optional[ToleranceConfig] = None,
) -> Tuple[np.ndarray, np.ndarray, dict]:
    """Maximize the penalized log-likelihood at fixed smoothing parameters.

    Full Newton with step halving; whenever the Newton matrix is not
    positive definite a growing ridge is added until it is. Returns the
    coefficient estimate, the Hessian of the negative penalized
    log-likelihood at it, and iteration diagnostics. Raises FitError if
    no parameter improvement is possible from the start.
    """
    tol = tol or ToleranceConfig()
    lam = np.asarray(lam, dtype=float)
    S = design.penalty_at(lam)
    beta = design.initial_beta() if warm_start is None else np.asarray(warm_start, dtype=float).copy()

    parts = design.loglik_derivs(beta)
    if parts is None:
        beta = design.initial_beta()
        parts = design.loglik_derivs(beta)
        if parts is None:
            raise FitError("penalized likelihood not finite at the starting coefficients")

    n_iter = 0
    for n_iter in range(1, tol.max_iter + 1):
        ll, grad_ll, H_ll = parts
        f = -(ll - 0.5 * beta @ S @ beta)
        g = -(grad_ll - S @ beta)
        # iterate two decades past the reporting tolerance so that
        # downstream criteria built on this fit are smooth in lambda
        if np.linalg.norm(g) <= 1e-8 * (1.0 + abs(f)):
            break
        H = S - H_ll  # negative penalized Hessian
        step = _solve_with_ridge(H, g)

        # backtracking on the penalized objective
        t = 1.0
        accepted = None
        for _ in range(40):
            cand = beta - t * step
            cand_parts = design.loglik_derivs(cand)
            if cand_parts is not None:
                f_cand = -(cand_parts[0] - 0.5 * cand @ S @ cand)
                if f_cand < f:
                    accepted = (cand, cand_parts)
                    break
            t *= 0.5
        if accepted is None:
            # no descent along the Newton direction: either converged to
            # machine precision or stuck; report as-is
            break
        beta, parts = accepted

    ll, grad_ll, H_ll = parts
    H = S - H_ll
    g = -(grad_ll - S @ beta)
    f = -(ll - 0.5 * beta @ S @ beta)
    grad_norm = float(np.linalg.norm(g))
    converged = grad_norm <= 1e-6 * (1.0 + abs(f))
    diagnostics = {"iterations": n_iter, "grad_norm": grad_norm, "converged": converged,
                   "penalized_loglik": -f}
    if not converged and grad_norm > 1e-3 * (1.0 + abs(f)):
        raise FitError(
            f"inner Newton did not converge: gradient norm {grad_norm:.3e} after {n_iter} iterations",
            diagnostics=diagnostics,
        )
    return beta, (H + H.T) / 2.0, diagnostics


def _solve_with_ridge(H, g):
    tau = 0.0
    base = max(np.abs(np.diag(H)).max(), 1.0)
    for _ in range(30):
        try:
            Hr = H if tau == 0.0 else H + tau * np.eye(H.shape[0])
            c, low = _cho_factor(Hr)
            return _cho_solve((c, low), g)
        except np.linalg.LinAlgError:
            tau = base * 1e-10 if tau == 0.0 else tau * 10.0
    raise FitError("Newton matrix could not be regularized to positive definite")


def _cho_factor(A):
    from scipy.linalg import cho_factor

    try:
        return cho_factor(A, lower=True)
    except Exception as exc:  # scipy raises its own LinAlgError subclass
        raise np.linalg.LinAlgError(str(exc))


def _cho_solve(cf, b):
    from scipy.linalg import cho_solve

    return cho_solve(cf, b)


def _log_pdet(A: np.ndarray) -> float:
    w = np.linalg.eigvalsh((A + A.T) / 2.0)
    top = w.max() if w.size else 0.0
    if top <= 0.0:
        return 0.0
    keep = w[w > _RANK_TOL * top]
    return float(np.sum(np.log(keep)))


def reml_criterion(
    lam,
    design: DesignMatrices,
    warm_start: Optional[np.ndarray] = None,
    tol: Optional[ToleranceConfig] = None,
    return_fit: bool = False,
):
    """Laplace-approximate restricted log-likelihood at fixed lambda.

    Larger is better. The additive constant is dropped; pseudo log
    determinants keep eigenvalues above 1e-8 of the largest.
    """
    lam = np.asarray(lam, dtype=float)
    beta_hat, H, diag = fit_inner(lam, design, warm_start=warm_start, tol=tol)
    S = design.penalty_at(lam)
    ll_p = design.loglik_only(beta_hat) - 0.5 * float(beta_hat @ S @ beta_hat)
    value = ll_p + 0.5 * _log_pdet(S) - 0.5 * _log_pdet(H)
    if return_fit:
        return value, beta_hat, H, diag
    return value


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class GammaGamFit:
    spec: GammaGamSpec
    beta: np.ndarray
    lam: np.ndarray
    penalty: np.ndarray
    hessian: np.ndarray
    edf_per_smooth: List[float]
    term_labels: List[str]
    term_widths: List[int]
    reml_value: float
    inner_converged: bool
    outer_converged: bool
    n_obs: int
    excluded_nonpositive: int
    p_psi: int
    intercept_cols: Dict[str, int]
    term_meta: List[dict] = field(default_factory=list)  # evaluator dicts + slices
    training_hull: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "format": FIT_FORMAT,
            "format_version": FIT_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "beta": self.beta.tolist(),
            "lambda": self.lam.tolist(),
            "edf_per_smooth": list(map(float, self.edf_per_smooth)),
            "term_labels": self.term_labels,
            "term_widths": self.term_widths,
            "reml_value": self.reml_value,
            "inner_converged": self.inner_converged,
            "outer_converged": self.outer_converged,
            "n_obs": self.n_obs,
            "excluded_nonpositive": self.excluded_nonpositive,
            "p_psi": self.p_psi,
            "intercept_cols": self.intercept_cols,
            "term_meta": self.term_meta,
            "training_hull": self.training_hull.tolist() if self.training_hull is not None else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "GammaGamFit":
        if d.get("format") != FIT_FORMAT:
            raise ValueError("not a gamma fit file")
        if int(d.get("format_version", -1)) != FIT_FORMAT_VERSION:
            raise ValueError(f"unsupported fit format version {d.get('format_version')}")
        return GammaGamFit(
            spec=GammaGamSpec.from_dict(d["spec"]),
            beta=np.asarray(d["beta"], dtype=float),
            lam=np.asarray(d["lambda"], dtype=float),
            penalty=np.zeros((0, 0)),
            hessian=np.zeros((0, 0)),
            edf_per_smooth=list(d["edf_per_smooth"]),
            term_labels=list(d["term_labels"]),
            term_widths=list(d["term_widths"]),
            reml_value=float(d["reml_value"]),
            inner_converged=bool(d["inner_converged"]),
            outer_converged=bool(d["outer_converged"]),
            n_obs=int(d["n_obs"]),
            excluded_nonpositive=int(d["excluded_nonpositive"]),
            p_psi=int(d["p_psi"]),
            intercept_cols={k: int(v) for k, v in d["intercept_cols"].items()},
            term_meta=d["term_meta"],
            training_hull=np.asarray(d["training_hull"]) if d["training_hull"] is not None else None,
        )


def save_fit(fit_obj: GammaGamFit, path) -> None:
    with open(path, "w") as fh:
        json.dump(fit_obj.to_dict(), fh)


def load_fit(path) -> GammaGamFit:
    with open(path) as fh:
        return GammaGamFit.from_dict(json.load(fh))


def fit(
    y,
    covariates: Dict[str, np.ndarray],
    spec: GammaGamSpec,
    tol: Optional[ToleranceConfig] = None,
    outer_tol: Optional[ToleranceConfig] = None,
    verbose: bool = False,
) -> GammaGamFit:
    """Fit the space-time Gamma model; smoothing chosen by REML.

    Nonpositive or non-finite responses are dropped (and counted) before
    fitting. The outer optimization runs on log(lambda) and warm-starts
    every inner Newton fit from the best coefficients seen so far.
    """
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(y) & (y > 0)
    excluded = int(y.size - keep.sum())
    y_fit = y[keep]
    cov_fit = {k: np.asarray(v, dtype=float)[keep] for k, v in covariates.items()}
    if y_fit.size == 0:
        raise FitError("no positive observations to fit")
    if np.allclose(y_fit, y_fit[0]):
        raise FitError("degenerate constant response; Gamma likelihood unbounded")

    design = assemble_design(y_fit, cov_fit, spec)
    tol = tol or ToleranceConfig()
    outer_tol = outer_tol or ToleranceConfig(max_iter=100)

    warm = {"beta": None}

    def negative_reml(log_lam):
        lam = np.exp(np.asarray(log_lam, dtype=float))
        try:
            value, beta_hat, _, _ = reml_criterion(
                lam, design, warm_start=warm["beta"], tol=tol, return_fit=True
            )
        except FitError:
            return np.inf
        warm["beta"] = beta_hat
        if verbose:
            print(f"  reml {value:.4f} at log-lambda {np.round(log_lam, 3)}")
        return -value

    if design.n_lambda > 0:
        x0 = np.zeros(design.n_lambda)  # lambda = 1
        f0 = negative_reml(x0)
        if not np.isfinite(f0):
            raise FitError("restricted likelihood not finite at the initial smoothing parameters")
        res = minimize(
            negative_reml,
            x0,
            cfg=outer_tol,
            grad_tol=1e-6 * max(1.0, abs(f0)),
            fd_rel_step=1e-4,
        )
        lam_hat = np.exp(res.x)
        outer_converged = res.converged
        reml_value = -res.fun
    else:
        lam_hat = np.zeros(0)
        outer_converged = True
        reml_value = np.nan

    beta_hat, H, diag = fit_inner(lam_hat, design, warm_start=warm["beta"], tol=tol)
    S = design.penalty_at(lam_hat)
    if design.n_lambda == 0:
        reml_value = design.loglik_only(beta_hat) - 0.5 * _log_pdet(H)

    edf = _edf_from_matrices(H, S, design)

    hull = None
    if "lon" in cov_fit and "lat" in cov_fit:
        hull = np.unique(np.column_stack([cov_fit["lon"], cov_fit["lat"]]), axis=0)

    return GammaGamFit(
        spec=spec,
        beta=beta_hat,
        lam=lam_hat,
        penalty=S,
        hessian=H,
        edf_per_smooth=edf,
        term_labels=[t.label for t in design.terms],
        term_widths=[t.width for t in design.terms],
        reml_value=float(reml_value),
        inner_converged=bool(diag["converged"]),
        outer_converged=bool(outer_converged),
        n_obs=int(y_fit.size),
        excluded_nonpositive=excluded,
        p_psi=design.p_psi,
        intercept_cols=dict(design.intercept_cols),
        term_meta=[
            {
                "label": t.label,
                "predictor": t.predictor,
                "start": t.sl.start,
                "stop": t.sl.stop,
                "evaluator": t.evaluator.to_dict(),
            }
            for t in design.terms
        ],
        training_hull=hull,
    )


def _edf_from_matrices(H: np.ndarray, S: np.ndarray, design: DesignMatrices) -> List[float]:
    H_unpen = H - S
    try:
        M = np.linalg.solve(H, H_unpen)
    except np.linalg.LinAlgError:
        raise FitError("penalized Hessian singular when computing effective degrees of freedom")
    d = np.diag(M)
    out = []
    for t in design.terms:
        edf = float(np.sum(d[t.sl]))
        out.append(min(max(edf, 0.0), float(t.width)))
    return out


def effective_dof(fit_obj: GammaGamFit) -> List[float]:
    """Per-smooth effective degrees of freedom of a converged fit."""
    if not fit_obj.inner_converged:
        raise FitError("fit did not converge; effective degrees of freedom undefined")
    return list(fit_obj.edf_per_smooth)


def predict(fit_obj: GammaGamFit, covariates: Dict[str, np.ndarray], warn_extrapolation: bool = True):
    """Evaluate fitted (alpha, psi) surfaces at new covariate values."""
    cov = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in covariates.items()}
    n = next(iter(cov.values())).size
    eta_psi = np.full(n, fit_obj.beta[fit_obj.intercept_cols["psi"]])
    eta_alpha = np.full(n, fit_obj.beta[fit_obj.intercept_cols["alpha"]])
    for meta in fit_obj.term_meta:
        ev = evaluator_from_dict(meta["evaluator"])
        block = ev.evaluate(cov) @ fit_obj.beta[meta["start"]: meta["stop"]]
        if meta["predictor"] == "psi":
            eta_psi += block
        else:
            eta_alpha += block
    if warn_extrapolation and fit_obj.training_hull is not None and "lon" in cov and "lat" in cov:
        _check_hull(fit_obj.training_hull, cov["lon"], cov["lat"])
    return np.exp(eta_alpha), np.exp(eta_psi)


def _check_hull(points: np.ndarray, lon: np.ndarray, lat: np.ndarray) -> None:
    if points.shape[0] < 3:
        return
    try:
        from scipy.spatial import Delaunay

        tri = Delaunay(points)
    except Exception:
        return
    query = np.column_stack([lon, lat])
    if np.any(tri.find_simplex(query) < 0):
        warnings.warn(
            "some prediction locations fall outside the convex hull of the "
            "training stations; treat those values as extrapolation",
            ExtrapolationWarning,
            stacklevel=3,
        )
