"""Spline basis and penalty construction for the additive Gamma model.

Three basis families are provided: low-rank thin plate bases for smooth
2-d spatial effects, natural cubic regression splines for 1-d covariate
effects, and cyclic cubic splines for seasonal effects that must join up
smoothly across the year boundary. Tensor products combine them into
space-time interaction smooths. Every realized basis carries its design
block, one or more positive semidefinite curvature penalties, and an
evaluator that can rebuild design rows for new covariate values (also
after serialization, so fitted models reload without refitting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as _la

__all__ = [
    "SmoothSpec",
    "BasisRealization",
    "build_cyclic_cubic",
    "build_cubic_regression",
    "build_thin_plate",
    "build_tensor_product",
    "apply_centering",
    "realize_smooth",
    "evaluator_from_dict",
]

_LEAF_KINDS = ("thin_plate_2d", "cubic_regression_1d", "cyclic_cubic_1d")


@dataclass(frozen=True)
class SmoothSpec:
    """Declaration of one smooth term before data are seen.

    ``covariate_names`` name the columns the term consumes: two for a
    thin plate smooth, one for the 1-d bases. Tensor terms list child
    specs instead and leave ``basis_dim`` unused.
    """

    kind: str
    basis_dim: int = 0
    covariate_names: Tuple[str, ...] = ()
    child_specs: Tuple["SmoothSpec", ...] = ()
    period: Optional[float] = None

    def __post_init__(self):
        if self.kind == "tensor_product":
            if len(self.child_specs) < 2:
                raise ValueError("tensor_product needs at least 2 child specs")
        elif self.kind in _LEAF_KINDS:
            if self.basis_dim < 3:
                raise ValueError("basis_dim must be >= 3")
            if self.kind == "cyclic_cubic_1d" and self.period is None:
                raise ValueError("cyclic basis requires a declared period")
        else:
            raise ValueError(f"unknown smooth kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "basis_dim": self.basis_dim,
            "covariate_names": list(self.covariate_names),
            "child_specs": [c.to_dict() for c in self.child_specs],
            "period": self.period,
        }

    @staticmethod
    def from_dict(d: dict) -> "SmoothSpec":
        return SmoothSpec(
            kind=d["kind"],
            basis_dim=int(d["basis_dim"]),
            covariate_names=tuple(d["covariate_names"]),
            child_specs=tuple(SmoothSpec.from_dict(c) for c in d["child_specs"]),
            period=d["period"],
        )


class Evaluator:
    """Rebuilds design rows for new covariate values."""

    def evaluate(self, cov: Dict[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class BasisRealization:
    """A realized smooth: design block, penalties, and evaluation metadata."""

    design: np.ndarray
    penalties: List[np.ndarray]
    null_space_dim: int
    evaluator: Evaluator
    centering_constraint: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return self.design.shape[1]

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]


# ---------------------------------------------------------------------------
# cubic-spline building blocks
#
# An interpolating cubic spline through knot values beta with knot second
# derivatives delta evaluates, on [t_j, t_{j+1}] with h = t_{j+1} - t_j, as
#     a-(x) beta_j + a+(x) beta_{j+1} + c-(x) delta_j + c+(x) delta_{j+1},
# and first-derivative continuity at each knot ties delta = B^{-1} D beta,
# giving the exact curvature penalty  integral f''^2 = beta' D' B^{-1} D beta.


def _hermite_weights(x, t_lo, t_hi):
    h = t_hi - t_lo
    am = (t_hi - x) / h
    ap = (x - t_lo) / h
    cm = ((t_hi - x) ** 3 / h - h * (t_hi - x)) / 6.0
    cp = ((x - t_lo) ** 3 / h - h * (x - t_lo)) / 6.0
    return am, ap, cm, cp


def build_cyclic_cubic(x, D: int, period: float, knots=None) -> "BasisRealization":
    """Cyclic cubic regression spline basis with ``D`` free coefficients.

    Knots are D+1 points spanning one period (equally spaced unless
    supplied); the value and first two derivatives at the two ends of the
    period are identical by construction. Inputs are interpreted modulo
    the period. The penalty is the integrated squared second derivative,
    whose null space is the constant function only.
    """
    if D < 4:
        raise ValueError("cyclic cubic basis needs D >= 4")
    if not period > 0:
        raise ValueError("period must be positive")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("covariate values must be finite")
    if knots is None:
        knots = np.linspace(0.0, period, D + 1)
    else:
        knots = np.asarray(knots, dtype=float)
        if knots.size != D + 1 or knots[0] != 0.0 or knots[-1] != period:
            raise ValueError("cyclic knots must be D+1 values from 0 to period")
    ev = _CyclicCubicEval(knots=knots, period=float(period), F=_cyclic_F(knots), name=None)
    design = ev.rows(x)
    penalty = _cyclic_penalty(knots)
    return BasisRealization(design, [penalty], null_space_dim=1, evaluator=ev)


def _cyclic_system(knots):
    h = np.diff(knots)  # D interval widths, wrapping D -> 0
    D = h.size
    B = np.zeros((D, D))
    Dm = np.zeros((D, D))
    for j in range(D):
        hm, hj = h[j - 1], h[j]
        B[j, j] = (hm + hj) / 3.0
        B[j, (j - 1) % D] += hm / 6.0
        B[j, (j + 1) % D] += hj / 6.0
        Dm[j, j] = -(1.0 / hm + 1.0 / hj)
        Dm[j, (j - 1) % D] += 1.0 / hm
        Dm[j, (j + 1) % D] += 1.0 / hj
    return B, Dm


def _cyclic_F(knots):
    B, Dm = _cyclic_system(knots)
    return _la.solve(B, Dm)


def _cyclic_penalty(knots):
    B, Dm = _cyclic_system(knots)
    S = Dm.T @ _la.solve(B, Dm)
    return (S + S.T) / 2.0


def build_cubic_regression(x, D: int) -> "BasisRealization":
    """Natural cubic regression spline with knots at quantiles of unique x.

    Natural boundary conditions: zero second derivative at the outer
    knots, hence linear extrapolation beyond them. The curvature penalty
    has rank D-2; constants and linear trends are unpenalized.
    """
    if D < 3:
        raise ValueError("cubic regression basis needs D >= 3")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("covariate values must be finite")
    uniq = np.unique(x)
    if uniq.size < D:
        raise ValueError(f"need at least D={D} unique covariate values, got {uniq.size}")
    knots = np.quantile(uniq, np.linspace(0.0, 1.0, D))
    knots = np.unique(knots)
    if knots.size < D:
        raise ValueError("quantile knots collapsed; too few distinct covariate values")
    ev = _CubicRegressionEval(knots=knots, F=_natural_F(knots), name=None)
    design = ev.rows(x)
    penalty = _natural_penalty(knots)
    return BasisRealization(design, [penalty], null_space_dim=2, evaluator=ev)


def _natural_system(knots):
    h = np.diff(knots)
    D = knots.size
    n_int = D - 2
    B = np.zeros((n_int, n_int))
    Dm = np.zeros((n_int, D))
    for i in range(n_int):
        B[i, i] = (h[i] + h[i + 1]) / 3.0
        if i + 1 < n_int:
            B[i, i + 1] = h[i + 1] / 6.0
            B[i + 1, i] = h[i + 1] / 6.0
        Dm[i, i] = 1.0 / h[i]
        Dm[i, i + 1] = -(1.0 / h[i] + 1.0 / h[i + 1])
        Dm[i, i + 2] = 1.0 / h[i + 1]
    return B, Dm


def _natural_F(knots):
    B, Dm = _natural_system(knots)
    F = np.zeros((knots.size, knots.size))
    F[1:-1, :] = _la.solve(B, Dm)
    return F


def _natural_penalty(knots):
    B, Dm = _natural_system(knots)
    S = Dm.T @ _la.solve(B, Dm)
    return (S + S.T) / 2.0


def build_thin_plate(coords, D: int) -> "BasisRealization":
    """Low-rank 2-d thin plate basis of total width ``D``.

    The radial kernel r^2 log r is evaluated between the distinct input
    locations, projected orthogonal to the plane {1, x, y}, and truncated
    to its D-3 leading eigenvectors. Those give D-3 penalized columns
    with a diagonal PSD penalty; the three unpenalized polynomial columns
    complete the basis, so the penalty null space has dimension 3 and
    planar surfaces are never shrunk.
    """
    if D < 3:
        raise ValueError("thin plate basis needs D >= 3")
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError("coords must be an (n, 2) array")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    knots = np.unique(coords, axis=0)
    if knots.shape[0] < max(D, 3):
        raise ValueError(
            f"need at least {max(D, 3)} distinct locations for D={D}, got {knots.shape[0]}"
        )

    shift = knots.mean(axis=0)
    scale = float(np.abs(knots - shift).max())
    if scale == 0.0:
        raise ValueError("all coordinates coincide")
    kn = (knots - shift) / scale

    E = _tps_kernel_matrix(kn, kn)
    T = np.column_stack([np.ones(kn.shape[0]), kn[:, 0], kn[:, 1]])
    # project the kernel orthogonal to the polynomial span; on that
    # subspace the thin plate energy is nonnegative
    Q, _ = np.linalg.qr(T)
    M = E - Q @ (Q.T @ E)
    M = M - (M @ Q) @ Q.T
    M = (M + M.T) / 2.0
    eigval, eigvec = np.linalg.eigh(M)
    order = np.argsort(eigval)[::-1]
    k = D - 3
    W = eigvec[:, order[:k]]
    gamma = np.clip(eigval[order[:k]], 0.0, None)

    ev = _ThinPlateEval(shift=shift, scale=scale, knots=kn, W=W, names=None)
    design = ev.rows(coords)
    penalty = np.zeros((D, D))
    penalty[:k, :k] = np.diag(gamma)
    return BasisRealization(design, [penalty], null_space_dim=3, evaluator=ev)


def _tps_kernel_matrix(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    out = np.zeros_like(d2)
    pos = d2 > 0
    out[pos] = 0.5 * d2[pos] * np.log(d2[pos])  # r^2 log r
    return out


def build_tensor_product(children: Sequence[BasisRealization]) -> "BasisRealization":
    """Tensor product smooth from two or more realized marginal bases.

    The design is the row-wise Kronecker product of the child designs
    (leftmost child varies slowest). Each child contributes one penalty
    block, its own penalty Kronecker-expanded with identity factors for
    the other directions, so each direction keeps its own smoothing
    parameter.
    """
    children = list(children)
    if len(children) < 2:
        raise ValueError("tensor product needs at least 2 children")
    n = children[0].n_obs
    if any(c.n_obs != n for c in children):
        raise ValueError("children must share the same observation count")

    design = children[0].design
    for c in children[1:]:
        design = (design[:, :, None] * c.design[:, None, :]).reshape(n, -1)

    widths = [c.width for c in children]
    penalties: List[np.ndarray] = []
    for idx, c in enumerate(children):
        for S in c.penalties:
            lifted = np.ones((1, 1))
            for j, w in enumerate(widths):
                factor = S if j == idx else np.eye(w)
                lifted = np.kron(lifted, factor)
            penalties.append(lifted)

    null_dim = int(np.prod([c.null_space_dim for c in children]))
    ev = _TensorEval(children=[c.evaluator for c in children])
    return BasisRealization(design, penalties, null_space_dim=null_dim, evaluator=ev)


def apply_centering(b: BasisRealization, tol: float = 1e-10) -> "BasisRealization":
    """Absorb one sum-to-zero constraint into the basis.

    Reparameterizes so the design columns sum to zero, dropping one
    coefficient; the penalties are transformed congruently. Already
    centered bases pass through unchanged, so the operation is
    idempotent on widths.
    """
    c = b.design.sum(axis=0)
    norm = np.linalg.norm(c)
    if norm <= tol * max(1.0, b.n_obs):
        return b
    Z = _la.null_space(c.reshape(1, -1) / norm)
    design = b.design @ Z
    penalties = [(Z.T @ S @ Z + (Z.T @ S @ Z).T) / 2.0 for S in b.penalties]
    null_dim = _null_dim(penalties)
    ev = _CenteredEval(inner=b.evaluator, Z=Z)
    return BasisRealization(
        design, penalties, null_space_dim=null_dim, evaluator=ev, centering_constraint=c
    )


def _null_dim(penalties: Sequence[np.ndarray]) -> int:
    total = np.sum(penalties, axis=0)
    w = np.linalg.eigvalsh((total + total.T) / 2.0)
    top = max(w.max(), 0.0)
    if top == 0.0:
        return total.shape[0]
    return int(np.sum(w <= 1e-10 * top))


def realize_smooth(spec: SmoothSpec, cov: Dict[str, np.ndarray], center: bool = True) -> BasisRealization:
    """Realize a SmoothSpec on named covariate arrays, centering by default."""
    b = _realize(spec, cov)
    return apply_centering(b) if center else b


def _realize(spec: SmoothSpec, cov: Dict[str, np.ndarray]) -> BasisRealization:
    if spec.kind == "tensor_product":
        children = [_realize(c, cov) for c in spec.child_specs]
        return build_tensor_product(children)
    if spec.kind == "thin_plate_2d":
        xname, yname = spec.covariate_names
        coords = np.column_stack([cov[xname], cov[yname]])
        b = build_thin_plate(coords, spec.basis_dim)
        b.evaluator.names = (xname, yname)
        return b
    if spec.kind == "cubic_regression_1d":
        (name,) = spec.covariate_names
        b = build_cubic_regression(cov[name], spec.basis_dim)
        b.evaluator.name = name
        return b
    if spec.kind == "cyclic_cubic_1d":
        (name,) = spec.covariate_names
        b = build_cyclic_cubic(cov[name], spec.basis_dim, spec.period)
        b.evaluator.name = name
        return b
    raise ValueError(f"unknown smooth kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# evaluators


@dataclass
class _CyclicCubicEval(Evaluator):
    knots: np.ndarray
    period: float
    F: np.ndarray
    name: Optional[str]

    def rows(self, x: np.ndarray) -> np.ndarray:
        x = np.mod(np.asarray(x, dtype=float), self.period)
        t = self.knots
        D = t.size - 1
        j = np.clip(np.searchsorted(t, x, side="right") - 1, 0, D - 1)
        am, ap, cm, cp = _hermite_weights(x, t[j], t[j + 1])
        jn = (j + 1) % D
        rows = np.zeros((x.size, D))
        np.add.at(rows, (np.arange(x.size), j), am)
        np.add.at(rows, (np.arange(x.size), jn), ap)
        rows += cm[:, None] * self.F[j, :] + cp[:, None] * self.F[jn, :]
        return rows

    def evaluate(self, cov):
        return self.rows(np.asarray(cov[self.name], dtype=float))

    def to_dict(self):
        return {
            "type": "cyclic_cubic",
            "knots": self.knots.tolist(),
            "period": self.period,
            "F": self.F.tolist(),
            "name": self.name,
        }


@dataclass
class _CubicRegressionEval(Evaluator):
    knots: np.ndarray
    F: np.ndarray
    name: Optional[str]

    def rows(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        t = self.knots
        D = t.size
        h0, h1 = t[1] - t[0], t[-1] - t[-2]
        rows = np.zeros((x.size, D))
        idx = np.arange(x.size)

        left = x < t[0]
        right = x > t[-1]
        mid = ~(left | right)

        j = np.clip(np.searchsorted(t, x[mid], side="right") - 1, 0, D - 2)
        am, ap, cm, cp = _hermite_weights(x[mid], t[j], t[j + 1])
        sub = np.zeros((mid.sum(), D))
        np.add.at(sub, (np.arange(mid.sum()), j), am)
        np.add.at(sub, (np.arange(mid.sum()), j + 1), ap)
        sub += cm[:, None] * self.F[j, :] + cp[:, None] * self.F[j + 1, :]
        rows[mid] = sub

        if left.any():
            # linear extrapolation with the boundary slope
            d_left = np.zeros(D)
            d_left[0] -= 1.0 / h0
            d_left[1] += 1.0 / h0
            d_left -= (h0 / 6.0) * self.F[1, :]
            base = np.zeros(D)
            base[0] = 1.0
            rows[left] = base + np.outer(x[left] - t[0], d_left)
        if right.any():
            d_right = np.zeros(D)
            d_right[-1] += 1.0 / h1
            d_right[-2] -= 1.0 / h1
            d_right += (h1 / 6.0) * self.F[-2, :]
            base = np.zeros(D)
            base[-1] = 1.0
            rows[right] = base + np.outer(x[right] - t[-1], d_right)
        return rows

    def evaluate(self, cov):
        return self.rows(np.asarray(cov[self.name], dtype=float))

    def to_dict(self):
        return {
            "type": "cubic_regression",
            "knots": self.knots.tolist(),
            "F": self.F.tolist(),
            "name": self.name,
        }


@dataclass
class _ThinPlateEval(Evaluator):
    shift: np.ndarray
    scale: float
    knots: np.ndarray
    W: np.ndarray
    names: Optional[Tuple[str, str]]

    def rows(self, coords: np.ndarray) -> np.ndarray:
        pts = (np.asarray(coords, dtype=float) - self.shift) / self.scale
        E = _tps_kernel_matrix(pts, self.knots)
        radial = E @ self.W
        poly = np.column_stack([np.ones(pts.shape[0]), pts[:, 0], pts[:, 1]])
        return np.column_stack([radial, poly])

    def evaluate(self, cov):
        xname, yname = self.names
        coords = np.column_stack(
            [np.asarray(cov[xname], dtype=float), np.asarray(cov[yname], dtype=float)]
        )
        return self.rows(coords)

    def to_dict(self):
        return {
            "type": "thin_plate",
            "shift": self.shift.tolist(),
            "scale": self.scale,
            "knots": self.knots.tolist(),
            "W": self.W.tolist(),
            "names": list(self.names) if self.names else None,
        }


@dataclass
class _TensorEval(Evaluator):
    children: List[Evaluator]

    def evaluate(self, cov):
        design = self.children[0].evaluate(cov)
        n = design.shape[0]
        for c in self.children[1:]:
            design = (design[:, :, None] * c.evaluate(cov)[:, None, :]).reshape(n, -1)
        return design

    def to_dict(self):
        return {"type": "tensor", "children": [c.to_dict() for c in self.children]}


@dataclass
class _CenteredEval(Evaluator):
    inner: Evaluator
    Z: np.ndarray

    def evaluate(self, cov):
        return self.inner.evaluate(cov) @ self.Z

    def to_dict(self):
        return {"type": "centered", "inner": self.inner.to_dict(), "Z": self.Z.tolist()}


def evaluator_from_dict(d: dict) -> Evaluator:
    kind = d["type"]
    if kind == "cyclic_cubic":
        return _CyclicCubicEval(
            knots=np.asarray(d["knots"]), period=float(d["period"]),
            F=np.asarray(d["F"]), name=d["name"],
        )
    if kind == "cubic_regression":
        return _CubicRegressionEval(
            knots=np.asarray(d["knots"]), F=np.asarray(d["F"]), name=d["name"]
        )
    if kind == "thin_plate":
        return _ThinPlateEval(
            shift=np.asarray(d["shift"]), scale=float(d["scale"]),
            knots=np.asarray(d["knots"]), W=np.asarray(d["W"]),
            names=tuple(d["names"]) if d["names"] else None,
        )
    if kind == "tensor":
        return _TensorEval(children=[evaluator_from_dict(c) for c in d["children"]])
    if kind == "centered":
        return _CenteredEval(inner=evaluator_from_dict(d["inner"]), Z=np.asarray(d["Z"]))
    raise ValueError(f"unknown evaluator type {kind!r}")
