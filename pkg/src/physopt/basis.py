"""B-spline and Fourier ansatz bases with exact first and second derivatives.

B-splines are evaluated with the Cox--de Boor recursion (0/0 := 0 at repeated
knots) and differentiated with the standard derivative recurrence.  Physical
coordinates in ``spec.domain`` are mapped affinely onto the valid knot span
``[t_d, t_N]`` before evaluation, so the basis is a partition of unity on the
whole physical domain and derivatives carry the chain-rule factor of that map.

Fourier features are evaluated in raw problem coordinates (no rescaling):
``phi_0 = 1/sqrt(2 pi)``, ``phi_{-k} = cos(kx)/sqrt(pi)``,
``phi_k = sin(kx)/sqrt(pi)``, columns ordered by ``k = -K, ..., K``.

Tensor-product bases follow the "N1 + N2 + N1*N2" layout::

    column i              -> psi_i(x)                 0 <= i < N1
    column N1 + j         -> chi_j(t)                 0 <= j < N2
    column N1 + N2 + i*N2 + j -> psi_i(x) * chi_j(t)   (row-major products)

With ``include_marginals=False`` only the product block is returned and the
product index is ``i*N2 + j``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidSpecError, OutOfDomainError, ShapeMismatchError

BSPLINE = "bspline"
FOURIER = "fourier"
SHIFTED = "shifted"
EQUISPACED = "equispaced"

_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class BasisSpec:
    """One-dimensional basis description.

    For ``kind="fourier"``, ``n_terms`` is the maximal frequency K and the
    basis has ``2K + 1`` functions.
    """

    kind: str = BSPLINE
    n_terms: int = 32
    degree: int = 3
    knot_config: str = SHIFTED
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        if self.kind not in (BSPLINE, FOURIER):
            raise InvalidSpecError(f"unknown basis kind {self.kind!r}")
        if self.n_terms < 1:
            raise InvalidSpecError("n_terms must be positive")
        if len(self.domain) != 2 or not self.domain[0] < self.domain[1]:
            raise InvalidSpecError(f"invalid domain {self.domain}")
        if self.kind == BSPLINE:
            if self.degree < 0:
                raise InvalidSpecError("degree must be >= 0")
            if self.knot_config not in (SHIFTED, EQUISPACED):
                raise InvalidSpecError(f"unknown knot_config {self.knot_config!r}")

    @property
    def size(self) -> int:
        if self.kind == FOURIER:
            return 2 * self.n_terms + 1
        return self.n_terms

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        allowed = {"kind", "n_terms", "degree", "knot_config", "domain"}
        unknown = set(d) - allowed
        if unknown:
            raise InvalidSpecError(f"unknown basis keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BasisEval:
    """Basis values and derivatives at ``points`` (one row per point).

    In 1d, ``d1``/``d2`` are d/dx and d^2/dx^2.  For space-time bases ``d1``
    and ``d2`` are the x-partials and ``dt`` holds d/dt.
    """

    points: np.ndarray
    values: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    dt: Optional[np.ndarray] = None
    index_map: list = field(default_factory=list)

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    def reconstruct(self, theta):
        """u_theta at every point: ``values @ theta`` (works batched)."""
        return np.asarray(theta) @ self.values.T


def build_bspline_knots(spec: BasisSpec) -> np.ndarray:
    """Knot vector for ``spec`` (length ``N + d + 1`` in both configurations).

    ``shifted``: N + d + 1 equispaced simple knots from d/N to 1 + d/N.
    ``equispaced``: N + 1 - d simple knots spanning [0, 1] plus d extra
    copies of each end knot (clamped ends).
    """
    if spec.kind != BSPLINE:
        raise InvalidSpecError("knots are only defined for B-spline bases")
    n, d = spec.n_terms, spec.degree
    if n < d + 1:
        raise InvalidSpecError(f"need n_terms >= degree + 1, got N={n}, d={d}")
    if spec.knot_config == SHIFTED:
        return np.linspace(d / n, 1.0 + d / n, n + d + 1)
    inner = np.linspace(0.0, 1.0, n + 1 - d)
    return np.concatenate([np.zeros(d), inner, np.ones(d)])


def _check_domain(x, lo, hi):
    x = np.asarray(x, dtype=float)
    slack = _DOMAIN_SLACK * (hi - lo)
    bad = (x < lo - slack) | (x > hi + slack) | ~np.isfinite(x)
    if np.any(bad):
        raise OutOfDomainError(
            f"{int(bad.sum())} point(s) outside domain [{lo}, {hi}], e.g. {x[bad][0]!r}"
        )
    return np.clip(x, lo, hi)


def bspline_tables(knots, degree, s, nderiv=2):
    """All B-splines of ``degree`` on ``knots`` and their s-derivatives.

    Returns a list ``[N, N', N'', ...]`` of ``(len(s), len(knots)-degree-1)``
    arrays.  ``s`` must lie in the valid span ``[t_d, t_{n}]``.
    """
    t = np.asarray(knots, dtype=float)
    s = np.asarray(s, dtype=float)
    n_basis = len(t) - degree - 1
    # Span index: last non-empty [t_k, t_{k+1}) within the valid range.
    nonempty = np.nonzero(t[degree:n_basis] < t[degree + 1:n_basis + 1])[0] + degree
    k = np.searchsorted(t, s, side="right") - 1
    k = np.clip(k, nonempty[0], nonempty[-1])
    # Snap to the last non-empty span at or before k.
    k = nonempty[np.searchsorted(nonempty, k, side="right") - 1]

    def zeros(cols):
        return np.zeros((len(s), cols))

    # tables[p] = values of all degree-p splines (len(t) - p - 1 columns)
    tables = [zeros(len(t) - 1)]
    tables[0][np.arange(len(s)), k] = 1.0
    for p in range(1, degree + 1):
        prev = tables[-1]
        cols = len(t) - p - 1
        left_den = t[p:p + cols] - t[:cols]
        right_den = t[p + 1:p + 1 + cols] - t[1:1 + cols]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (s[:, None] - t[:cols]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[p + 1:p + 1 + cols] - s[:, None]) / right_den, 0.0)
        tables.append(left * prev[:, :cols] + right * prev[:, 1:cols + 1])

    out = [tables[degree]]
    for r in range(1, nderiv + 1):
        if r > degree:
            out.append(zeros(n_basis))
            continue
        # D^r N_{i,d} from D^{r-1} of degree-(d-r+1) splines, recursing down.
        cur = tables[degree - r]
        for p in range(degree - r + 1, degree + 1):
            cols = len(t) - p - 1
            left_den = t[p:p + cols] - t[:cols]
            right_den = t[p + 1:p + 1 + cols] - t[1:1 + cols]
            with np.errstate(divide="ignore", invalid="ignore"):
                a = np.where(left_den > 0, p / left_den, 0.0)
                b = np.where(right_den > 0, p / right_den, 0.0)
            cur = a * cur[:, :cols] - b * cur[:, 1:cols + 1]
        out.append(cur)
    return out


def _bspline_eval(spec, x):
    t = build_bspline_knots(spec)
    d, n = spec.degree, spec.n_terms
    lo, hi = spec.domain
    span_lo, span_hi = t[d], t[n]
    scale = (span_hi - span_lo) / (hi - lo)
    s = span_lo + (x - lo) * scale
    vals, ds, dss = bspline_tables(t, d, s, nderiv=2)
    return vals, ds * scale, dss * scale**2


def _fourier_eval(spec, x):
    k_max = spec.n_terms
    ks = np.arange(-k_max, k_max + 1)
    kx = x[:, None] * np.abs(ks)[None, :]
    c, s = np.cos(kx), np.sin(kx)
    inv = 1.0 / np.sqrt(np.pi)
    kk = np.abs(ks).astype(float)
    cos_cols = ks < 0
    sin_cols = ks > 0
    vals = np.where(cos_cols, c * inv, np.where(sin_cols, s * inv, 1.0 / np.sqrt(2 * np.pi)))
    d1 = np.where(cos_cols, -kk * s * inv, np.where(sin_cols, kk * c * inv, 0.0))
    d2 = -(kk**2) * np.where(ks == 0, 0.0, vals)
    return vals, d1, d2


def eval_basis(spec: BasisSpec, points) -> BasisEval:
    """Evaluate every basis function (and d/dx, d^2/dx^2) at ``points``."""
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise ShapeMismatchError("eval_basis expects a 1d coordinate list")
    x = _check_domain(x, *spec.domain)
    if spec.kind == BSPLINE:
        vals, d1, d2 = _bspline_eval(spec, x)
    else:
        vals, d1, d2 = _fourier_eval(spec, x)
    index_map = [("x", i) for i in range(spec.size)]
    return BasisEval(points=x, values=vals, d1=d1, d2=d2, index_map=index_map)


def tensor_size(spec_x: BasisSpec, spec_t: BasisSpec, include_marginals=True) -> int:
    n1, n2 = spec_x.size, spec_t.size
    return n1 * n2 + (n1 + n2 if include_marginals else 0)


def tensor_basis(spec_x: BasisSpec, spec_t: BasisSpec, grid, include_marginals=True) -> BasisEval:
    """Space-time basis on ``grid`` (an ``(m, 2)`` array of ``(x, t)`` rows)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise ShapeMismatchError(f"tensor grid must be (m, 2), got {grid.shape}")
    ex = eval_basis(spec_x, grid[:, 0])
    et = eval_basis(spec_t, grid[:, 1])
    n1, n2 = ex.n_basis, et.n_basis
    m = grid.shape[0]

    def prod(a, b):
        return (a[:, :, None] * b[:, None, :]).reshape(m, n1 * n2)

    values = [prod(ex.values, et.values)]
    dx = [prod(ex.d1, et.values)]
    dxx = [prod(ex.d2, et.values)]
    dt = [prod(ex.values, et.d1)]
    index_map = [("xt", i, j) for i in range(n1) for j in range(n2)]
    if include_marginals:
        zx, zt = np.zeros((m, n1)), np.zeros((m, n2))
        values = [ex.values, et.values] + values
        dx = [ex.d1, zt] + dx
        dxx = [ex.d2, zt] + dxx
        dt = [zx, et.d1] + dt
        index_map = [("x", i) for i in range(n1)] + [("t", j) for j in range(n2)] + index_map
    return BasisEval(
        points=grid,
        values=np.hstack(values),
        d1=np.hstack(dx),
        d2=np.hstack(dxx),
        dt=np.hstack(dt),
        index_map=index_map,
    )


def least_squares_projection(basis: BasisEval, samples, rows=None):
    """Coefficients minimising ``||values[rows] @ c - samples||`` (min-norm)."""
    mat = basis.values if rows is None else basis.values[rows]
    coef, *_ = np.linalg.lstsq(mat, np.asarray(samples, dtype=float), rcond=None)
    return coef
