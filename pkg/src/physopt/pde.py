"""Parametric PDE families and their physics-informed losses.

L_PDE = sum_interior |N(u_theta; gamma)(x_j) - f(x_j)|^2
        + lambda * sum_boundary |B(u_theta)(x_j) - g(x_j)|^2

Sums run over collocation points; there are no quadrature weights and no 1/2
factors, so for the linear families ``grad L_PDE = 2 (A theta - b)``.

Families
--------
helmholtz  u'' + omega^2 u = 0,       u(0) = u0, u'(0) = v0     on [0, 1]
poisson    -u'' = f,                  u(0) = u0, u'(0) = v0     on [0, 1]
           f(x) = (pi/K) sum_i a_i i^(2r) sin(pi x),  K = 16, r = -0.5
nlrd       u_t - nu u_xx - rho u (1 - u) = 0,  u(x, 0) = exp(-32 (x - 1/2)^2)
           on [0, 1]^2; only the initial condition enters L_BC.

For 1d families the boundary set is the grid row at x = 0, which carries both
the value and the derivative condition.  For nlrd it is the t = 0 row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basis import BasisEval
from .errors import (
    DivergenceError,
    InvalidSpecError,
    ShapeMismatchError,
    UnsupportedFamilyError,
)

HELMHOLTZ = "helmholtz"
POISSON = "poisson"
NLRD = "nlrd"
FAMILIES = (HELMHOLTZ, POISSON, NLRD)
LINEAR_FAMILIES = (HELMHOLTZ, POISSON)

POISSON_K = 16
POISSON_R = -0.5

PARAM_RANGES = {
    HELMHOLTZ: {"omega": (0.5, 50.0)},
    POISSON: {"a": (-100.0, 100.0)},
    NLRD: {"nu": (1.0, 5.0), "rho": (-5.0, 5.0)},
}


def poisson_amplitude(a, r=POISSON_R):
    """Scalar C with f(x) = C sin(pi x)."""
    a = np.asarray(a, dtype=float)
    i = np.arange(1, len(a) + 1, dtype=float)
    return np.pi / len(a) * np.sum(a * i ** (2 * r))


def poisson_forcing(a, x, r=POISSON_R):
    return poisson_amplitude(a, r) * np.sin(np.pi * np.asarray(x, dtype=float))


def nlrd_initial(x):
    return np.exp(-32.0 * (np.asarray(x, dtype=float) - 0.5) ** 2)


@dataclass(eq=False)
class PdeInstance:
    """One draw from a parametric family on a fixed grid.

    ``axes`` holds ``(x,)`` for 1d families and ``(x, t)`` for nlrd.  Grid
    rows are ordered time-major: row ``k * len(x) + j`` is ``(x_j, t_k)``.
    """

    family: str
    params: dict
    bc: dict
    axes: tuple
    forcing: Optional[np.ndarray] = None
    _points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(f"unknown family {self.family!r}")
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if self.family == NLRD:
            if len(self.axes) != 2:
                raise ShapeMismatchError("nlrd needs (x, t) axes")
            x, t = self.axes
            xx, tt = np.meshgrid(x, t)
            self._points = np.column_stack([xx.ravel(), tt.ravel()])
        else:
            if len(self.axes) != 1:
                raise ShapeMismatchError(f"{self.family} needs a single x axis")
            self._points = self.axes[0]
        for ax in self.axes:
            if ax.min() < 0.0 or ax.max() > 1.0:
                raise InvalidSpecError("grid must lie in the rescaled domain [0, 1]")
        if self.forcing is None:
            if self.family == POISSON:
                self.forcing = poisson_forcing(self.params["a"], self.axes[0])
            else:
                self.forcing = np.zeros(self.n_points)
        self.forcing = np.asarray(self.forcing, dtype=float)

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def n_points(self) -> int:
        return len(self._points)

    @property
    def grid_shape(self) -> tuple:
        if self.family == NLRD:
            return (len(self.axes[1]), len(self.axes[0]))
        return (len(self.axes[0]),)

    def boundary_target(self) -> np.ndarray:
        if self.family == NLRD:
            return nlrd_initial(self.axes[0])
        return np.array([self.bc["u0"], self.bc["v0"]], dtype=float)

    def to_dict(self, include_grid=True) -> dict:
        d = {
            "family": self.family,
            "params": {k: (list(map(float, v)) if np.ndim(v) else float(v)) for k, v in self.params.items()},
            "bc": {k: float(v) for k, v in self.bc.items()},
        }
        if include_grid:
            d["axes"] = [list(map(float, a)) for a in self.axes]
        return d

    @classmethod
    def from_dict(cls, d: dict, axes=None) -> "PdeInstance":
        axes = axes if axes is not None else d.get("axes")
        if axes is None:
            raise ShapeMismatchError("instance record has no grid")
        params = {k: (np.asarray(v, dtype=float) if isinstance(v, list) else float(v))
                  for k, v in d["params"].items()}
        return cls(family=d["family"], params=params, bc=dict(d.get("bc", {})), axes=tuple(axes))

    def same_as(self, other: "PdeInstance") -> bool:
        if self.family != other.family or self.bc != other.bc:
            return False
        if set(self.params) != set(other.params):
            return False
        if any(not np.array_equal(self.params[k], other.params[k]) for k in self.params):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.axes, other.axes)) and len(
            self.axes) == len(other.axes)


@dataclass
class PdeLossConfig:
    """Boundary weight and collocation split (defaults derived per family)."""

    lambda_bc: float = 1.0
    interior: Optional[np.ndarray] = None
    boundary: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.lambda_bc > 0:
            raise InvalidSpecError("lambda_bc must be positive")

    def split(self, inst: PdeInstance):
        interior, boundary = self.interior, self.boundary
        if interior is None or boundary is None:
            if inst.family == NLRD:
                mx = len(inst.axes[0])
                d_bd, d_int = np.arange(mx), np.arange(mx, inst.n_points)
            else:
                d_bd, d_int = np.array([0]), np.arange(1, inst.n_points)
            interior = d_int if interior is None else interior
            boundary = d_bd if boundary is None else boundary
        interior = np.asarray(interior, dtype=int)
        boundary = np.asarray(boundary, dtype=int)
        if np.intersect1d(interior, boundary).size:
            raise InvalidSpecError("interior and boundary index sets overlap")
        return interior, boundary


@dataclass
class LinearSystem:
    """Quadratic form of a linear family: L(theta) = t'At - 2 b't + c."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0
    label: str = ""

    def loss(self, theta):
        theta = np.asarray(theta)
        return theta @ self.A @ theta - 2 * self.b @ theta + self.c

    def grad(self, theta):
        return 2.0 * (self.A @ np.asarray(theta) - self.b)

    def solve(self):
        return np.linalg.solve(self.A, self.b)


def _check_shapes(inst, basis, theta=None):
    if basis.n_points != inst.n_points:
        raise ShapeMismatchError(
            f"basis has {basis.n_points} points but instance grid has {inst.n_points}")
    if not np.allclose(np.asarray(basis.points, dtype=float).reshape(inst.points.shape), inst.points):
        raise ShapeMismatchError("basis grid does not match instance grid")
    if inst.family == NLRD and basis.dt is None:
        raise ShapeMismatchError("nlrd needs a space-time basis with a dt block")
    if theta is not None and np.shape(theta)[-1] != basis.n_basis:
        raise ShapeMismatchError(f"theta has length {np.shape(theta)[-1]}, basis {basis.n_basis}")


def _linear_rows(inst: PdeInstance, basis: BasisEval, cfg: PdeLossConfig):
    """(M, f, B, g) with residual M theta - f and boundary residual B theta - g."""
    interior, boundary = cfg.split(inst)
    if inst.family == HELMHOLTZ:
        w2 = float(inst.params["omega"]) ** 2
        op = basis.d2 + w2 * basis.values
    elif inst.family == POISSON:
        op = -basis.d2
    else:
        raise UnsupportedFamilyError(f"{inst.family} is not linear")
    bmat = np.vstack([basis.values[boundary], basis.d1[boundary]])
    g = np.repeat(inst.boundary_target(), len(boundary))
    return op[interior], inst.forcing[interior], bmat, g


def linear_operator_rows(inst: PdeInstance, basis: BasisEval, cfg: Optional[PdeLossConfig] = None):
    """``(M, f, B, g)``: interior residual ``M theta - f``, boundary residual ``B theta - g``."""
    cfg = cfg or PdeLossConfig()
    _check_shapes(inst, basis)
    return _linear_rows(inst, basis, cfg)


def _finite_or_raise(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what}: ansatz diverged")


def residual_loss(inst: PdeInstance, basis: BasisEval, theta, cfg: Optional[PdeLossConfig] = None):
    """L_PDE and its exact gradient with respect to theta."""
    cfg = cfg or PdeLossConfig()
    theta = np.asarray(theta, dtype=float)
    _check_shapes(inst, basis, theta)
    lam = cfg.lambda_bc
    if inst.family in LINEAR_FAMILIES:
        op, f, bmat, g = _linear_rows(inst, basis, cfg)
        r = op @ theta - f
        rb = bmat @ theta - g
        _finite_or_raise(r, "residual")
        _finite_or_raise(rb, "boundary residual")
        with np.errstate(over="ignore", invalid="ignore"):
            loss = r @ r + lam * (rb @ rb)
            grad = 2.0 * (op.T @ r) + 2.0 * lam * (bmat.T @ rb)
        _finite_or_raise(np.append(grad, loss), "loss")
        return float(loss), grad
    interior, boundary = cfg.split(inst)
    nu, rho = float(inst.params["nu"]), float(inst.params["rho"])
    v = basis.values[interior]
    u = v @ theta
    r = (basis.dt[interior] - nu * basis.d2[interior]) @ theta - rho * u * (1.0 - u)
    vb = basis.values[boundary]
    rb = vb @ theta - inst.boundary_target()
    _finite_or_raise(r, "residual")
    _finite_or_raise(rb, "boundary residual")
    jac = basis.dt[interior] - nu * basis.d2[interior] - rho * (1.0 - 2.0 * u)[:, None] * v
    with np.errstate(over="ignore", invalid="ignore"):
        loss = r @ r + lam * (rb @ rb)
        grad = 2.0 * (jac.T @ r) + 2.0 * lam * (vb.T @ rb)
    _finite_or_raise(np.append(grad, loss), "loss")
    return float(loss), grad


def assemble_linear_system(inst: PdeInstance, basis: BasisEval, cfg: Optional[PdeLossConfig] = None) -> LinearSystem:
    """(A, b, c) with ``residual_loss(theta) = theta'A theta - 2 b'theta + c``."""
    cfg = cfg or PdeLossConfig()
    if inst.family not in LINEAR_FAMILIES:
        raise UnsupportedFamilyError(f"no closed-form linear system for {inst.family}")
    _check_shapes(inst, basis)
    op, f, bmat, g = _linear_rows(inst, basis, cfg)
    lam = cfg.lambda_bc
    a = op.T @ op + lam * bmat.T @ bmat
    a = 0.5 * (a + a.T)
    b = op.T @ f + lam * bmat.T @ g
    c = float(f @ f + lam * g @ g)
    return LinearSystem(A=a, b=b, c=c, label=inst.family)


def analytic_solution(inst: PdeInstance, points=None):
    """Closed-form Helmholtz solution u = alpha cos(omega x + beta).

    beta = arctan(-v0 / (omega u0)), alpha = u0 / cos(beta).  When u0 == 0 the
    arctan is undefined; we take beta = -pi/2 and alpha = v0 / omega, which
    gives u = (v0/omega) sin(omega x).
    """
    if inst.family != HELMHOLTZ:
        raise UnsupportedFamilyError("analytic solution is only available for helmholtz")
    x = inst.axes[0] if points is None else np.asarray(points, dtype=float)
    omega = float(inst.params["omega"])
    u0, v0 = float(inst.bc["u0"]), float(inst.bc["v0"])
    if u0 == 0.0:
        beta, alpha = -np.pi / 2, v0 / omega
    else:
        beta = np.arctan(-v0 / (omega * u0))
        alpha = u0 / np.cos(beta)
    return alpha * np.cos(omega * x + beta)


def poisson_exact(inst: PdeInstance, points=None):
    """Exact Poisson solution u0 + (v0 - C/pi) x + C sin(pi x) / pi^2."""
    if inst.family != POISSON:
        raise UnsupportedFamilyError("poisson_exact needs a poisson instance")
    x = inst.axes[0] if points is None else np.asarray(points, dtype=float)
    c = poisson_amplitude(inst.params["a"])
    u0, v0 = float(inst.bc["u0"]), float(inst.bc["v0"])
    return u0 + (v0 - c / np.pi) * x + c * np.sin(np.pi * x) / np.pi**2


# --------------------------------------------------------------------------
# Batched problems used by the unrolled solver.  Each exposes loss/grad/hvp
# on a (B, N) coefficient array; grad is exact and hvp is the exact Hessian
# of L_PDE applied to a direction.
# --------------------------------------------------------------------------


class LinearProblemBatch:
    def __init__(self, systems):
        self.A = np.stack([s.A for s in systems])
        self.b = np.stack([s.b for s in systems])
        self.c = np.array([s.c for s in systems])

    def __len__(self):
        return len(self.b)

    def subset(self, idx):
        out = object.__new__(LinearProblemBatch)
        out.A, out.b, out.c = self.A[idx], self.b[idx], self.c[idx]
        return out

    def loss(self, theta):
        at = np.einsum("bij,bj->bi", self.A, theta)
        return np.einsum("bi,bi->b", theta, at) - 2 * np.einsum("bi,bi->b", self.b, theta) + self.c

    def grad(self, theta):
        return 2.0 * (np.einsum("bij,bj->bi", self.A, theta) - self.b)

    def hvp(self, theta, v):
        return 2.0 * np.einsum("bij,bj->bi", self.A, v)


class NlrdProblemBatch:
    def __init__(self, instances, basis: BasisEval, cfg: PdeLossConfig):
        interior, boundary = cfg.split(instances[0])
        self.v = basis.values[interior]
        self.dt = basis.dt[interior]
        self.dxx = basis.d2[interior]
        self.vb = basis.values[boundary]
        self.g = np.stack([inst.boundary_target() for inst in instances])
        self.nu = np.array([float(i.params["nu"]) for i in instances])
        self.rho = np.array([float(i.params["rho"]) for i in instances])
        self.lam = cfg.lambda_bc

    def __len__(self):
        return len(self.nu)

    def subset(self, idx):
        out = object.__new__(NlrdProblemBatch)
        out.__dict__.update(self.__dict__)
        out.g, out.nu, out.rho = self.g[idx], self.nu[idx], self.rho[idx]
        return out

    def _parts(self, theta):
        u = theta @ self.v.T
        lin = theta @ self.dt.T - self.nu[:, None] * (theta @ self.dxx.T)
        r = lin - self.rho[:, None] * u * (1.0 - u)
        rb = theta @ self.vb.T - self.g
        return u, r, rb

    def loss(self, theta):
        _, r, rb = self._parts(theta)
        return np.sum(r * r, axis=1) + self.lam * np.sum(rb * rb, axis=1)

    def _jac_apply(self, u, vec):
        """J v for each batch member, J = dt - nu dxx - rho (1 - 2u) psi."""
        return (vec @ self.dt.T - self.nu[:, None] * (vec @ self.dxx.T)
                - self.rho[:, None] * (1.0 - 2.0 * u) * (vec @ self.v.T))

    def _jac_t_apply(self, u, w):
        return (w @ self.dt - self.nu[:, None] * (w @ self.dxx)
                - (self.rho[:, None] * (1.0 - 2.0 * u) * w) @ self.v)

    def grad(self, theta):
        u, r, rb = self._parts(theta)
        return 2.0 * self._jac_t_apply(u, r) + 2.0 * self.lam * (rb @ self.vb)

    def hvp(self, theta, vec):
        u, r, _ = self._parts(theta)
        jv = self._jac_apply(u, vec)
        # second-order term: d^2 r_j / dtheta^2 = 2 rho psi_j psi_j^T
        curv = (2.0 * self.rho[:, None] * r * (vec @ self.v.T)) @ self.v
        return 2.0 * (self._jac_t_apply(u, jv) + curv) + 2.0 * self.lam * ((vec @ self.vb.T) @ self.vb)


def problem_batch(instances, basis: BasisEval, cfg: Optional[PdeLossConfig] = None):
    """Stack instances sharing one grid/basis into a batched problem."""
    cfg = cfg or PdeLossConfig()
    fams = {inst.family for inst in instances}
    if len(fams) != 1:
        raise ShapeMismatchError(f"mixed families in one batch: {sorted(fams)}")
    if instances[0].family in LINEAR_FAMILIES:
        return LinearProblemBatch([assemble_linear_system(i, basis, cfg) for i in instances])
    for inst in instances:
        _check_shapes(inst, basis)
    return NlrdProblemBatch(instances, basis, cfg)
