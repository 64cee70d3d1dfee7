"""Conditioning of physics-informed quadratics and learned linear preconditioning.

Convention: the library's loss has gradient ``2 (A theta - b)``.  Step counts
here use the half-scaled update ``theta - eta (A theta - b)`` with
``eta = c / lambda_max``, i.e. plain gradient descent on the library loss with
step ``eta / 2``.  This is the only place the factor 2 is absorbed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .basis import BasisSpec, eval_basis
from .errors import DivergenceError, InvalidSpecError, ShapeMismatchError
from .optim import Adam, Lbfgs
from .pde import LINEAR_FAMILIES, LinearSystem, PdeLossConfig, linear_operator_rows, problem_batch

NULL_THRESHOLD = 1e-10
STEP_CAP = 10_000_000


def jacobi_eigh(a, tol=1e-15, max_sweeps=60):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ``(w, v)`` with ascending eigenvalues and orthonormal columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeMismatchError("eigen-decomposition needs a square matrix")
    scale = np.linalg.norm(a)
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise InvalidSpecError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale or scale == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


@dataclass
class ConditioningReport:
    spectrum: np.ndarray
    kappa: float
    n: int
    threshold: float = NULL_THRESHOLD
    step_counts: dict = field(default_factory=dict)
    capped: dict = field(default_factory=dict)


def _matrix(sys_or_a):
    return sys_or_a.A if isinstance(sys_or_a, LinearSystem) else np.asarray(sys_or_a, dtype=float)


def spectrum_and_kappa(sys, threshold=NULL_THRESHOLD) -> ConditioningReport:
    """Spectrum and condition number over eigenvalues above ``threshold * lambda_max``."""
    a = _matrix(sys)
    w, _ = jacobi_eigh(a)
    lmax = w[-1]
    if lmax <= 0:
        raise InvalidSpecError("matrix has no positive eigenvalue")
    kept = w[w > threshold * lmax]
    return ConditioningReport(spectrum=w, kappa=float(lmax / kept[0]), n=len(w), threshold=threshold)


@dataclass
class StepCount:
    steps: int
    capped: bool


def gd_step_count(sys, eps=1e-3, c=0.5, theta0=None, seed=0, cap=STEP_CAP,
                  precond=None, eta=None, chunk=256) -> StepCount:
    """Iterations of ``theta <- theta - eta P (A theta - b)`` until the error shrinks by ``eps``.

    Defaults: ``P = I`` and ``eta = c / lambda_max(A)``.  The iteration is run
    literally; the error norm is checked every ``chunk`` steps and the last
    chunk is replayed step by step to get the exact first crossing.
    """
    a = _matrix(sys)
    n = a.shape[0]
    b = sys.b if isinstance(sys, LinearSystem) else np.zeros(n)
    if eta is None:
        if not 0 < c < 1:
            raise InvalidSpecError("c must lie in (0, 1)")
        eta = c / jacobi_eigh(a)[0][-1]
    theta_star = np.linalg.solve(a, b)
    theta = np.random.default_rng(seed).normal(size=n) if theta0 is None else np.array(theta0, float)
    target = eps * np.linalg.norm(theta - theta_star)
    pm = np.eye(n) if precond is None else np.asarray(precond, dtype=float)
    step_mat = np.eye(n) - eta * pm @ a
    shift = eta * pm @ b

    def advance(t):
        return step_mat @ t + shift

    k = 0
    while k < cap:
        saved = theta
        m = min(chunk, cap - k)
        for _ in range(m):
            theta = advance(theta)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("gradient descent diverged", step=k + m)
        if np.linalg.norm(theta - theta_star) <= target:
            theta = saved
            for j in range(1, m + 1):
                theta = advance(theta)
                if np.linalg.norm(theta - theta_star) <= target:
                    return StepCount(k + j, False)
        k += m
    return StepCount(cap, True)


def fourier_basis_at(k_max, x):
    """Fourier feature vector (ordered k = -K..K) at the scalar point ``x``."""
    return eval_basis(BasisSpec(kind="fourier", n_terms=k_max, domain=(-np.pi, np.pi)), [x]).values[0]


def fourier_poisson_system(k_max, lam=1.0) -> LinearSystem:
    """Exact-integral quadratic of the Fourier-feature Poisson model problem.

    Loss: int_{-pi}^{pi} |u''|^2 + lam/2 [u(-pi)^2 + u(pi)^2] (zero data), whose
    gradient is 2 A theta with A = diag(k^4) + lam phi(pi) phi(pi)^T.
    """
    ks = np.arange(-k_max, k_max + 1, dtype=float)
    phi = fourier_basis_at(k_max, np.pi)
    a = np.diag(ks**4) + lam * np.outer(phi, phi)
    return LinearSystem(A=a, b=np.zeros(len(ks)), c=0.0, label=f"fourier-poisson-K{k_max}")


def conditioning_sweep(ks, eps_list=(1e-3,), lam=1.0, c=0.5, seed=0, cap=STEP_CAP):
    reports = []
    for k in ks:
        sys = fourier_poisson_system(k, lam)
        rep = spectrum_and_kappa(sys)
        for eps in eps_list:
            sc = gd_step_count(sys, eps=eps, c=c, seed=seed, cap=cap)
            rep.step_counts[eps] = sc.steps
            rep.capped[eps] = sc.capped
        reports.append((k, rep))
    return reports


# ------------------------------------------------------ preconditioners


@dataclass
class LinearPreconditioner:
    P: np.ndarray
    kappa_pa: float
    spectral_radius: float
    nilpotency_norm: float
    loss: float
    iterations: int
    history: list = field(default_factory=list)


def kappa_of_product(p, a):
    """max |eig(PA)| / min |eig(PA)| (PA need not be symmetric)."""
    ev = np.abs(np.linalg.eigvals(np.asarray(p) @ np.asarray(a)))
    if ev.min() == 0:
        return float("inf")
    return float(ev.max() / ev.min())


def _unrolled_error_loss(p, a, e, eta, steps):
    """Relative sum ||(I - eta P A)^L E||^2 and its gradient in P."""
    n = a.shape[0]
    m = np.eye(n) - eta * p @ a
    powers = [np.eye(n)]
    for _ in range(steps):
        powers.append(powers[-1] @ m)
    r = powers[steps] @ e
    norm = np.sum(e * e)
    loss = np.sum(r * r) / norm
    re = r @ e.T
    g_m = sum(powers[j].T @ re @ powers[steps - 1 - j].T for j in range(steps))
    g_p = -eta * (2.0 / norm) * g_m @ a.T
    return float(loss), g_p


def train_linear_preconditioner(systems, targets=None, eta=1.0, steps=2, seed=0,
                                optimizer="lm", max_iter=3000, tol=1e-14, lr=1e-2) -> LinearPreconditioner:
    """Fit P so that ``steps`` preconditioned updates map every start onto its target.

    ``systems`` share one matrix A; starts are iid standard normal, so the
    error matrix has full rank almost surely when there are at least N of
    them.  Minimises the relative error ``sum_k ||(I - eta P A)^L E_k||^2``
    from ``P = 0``; ``optimizer`` is ``"lm"`` (Levenberg-Marquardt on the
    residual ``(I - eta P A)^L E``), ``"lbfgs"`` or ``"adam"``.
    """
    if not systems:
        raise InvalidSpecError("need at least one system")
    a = systems[0].A
    n = a.shape[0]
    for s in systems:
        if not np.allclose(s.A, a):
            raise ShapeMismatchError("systems must share the same matrix A")
    if targets is None:
        targets = [s.solve() for s in systems]
    rng = np.random.default_rng(seed)
    starts = rng.normal(size=(len(systems), n))
    e = (starts - np.asarray(targets)).T

    def closure(flat):
        loss, g = _unrolled_error_loss(flat.reshape(n, n), a, e, eta, steps)
        return loss, g.ravel()

    flat = np.zeros(n * n)
    loss, grad = closure(flat)
    history = [loss]
    it = 0
    if optimizer == "lm":
        scale = 1.0 / np.sqrt(np.sum(e * e))

        def residual(x):
            m = np.eye(n) - eta * x.reshape(n, n) @ a
            return (np.linalg.matrix_power(m, steps) @ e).ravel() * scale

        def jacobian(x):
            m = np.eye(n) - eta * x.reshape(n, n) @ a
            jac = np.zeros((n * e.shape[1], n * n))
            for j in range(steps):
                right = a @ np.linalg.matrix_power(m, steps - 1 - j) @ e
                jac -= eta * np.kron(np.linalg.matrix_power(m, j), right.T)
            return jac * scale

        sol = least_squares(residual, flat, jac=jacobian, method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_iter)
        flat, it = sol.x, int(sol.nfev)
        loss = float(np.sum(sol.fun**2))
        history.append(loss)
    elif optimizer in ("lbfgs", "adam"):
        opt = Lbfgs(lr=1.0, history=30) if optimizer == "lbfgs" else Adam(lr=lr)
        for it in range(1, max_iter + 1):
            flat = opt.step(flat, grad, closure)
            loss, grad = closure(flat)
            history.append(loss)
            if loss < tol or getattr(opt, "failed", False):
                break
    else:
        raise InvalidSpecError(f"unknown optimizer {optimizer!r}")
    p = flat.reshape(n, n)
    m = np.eye(n) - eta * p @ a
    return LinearPreconditioner(
        P=p,
        kappa_pa=kappa_of_product(p, a),
        spectral_radius=float(np.max(np.abs(np.linalg.eigvals(m)))),
        nilpotency_norm=float(np.linalg.norm(np.linalg.matrix_power(m, steps), 2)),
        loss=loss,
        iterations=it,
        history=history,
    )


# ------------------------------------------------------------ landscape


@dataclass
class LandscapeSlice:
    alpha: np.ndarray
    beta: np.ndarray
    values: np.ndarray  # (len(beta), len(alpha)); values[j, i] at (alpha_i, beta_j)
    u_dir: np.ndarray
    v_dir: np.ndarray
    anchor: np.ndarray
    trajectories: dict = field(default_factory=dict)  # name -> (k, 2) projected coords
    eigenvalues: Optional[tuple] = None


def gram_schmidt_plane(anchor, companion, w3):
    """Orthonormal (u, v): u along companion - anchor, v from w3 - anchor."""
    u = np.asarray(companion, float) - anchor
    nu = np.linalg.norm(u)
    if nu == 0:
        raise InvalidSpecError("anchor and companion coincide: degenerate plane")
    v = np.asarray(w3, float) - anchor
    v = v - (v @ u) / (nu * nu) * u
    nv = np.linalg.norm(v)
    if nv == 0:
        raise InvalidSpecError("third vector lies on the first direction")
    u_hat, v_hat = u / nu, v / nv
    # one re-orthogonalisation pass for round-off
    v_hat = v_hat - (v_hat @ u_hat) * u_hat
    return u_hat, v_hat / np.linalg.norm(v_hat)


def pde_hessian(inst, basis, theta, cfg=None):
    cfg = cfg or PdeLossConfig()
    prob = problem_batch([inst], basis, cfg)
    n = basis.n_basis
    eye = np.eye(n)
    h = np.stack([prob.hvp(theta[None], eye[i][None])[0] for i in range(n)], axis=1)
    return 0.5 * (h + h.T)


def _loss_fn(inst, basis, kind, cfg, reference):
    if kind == "data":
        if reference is None:
            raise InvalidSpecError("data-loss landscape needs a reference solution")
        ref = np.asarray(getattr(reference, "values", reference), float)
        return lambda th: np.mean((th @ basis.values.T - ref) ** 2, axis=1)
    if kind != "pde":
        raise InvalidSpecError(f"unknown landscape loss {kind!r}")
    if inst.family in LINEAR_FAMILIES:
        m, f, bm, g = linear_operator_rows(inst, basis, cfg)
        lam = cfg.lambda_bc

        def linear(th):
            r = th @ m.T - f
            rb = th @ bm.T - g
            return np.sum(r * r, axis=1) + lam * np.sum(rb * rb, axis=1)
        return linear
    prob = problem_batch([inst], basis, cfg)
    return lambda th: np.concatenate([prob.subset(np.zeros(len(part), int)).loss(part)
                                      for part in np.array_split(th, max(1, len(th) // 512))])


def landscape_slice(inst, basis, anchor, companion=None, loss="pde", directions="gram_schmidt",
                    res=41, extent=1.5, seed=0, trajectories=None, reference=None,
                    cfg: Optional[PdeLossConfig] = None) -> LandscapeSlice:
    """Evaluate a loss on a 2d plane through ``anchor``.

    ``directions="gram_schmidt"``: u along ``companion - anchor``, v from a
    random third vector, square window of half-width ``extent * |u|``.
    ``directions="hessian"``: u and v are the eigenvectors of the PDE-loss
    Hessian at the anchor for its largest and smallest eigenvalues; the
    window half-widths are ``extent * r / sqrt(lambda)`` per axis, with
    ``r = sqrt(lambda_max) * |companion - anchor|`` (or 1 without a
    companion), so both axes span the same loss increase.
    """
    cfg = cfg or PdeLossConfig()
    anchor = np.asarray(anchor, dtype=float)
    fn = _loss_fn(inst, basis, loss, cfg, reference)
    eig = None
    if directions == "gram_schmidt":
        if companion is None:
            raise InvalidSpecError("gram_schmidt plane needs a companion vector")
        w3 = np.random.default_rng(seed).normal(size=anchor.shape)
        u_hat, v_hat = gram_schmidt_plane(anchor, companion, w3)
        half = extent * np.linalg.norm(np.asarray(companion) - anchor)
        ha, hb = half, half
    elif directions == "hessian":
        w, vecs = jacobi_eigh(pde_hessian(inst, basis, anchor, cfg))
        kept = np.nonzero(w > NULL_THRESHOLD * w[-1])[0]
        u_hat, v_hat = vecs[:, -1], vecs[:, kept[0]]
        v_hat = v_hat - (v_hat @ u_hat) * u_hat
        v_hat /= np.linalg.norm(v_hat)
        eig = (float(w[-1]), float(w[kept[0]]))
        r = 1.0 if companion is None else np.sqrt(eig[0]) * np.linalg.norm(np.asarray(companion) - anchor)
        ha, hb = extent * r / np.sqrt(eig[0]), extent * r / np.sqrt(eig[1])
    else:
        raise InvalidSpecError(f"unknown direction mode {directions!r}")
    alpha = np.linspace(-ha, ha, res)
    beta = np.linspace(-hb, hb, res)
    aa, bb = np.meshgrid(alpha, beta)
    thetas = anchor + aa.ravel()[:, None] * u_hat + bb.ravel()[:, None] * v_hat
    values = fn(thetas).reshape(res, res)
    projected = {}
    for name, traj in (trajectories or {}).items():
        d = np.asarray(traj, float) - anchor
        projected[name] = np.column_stack([d @ u_hat, d @ v_hat])
    return LandscapeSlice(alpha=alpha, beta=beta, values=values, u_dir=u_hat, v_dir=v_hat,
                          anchor=anchor, trajectories=projected, eigenvalues=eig)


def axis_curvatures(sl: LandscapeSlice):
    """Quadratic coefficients of the loss along the two axes through the centre."""
    ja = len(sl.beta) // 2
    ia = len(sl.alpha) // 2
    ca = np.polyfit(sl.alpha, sl.values[ja, :], 2)[0]
    cb = np.polyfit(sl.beta, sl.values[:, ia], 2)[0]
    return float(ca), float(cb)


def _crossing(coords, values, level):
    """Smallest positive coordinate where ``values`` first reaches ``level`` (linear interp)."""
    mid = len(coords) // 2
    for i in range(mid, len(coords) - 1):
        if values[i] <= level <= values[i + 1]:
            t = (level - values[i]) / (values[i + 1] - values[i])
            return coords[i] + t * (coords[i + 1] - coords[i])
    return float("nan")


def level_axis_ratio(sl: LandscapeSlice, fraction=0.5):
    """Axis ratio (beta / alpha) of the level set through ``fraction`` of the alpha half-window.

    Read off the grid along its two centre lines by linear interpolation.
    """
    ja, ia = len(sl.beta) // 2, len(sl.alpha) // 2
    row, col = sl.values[ja, :], sl.values[:, ia]
    level = np.interp(fraction * sl.alpha[-1], sl.alpha[ia:], row[ia:])
    return float(_crossing(sl.beta, col, level) / _crossing(sl.alpha, row, level))


# ------------------------------------------------------------------ CSV


def write_conditioning_csv(path, reports):
    eps_all = sorted({e for _, r in reports for e in r.step_counts}, reverse=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "n", "kappa"] + [f"steps_eps_{e:g}" for e in eps_all] + [f"capped_eps_{e:g}" for e in eps_all])
        for k, r in reports:
            w.writerow([k, r.n, repr(r.kappa)] + [r.step_counts.get(e, "") for e in eps_all]
                       + [int(r.capped.get(e, False)) for e in eps_all])


def write_landscape_csv(path, sl: LandscapeSlice):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "name", "index", "alpha", "beta", "loss"])
        for j, b in enumerate(sl.beta):
            for i, a in enumerate(sl.alpha):
                w.writerow(["grid", "", j * len(sl.alpha) + i, repr(float(a)), repr(float(b)),
                            repr(float(sl.values[j, i]))])
        for name, pts in sl.trajectories.items():
            for k, (a, b) in enumerate(pts):
                w.writerow(["trajectory", name, k, repr(float(a)), repr(float(b)), ""])
