"""Learned iterative solver: unrolled inference and training of the conditioner.

Inference runs ``L`` steps of

    theta <- theta - eta * F(grad L_PDE(theta), context)      (update_rule "gd")
    theta <- F(grad L_PDE(theta), context)                      (update_rule "direct")

and never sees reference solutions.  Training unrolls those steps on a tape,
reconstructs ``u = Psi theta_L`` on the grid, and minimises the smooth-L1
distance to the reference values with Adam on the network weights.

Context channels (each of length N, stacked after the gradient channel):

==========  =====================================================
gamma       PDE scalars as constant channels (omega/50; a_i/100;
            nu/5 and rho/5)
g           helmholtz/poisson: u0 and v0 as constant channels;
            nlrd: least-squares projection of the initial profile
f           poisson only: least-squares projection of the forcing
coords      linspace(0, 1, N), the position of each coefficient
==========  =====================================================
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nnet
from .basis import BasisEval, BasisSpec, eval_basis, tensor_basis
from .dataset import Dataset, SolutionField
from .errors import DivergenceError, InvalidSpecError, ShapeMismatchError
from .optim import Adam, ExponentialDecay
from .pde import HELMHOLTZ, NLRD, POISSON, PdeInstance, PdeLossConfig, problem_batch, residual_loss
from .tape import Tape

GD_UPDATE = "gd"
DIRECT = "direct"


@dataclass
class SolverConfig:
    L: int = 2
    eta: float = 1.0
    theta0_init: str = "zeros"
    theta0_sigma: float = 0.01
    update_rule: str = GD_UPDATE
    lambda_bc: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise InvalidSpecError("L must be >= 1")
        if not self.eta > 0:
            raise InvalidSpecError("eta must be positive")
        if self.update_rule not in (GD_UPDATE, DIRECT):
            raise InvalidSpecError(f"unknown update_rule {self.update_rule!r}")
        if self.theta0_init not in ("zeros", "gaussian"):
            raise InvalidSpecError(f"unknown theta0_init {self.theta0_init!r}")

    def loss_config(self):
        return PdeLossConfig(lambda_bc=self.lambda_bc)

    def theta0(self, batch, n):
        if self.theta0_init == "zeros":
            return np.zeros((batch, n))
        return np.random.default_rng(self.seed).normal(0.0, self.theta0_sigma, (batch, n))


@dataclass
class TrainConfig:
    epochs: int = 750
    batch_size: int = 20
    lr: float = 1e-3
    lr_decay: float = 0.995
    delta: float = 1.0
    seed: int = 0
    eval_every: int = 50
    abort_fraction: float = 0.5
    second_order: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidSpecError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.lr_decay <= 1 or not self.delta > 0:
            raise InvalidSpecError("lr_decay in (0, 1] and delta > 0 required")


# ------------------------------------------------------------- metrics


def relative_mse(pred, ref) -> float:
    """||pred - ref||^2 / ||ref||^2 summed over grid points."""
    p = pred.values if isinstance(pred, SolutionField) else np.asarray(pred, dtype=float)
    r = ref.values if isinstance(ref, SolutionField) else np.asarray(ref, dtype=float)
    if p.shape != r.shape:
        raise ShapeMismatchError(f"prediction {p.shape} and reference {r.shape} differ")
    denom = float(r @ r) if r.ndim == 1 else float(np.sum(r * r))
    if denom == 0.0:
        raise InvalidSpecError("relative MSE is undefined for a zero reference")
    d = p - r
    return float(np.sum(d * d)) / denom


def _batch_relative_mse(pred, ref):
    return np.sum((pred - ref) ** 2, axis=1) / np.sum(ref * ref, axis=1)


# --------------------------------------------------------------- setup


def family_basis(family, spec_x: BasisSpec, axes, spec_t: Optional[BasisSpec] = None) -> BasisEval:
    """Basis on a family's collocation grid (time-major space-time grid for nlrd)."""
    if family == NLRD:
        x, t = axes
        xx, tt = np.meshgrid(x, t)
        spec_t = spec_t or spec_x
        return tensor_basis(spec_x, spec_t, np.column_stack([xx.ravel(), tt.ravel()]))
    return eval_basis(spec_x, axes[0])


class _Projector:
    """Cached least-squares projections onto a basis."""

    def __init__(self, basis: BasisEval, n_x=None):
        self.basis = basis
        self.full = np.linalg.pinv(basis.values)
        self.first_row = None
        if n_x is not None:
            self.first_row = np.linalg.pinv(basis.values[:n_x])


_PROJECTORS = {}


def _projector(basis, inst):
    key = (id(basis), inst.family)
    hit = _PROJECTORS.get(key)
    if hit is None or hit.basis is not basis:
        n_x = len(inst.axes[0]) if inst.family == NLRD else None
        hit = _Projector(basis, n_x)
        _PROJECTORS.clear()
        _PROJECTORS[key] = hit
    return hit


def _gamma(inst):
    if inst.family == HELMHOLTZ:
        return [float(inst.params["omega"]) / 50.0]
    if inst.family == POISSON:
        return list(np.asarray(inst.params["a"], dtype=float) / 100.0)
    return [float(inst.params["nu"]) / 5.0, float(inst.params["rho"]) / 5.0]


def raw_features(instances, basis: BasisEval):
    """Unscaled per-family context pieces: dict of (B, k) or (B, N) arrays."""
    proj = _projector(basis, instances[0])
    out = {"gamma": np.array([_gamma(i) for i in instances])}
    fam = instances[0].family
    if fam == NLRD:
        out["g"] = np.stack([proj.first_row @ i.boundary_target() for i in instances])
    else:
        out["g"] = np.array([[i.bc["u0"], i.bc["v0"]] for i in instances], dtype=float)
    if fam == POISSON:
        out["f"] = np.stack([proj.full @ i.forcing for i in instances])
    return out


def encode_gamma(gamma, n_freq):
    """Append sin/cos(pi m gamma), m = 1..n_freq, to the scaled PDE scalars."""
    gamma = np.asarray(gamma, dtype=float)
    if n_freq <= 0:
        return gamma
    arg = np.pi * gamma[:, :, None] * np.arange(1, n_freq + 1)
    b = gamma.shape[0]
    return np.concatenate([gamma, np.sin(arg).reshape(b, -1), np.cos(arg).reshape(b, -1)], axis=1)


def instance_scale(net: nnet.ConditionerNet, grad0):
    """Per-instance RMS of the first PDE gradient, or None for fixed scaling."""
    if net.meta.get("scale_mode", "fixed") != "instance":
        return None
    g = np.asarray(grad0, dtype=float)
    return np.maximum(np.sqrt(np.mean(g * g, axis=1, keepdims=True)), 1e-300)


def context_channels(net: nnet.ConditionerNet, instances, basis: BasisEval, inst_scale=None):
    """(B, C_ctx, N) context stack according to ``net.input_spec``.

    With ``inst_scale`` the data channels (g, f) are divided by it so the
    whole input is invariant to the amplitude of the data.
    """
    n = basis.n_basis
    b = len(instances)
    feats = raw_features(instances, basis)
    spec, scales = net.input_spec, net.meta.get("feature_scales", {})
    chans = []
    if spec.get("gamma", False):
        gamma = encode_gamma(feats["gamma"], net.meta.get("gamma_fourier", 0))
        chans.append(np.repeat(gamma[:, :, None], n, axis=2))
    amp = 1.0 if inst_scale is None else 1.0 / np.asarray(inst_scale).reshape(-1, 1)
    if spec.get("g", False):
        g = feats["g"] * scales.get("g", 1.0) * amp
        chans.append(g[:, None, :] if g.shape[1] == n and instances[0].family == NLRD
                     else np.repeat(g[:, :, None], n, axis=2))
    if spec.get("f", False) and "f" in feats:
        chans.append((feats["f"] * scales.get("f", 1.0) * amp)[:, None, :])
    if spec.get("coords", False):
        chans.append(np.broadcast_to(np.linspace(0.0, 1.0, n), (b, 1, n)))
    if not chans:
        return np.zeros((b, 0, n))
    return np.concatenate(chans, axis=1)


def n_context_channels(family, input_spec, gamma_fourier=0):
    count = 0
    if input_spec.get("gamma", False):
        count += {HELMHOLTZ: 1, POISSON: 16, NLRD: 2}[family] * (1 + 2 * gamma_fourier)
    if input_spec.get("g", False):
        count += 1 if family == NLRD else 2
    if input_spec.get("f", False) and family == POISSON:
        count += 1
    if input_spec.get("coords", False):
        count += 1
    return count


def solver_inputs(net, instances, basis: BasisEval, problem, theta0):
    """Context channels and per-instance scale for a batch starting at ``theta0``."""
    scale = instance_scale(net, problem.grad(theta0))
    return context_channels(net, instances, basis, scale), scale


def make_conditioner(family, train_pairs, basis: BasisEval, scfg: SolverConfig, arch="fno",
                     input_spec=None, seed=0, grad_transform="asinh", scale_mode="fixed",
                     gamma_fourier=0, **arch_kwargs) -> nnet.ConditionerNet:
    """Build a fresh conditioner with scale constants fitted on training data.

    Scales (fixed, stored in the checkpoint): the gradient channel is divided by
    the RMS of the initial gradient and, with ``grad_transform="asinh"``,
    passed through asinh; projected feature channels are divided by their RMS,
    and the network output is multiplied by the RMS of the reference
    coefficients (divided by L * eta for the gd rule so one unit of output per
    step covers the target).  ``scale_mode="instance"`` first divides every
    instance by the RMS of its own initial gradient, so the fitted constants
    describe amplitude-free quantities.  ``gamma_fourier=M`` adds M sine/cosine
    harmonics of each PDE scalar to the context.
    """
    if scale_mode not in ("fixed", "instance"):
        raise InvalidSpecError(f"unknown scale_mode {scale_mode!r}")
    if int(gamma_fourier) < 0:
        raise InvalidSpecError("gamma_fourier must be >= 0")
    spec = dict(nnet.DEFAULT_INPUT_SPEC if input_spec is None else input_spec)
    n = basis.n_basis
    instances = [p[0] for p in train_pairs]
    refs = np.stack([p[1].values for p in train_pairs])
    problem = problem_batch(instances, basis, scfg.loss_config())
    g0 = problem.grad(scfg.theta0(len(instances), n))
    theta_ref = refs @ np.linalg.pinv(basis.values).T
    feats = raw_features(instances, basis)
    if scale_mode == "instance":
        amp = np.maximum(np.sqrt(np.mean(g0 * g0, axis=1, keepdims=True)), 1e-300)
        g0, theta_ref = g0 / amp, theta_ref / amp
        feats = {k: v / amp if k in ("g", "f") else v for k, v in feats.items()}
    scales = {}
    for key in ("g", "f"):
        if key in feats and feats[key].shape[1] == n:
            scales[key] = 1.0 / max(float(np.sqrt(np.mean(feats[key] ** 2))), 1e-12)
    out_scale = float(np.sqrt(np.mean(theta_ref**2)))
    if scfg.update_rule == GD_UPDATE:
        out_scale /= scfg.L * scfg.eta
    meta = {
        "family": family,
        "grad_scale": 1.0 / max(float(np.sqrt(np.mean(g0**2))), 1e-12),
        "grad_transform": grad_transform,
        "scale_mode": scale_mode,
        "gamma_fourier": int(gamma_fourier),
        "out_scale": out_scale,
        "feature_scales": scales,
        "arch": arch,
    }
    if grad_transform not in nnet.GRAD_CHANNELS:
        raise InvalidSpecError(f"unknown grad_transform {grad_transform!r}")
    n_ch = nnet.GRAD_CHANNELS[grad_transform] * int(spec.get("grad", False)) + n_context_channels(family, spec, int(gamma_fourier))
    if arch == "fno":
        return nnet.build_fno(n, n_ch, input_spec=spec, seed=seed, meta=meta, **arch_kwargs)
    if arch == "mlp":
        return nnet.build_mlp(n, n_ch, input_spec=spec, seed=seed, meta=meta, **arch_kwargs)
    raise InvalidSpecError(f"unknown architecture {arch!r}")


# ----------------------------------------------------------- unrolling


def _pde_grad_node(tape: Tape, problem, theta, second_order=True):
    """Tape node for grad L_PDE(theta); its adjoint is the Hessian product.

    With ``second_order=False`` the node is a constant input (zero adjoint).
    """
    value = problem.grad(theta.value)
    if not second_order:
        return tape.custom(value, [], [])
    at = theta.value
    return tape.custom(value, [theta], [lambda g: problem.hvp(at, g)])


def unroll(net, problem, context, theta0, scfg: SolverConfig, tape: Tape, second_order=True,
           inst_scale=None):
    """Record L solver steps; returns the list of iterate nodes."""
    weights = tape.leaf(net.params, "weights")
    theta = tape.leaf(theta0, "theta0")
    iterates = [theta]
    for _ in range(scfg.L):
        grad = _pde_grad_node(tape, problem, theta, second_order)
        step = nnet.apply_conditioner(tape, net, weights, grad, context, inst_scale)
        theta = tape.sub(theta, tape.scale(step, scfg.eta)) if scfg.update_rule == GD_UPDATE else step
        iterates.append(theta)
    return iterates


def _finite_rows(arr):
    return np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1)


def iterates_batch(net, instances, basis: BasisEval, scfg: SolverConfig, problem=None):
    """All L+1 solver iterates ``[theta_0, ..., theta_L]`` for a batch on one grid.

    Rows whose gradient turns non-finite continue as NaN.
    """
    if problem is None:
        problem = problem_batch(instances, basis, scfg.loss_config())
    theta = scfg.theta0(len(instances), basis.n_basis)
    ctx, scale = solver_inputs(net, instances, basis, problem, theta)
    out = [theta]
    with np.errstate(all="ignore"):
        for _ in range(scfg.L):
            grad = problem.grad(theta)
            ok = _finite_rows(grad)
            step = np.full_like(theta, np.nan)
            if ok.any():
                step[ok] = nnet.forward(net, grad[ok], ctx[ok], None if scale is None else scale[ok])
            theta = theta - scfg.eta * step if scfg.update_rule == GD_UPDATE else step
            out.append(theta)
    return out


def infer_batch(net, instances, basis: BasisEval, scfg: SolverConfig):
    """Run the learned solver on a batch of instances sharing one grid.

    Returns ``(theta_L, trace)`` with trace of shape ``(B, L+1)`` holding
    L_PDE at every iterate.  Rows that diverge come back as NaN.
    """
    problem = problem_batch(instances, basis, scfg.loss_config())
    its = iterates_batch(net, instances, basis, scfg, problem)
    with np.errstate(all="ignore"):
        trace = [problem.loss(t) for t in its]
    return its[-1], np.stack(trace, axis=1)


def infer(net, inst: PdeInstance, basis: BasisEval, scfg: SolverConfig):
    """Run the learned solver on one instance (no reference data involved)."""
    cfg = scfg.loss_config()
    theta = scfg.theta0(1, basis.n_basis)[0]
    loss, grad = residual_loss(inst, basis, theta, cfg)
    scale = instance_scale(net, grad[None])
    ctx = context_channels(net, [inst], basis, scale)[0]
    trace = [loss]
    for step in range(1, scfg.L + 1):
        out = nnet.forward(net, grad, ctx, scale)
        theta = theta - scfg.eta * out if scfg.update_rule == GD_UPDATE else out
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("solver iterate became non-finite", step=step)
        try:
            loss, grad = residual_loss(inst, basis, theta, cfg)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), step=step) from exc
        trace.append(loss)
    return theta, np.array(trace)


# ------------------------------------------------------------- training


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_rmse: list = field(default_factory=list)
    test_rmse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    skipped: int = 0

    def rows(self):
        return list(zip(self.epochs, self.train_rmse, self.test_rmse, self.lr))


def data_loss_and_grad(net, problem, context, targets, basis: BasisEval, scfg: SolverConfig, delta=1.0,
                       second_order=True, inst_scale=None):
    """Smooth-L1 data loss of the unrolled solver and its gradient in weights."""
    tape = Tape()
    theta0 = scfg.theta0(len(targets), basis.n_basis)
    iterates = unroll(net, problem, context, theta0, scfg, tape, second_order, inst_scale)
    pred = tape.matmul(iterates[-1], basis.values.T)
    loss = tape.smooth_l1(pred, targets, delta)
    tape.backward(loss)
    return float(loss.value), tape.grad_of("weights"), pred.value


def evaluate(net, pairs, basis: BasisEval, scfg: SolverConfig, chunk=50):
    """Mean per-instance relative MSE of the solver on ``pairs``."""
    vals = []
    for k in range(0, len(pairs), chunk):
        part = pairs[k:k + chunk]
        theta, _ = infer_batch(net, [p[0] for p in part], basis, scfg)
        refs = np.stack([p[1].values for p in part])
        vals.append(_batch_relative_mse(theta @ basis.values.T, refs))
    if not vals:
        return float("nan")
    return float(np.mean(np.concatenate(vals)))


def train(dataset: Dataset, net0: nnet.ConditionerNet, basis: BasisEval, scfg: SolverConfig,
          tcfg: TrainConfig, log=None):
    """Fit the conditioner on the unrolled data loss; returns ``(net, history)``."""
    net = net0.copy()
    history = History()
    if tcfg.epochs == 0 or not dataset.train:
        return net, history
    fam = net.meta.get("family")
    if fam is not None and fam != dataset.family:
        raise ShapeMismatchError(f"network was built for {fam}, dataset is {dataset.family}")
    cfg = scfg.loss_config()
    instances = [p[0] for p in dataset.train]
    targets = np.stack([p[1].values for p in dataset.train])
    problem = problem_batch(instances, basis, cfg)
    context, scale = solver_inputs(net, instances, basis, problem, scfg.theta0(len(instances), basis.n_basis))
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(lr=tcfg.lr)
    schedule = ExponentialDecay(tcfg.lr, tcfg.lr_decay)
    m = len(instances)
    start = time.perf_counter()
    for epoch in range(tcfg.epochs):
        opt.lr = schedule(epoch)
        order = rng.permutation(m)
        errs = []
        for k in range(0, m, tcfg.batch_size):
            idx = order[k:k + tcfg.batch_size]
            with np.errstate(all="ignore"):
                loss, d_weights, pred = data_loss_and_grad(
                    net, problem.subset(idx), context[idx], targets[idx], basis, scfg, tcfg.delta,
                    tcfg.second_order, None if scale is None else scale[idx])
            if not (np.isfinite(loss) and np.all(np.isfinite(d_weights))):
                ok = _finite_rows(pred)
                if ok.mean() <= 1.0 - tcfg.abort_fraction:
                    raise DivergenceError(
                        f"{int((~ok).sum())}/{len(idx)} instances diverged in epoch {epoch}; "
                        f"lr={opt.lr:.3g}, |weights|={np.linalg.norm(net.params):.3g}")
                idx = idx[ok]
                history.skipped += int((~ok).sum())
                with np.errstate(all="ignore"):
                    loss, d_weights, pred = data_loss_and_grad(
                        net, problem.subset(idx), context[idx], targets[idx], basis, scfg, tcfg.delta,
                    tcfg.second_order, None if scale is None else scale[idx])
                if not (np.isfinite(loss) and np.all(np.isfinite(d_weights))):
                    raise DivergenceError(f"non-finite gradient after dropping diverged rows (epoch {epoch})")
            errs.append(_batch_relative_mse(pred, targets[idx]))
            net.params = opt.step(net.params, d_weights)
        last = epoch == tcfg.epochs - 1
        if (epoch + 1) % tcfg.eval_every == 0 or last or epoch == 0:
            test = evaluate(net, dataset.test, basis, scfg) if dataset.test else float("nan")
            history.epochs.append(epoch + 1)
            history.train_rmse.append(float(np.mean(np.concatenate(errs))))
            history.test_rmse.append(test)
            history.lr.append(opt.lr)
            if log is not None:
                log(f"epoch {epoch + 1:4d}  train {history.train_rmse[-1]:.3e}  test {test:.3e}  "
                    f"lr {opt.lr:.2e}  {time.perf_counter() - start:.0f}s")
    return net, history


# --------------------------------------------------------------- outputs


def write_history_csv(path, history: History):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_rmse", "test_rmse", "lr"])
        for row in history.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def write_trace_csv(path, trace, rel_mse=None):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "l_pde", "relative_mse"])
        for k, v in enumerate(trace):
            r = "" if rel_mse is None else repr(float(rel_mse[k]))
            w.writerow([k, repr(float(v)), r])


def config_dict(obj) -> dict:
    return asdict(obj)
