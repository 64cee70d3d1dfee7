"""Classical optimizers run directly on the ansatz coefficients.

These are the test-time baselines for the learned solver: plain gradient
descent, Adam and L-BFGS on L_PDE, one independent problem per instance.
SGD and Adam advance the whole batch together (elementwise updates); L-BFGS
runs instance by instance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisEval
from .errors import InvalidSpecError
from .optim import Adam, Lbfgs, Sgd
from .pde import PdeLossConfig, problem_batch

SGD_SAFETY = 0.95


@dataclass
class OptimizerTrace:
    """L_PDE and relative MSE at the recorded steps, one row per instance."""

    name: str
    steps: np.ndarray
    l_pde: np.ndarray
    rel_mse: np.ndarray
    lr: object = None
    extra: dict = field(default_factory=dict)


def hessian_lmax(problem, theta, iters=200, seed=0):
    """Largest Hessian eigenvalue per instance by power iteration on Hessian products."""
    v = np.random.default_rng(seed).normal(size=theta.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    lam = np.zeros(len(theta))
    for _ in range(iters):
        hv = problem.hvp(theta, v)
        lam = np.einsum("bi,bi->b", v, hv)
        v = hv / np.linalg.norm(hv, axis=1, keepdims=True)
    return lam


def stable_sgd_lr(problem, theta0, safety=SGD_SAFETY):
    """Per-instance step ``safety * 2 / lambda_max(Hessian)``, i.e. just inside the stable range."""
    return (safety * 2.0 / hessian_lmax(problem, theta0))[:, None]


def _rel(pred, refs):
    return np.sum((pred - refs) ** 2, axis=1) / np.sum(refs * refs, axis=1)


def run_first_order(kind, instances, basis: BasisEval, refs, steps, lr=None, record=None,
                    cfg: PdeLossConfig = None, theta0=None) -> OptimizerTrace:
    """Run SGD or Adam for ``steps`` iterations; ``lr=None`` picks the stable SGD step."""
    cfg = cfg or PdeLossConfig()
    problem = problem_batch(instances, basis, cfg)
    theta = np.zeros((len(instances), basis.n_basis)) if theta0 is None else np.array(theta0, float)
    record = set(range(steps + 1)) if record is None else set(record) | {0, steps}
    if kind == "sgd":
        lr = stable_sgd_lr(problem, theta) if lr is None else lr
        opt = Sgd(lr=lr)
    elif kind == "adam":
        opt = Adam(lr=1e-2 if lr is None else lr)
    else:
        raise InvalidSpecError(f"unknown first-order optimizer {kind!r}")
    rec_steps, losses, errs = [], [], []
    with np.errstate(all="ignore"):
        for k in range(steps + 1):
            if k in record:
                rec_steps.append(k)
                losses.append(problem.loss(theta))
                errs.append(_rel(theta @ basis.values.T, refs))
            if k == steps:
                break
            theta = opt.step(theta, problem.grad(theta))
    return OptimizerTrace(kind, np.array(rec_steps), np.stack(losses, 1), np.stack(errs, 1), lr,
                          extra={"theta": theta})


def run_lbfgs(instances, basis: BasisEval, refs, steps, record=None, cfg: PdeLossConfig = None,
              history=10, theta0=None) -> OptimizerTrace:
    cfg = cfg or PdeLossConfig()
    record = set(range(steps + 1)) if record is None else set(record) | {0, steps}
    rec_steps = sorted(record)
    losses = np.zeros((len(instances), len(rec_steps)))
    errs = np.zeros_like(losses)
    thetas = []
    for i, inst in enumerate(instances):
        prob = problem_batch([inst], basis, cfg)

        def closure(th):
            return float(prob.loss(th[None])[0]), prob.grad(th[None])[0]

        theta = np.zeros(basis.n_basis) if theta0 is None else np.array(theta0[i], float)
        opt = Lbfgs(lr=1.0, history=history)
        loss, grad = closure(theta)
        col = 0
        for k in range(steps + 1):
            if k == rec_steps[col]:
                losses[i, col] = loss
                errs[i, col] = _rel((basis.values @ theta)[None], refs[i][None])[0]
                col += 1
            if k == steps:
                break
            if opt.failed or not np.any(grad):
                continue
            theta = opt.step(theta, grad, closure)
            loss, grad = closure(theta)
        thetas.append(theta)
    return OptimizerTrace("lbfgs", np.array(rec_steps), losses, errs, 1.0, extra={"theta": np.array(thetas)})


def best_adam_lr(instances, basis, refs, steps, grid=(1e-3, 1e-2, 1e-1, 1.0), cfg=None):
    """Adam step size from ``grid`` with the lowest mean final relative MSE."""
    scores = []
    for lr in grid:
        tr = run_first_order("adam", instances, basis, refs, steps, lr=lr, record=[steps], cfg=cfg)
        final = tr.rel_mse[:, -1]
        scores.append(np.mean(np.where(np.isfinite(final), final, np.inf)))
    return grid[int(np.argmin(scores))], scores


def write_traces_csv(path, traces):
    """Long-format CSV: optimizer, instance, step, l_pde, relative_mse (plus mean rows)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["optimizer", "instance", "step", "l_pde", "relative_mse"])
        for tr in traces:
            for i in range(tr.l_pde.shape[0]):
                for j, s in enumerate(tr.steps):
                    w.writerow([tr.name, i, int(s), repr(float(tr.l_pde[i, j])), repr(float(tr.rel_mse[i, j]))])
            for j, s in enumerate(tr.steps):
                w.writerow([tr.name, "mean", int(s), repr(float(np.mean(tr.l_pde[:, j]))),
                            repr(float(np.mean(tr.rel_mse[:, j])))])
