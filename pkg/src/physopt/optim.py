"""First-order and quasi-Newton optimizers over flat parameter arrays.

``Sgd`` and ``Adam`` act elementwise, so a ``(B, N)`` array optimizes B
independent problems at once (``lr`` may be a ``(B, 1)`` array).  ``Lbfgs``
works on one vector and needs a closure returning ``(loss, grad)``.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .errors import DivergenceError, InvalidSpecError


def _checked(params, step_count):
    if not np.all(np.isfinite(params)):
        raise DivergenceError("optimizer produced a non-finite update", step=step_count)
    return params


class Sgd:
    kind = "sgd"

    def __init__(self, lr=1e-3):
        self.lr = lr
        self.step_count = 0

    def step(self, params, grad, closure=None):
        self.step_count += 1
        return _checked(params - self.lr * grad, self.step_count)


class Adam:
    """Adam with bias-corrected moments."""

    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise InvalidSpecError("Adam betas must lie in [0, 1)")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.step_count = 0

    def step(self, params, grad, closure=None):
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**t)
        v_hat = self.v / (1 - self.beta2**t)
        return _checked(params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps), t)


class Lbfgs:
    """Limited-memory BFGS with the two-loop recursion.

    The line search starts from the minimizer of the quadratic through
    ``phi(0)``, ``phi'(0)`` and ``phi(lr)`` (exact on quadratic losses), then
    halves until the Armijo condition holds.
    """

    kind = "lbfgs"

    def __init__(self, lr=1.0, history=10, c1=1e-4, max_trials=25):
        self.lr, self.history, self.c1, self.max_trials = lr, history, c1, max_trials
        self.pairs = deque(maxlen=history)
        self.step_count = 0
        self.last_loss = None
        self.failed = False

    def direction(self, grad):
        q = grad.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q

    def step(self, params, grad, closure=None):
        if closure is None:
            raise InvalidSpecError("L-BFGS needs a closure returning (loss, grad)")
        self.step_count += 1
        f0 = closure(params)[0] if self.last_loss is None else self.last_loss
        d = self.direction(grad)
        slope = grad @ d
        if not slope < 0:
            self.pairs.clear()
            d = -grad
            slope = -(grad @ grad)
        if slope == 0:
            return params
        a0 = self.lr
        f_a0, _ = closure(params + a0 * d)
        curv = f_a0 - f0 - slope * a0
        alpha = -slope * a0 * a0 / (2 * curv) if curv > 0 else a0
        if not np.isfinite(alpha) or alpha <= 0:
            alpha = a0
        new = None
        for _ in range(self.max_trials):
            cand = params + alpha * d
            f_new, g_new = closure(cand)
            if np.isfinite(f_new) and f_new <= f0 + self.c1 * alpha * slope:
                new = cand
                break
            alpha *= 0.5
        if new is None:
            self.failed = True
            return params
        s, y = new - params, g_new - grad
        sy = s @ y
        if sy > 1e-300:
            self.pairs.append((s, y, 1.0 / sy))
        self.last_loss = f_new
        self._last_grad = g_new
        return _checked(new, self.step_count)


class ExponentialDecay:
    """lr(epoch) = lr0 * gamma**epoch."""

    def __init__(self, lr0, gamma=0.995):
        self.lr0, self.gamma = lr0, gamma

    def __call__(self, epoch):
        return self.lr0 * self.gamma**epoch


def make_optimizer(kind, **kwargs):
    kinds = {"sgd": Sgd, "adam": Adam, "lbfgs": Lbfgs}
    if kind not in kinds:
        raise InvalidSpecError(f"unknown optimizer {kind!r}")
    return kinds[kind](**kwargs)
