"""Deterministic first-order minimizer used by refinement and mesh fitting.

RMS-preconditioned gradient descent with backtracking: each step is scaled
per-parameter by a running max of squared gradients (which equalizes the very
different curvature of translation, rotation and shape blocks), and the step
length is halved until the objective does not increase. Accepted objective
values therefore form a non-increasing sequence, and everything is
deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np


def minimize(fun_grad, x0, iterations, step=0.01, fun=None, decay=0.99,
             grow=1.25, max_halvings=16, tol=0.0):
    """Minimize ``fun_grad(x) -> (value, gradient)``.

    Parameters
    ----------
    fun : optional value-only evaluation, used during backtracking (falls
        back to ``fun_grad`` when omitted).
    step : initial step length; adapted multiplicatively (grow on success,
        halve on backtracks) but never above 100x the initial value.
    tol : stop early when an accepted step improves the objective by less
        than ``tol`` (0 disables).

    Returns ``(x, trace)`` where ``trace`` lists the accepted objective
    values, starting with the objective at ``x0``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if fun is None:
        fun = lambda z: fun_grad(z)[0]
    value, grad = fun_grad(x)
    trace = [value]
    v = np.zeros_like(x)
    alpha = step
    max_alpha = step * 100.0
    for _ in range(iterations):
        v = np.maximum(decay * v, grad * grad)
        direction = grad / (np.sqrt(v) + 1e-12)
        accepted = False
        for _ in range(max_halvings):
            candidate = x - alpha * direction
            cand_value = fun(candidate)
            if np.isfinite(cand_value) and cand_value <= value:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        improved = value - cand_value
        x = candidate
        value, grad = fun_grad(x)
        # fun and fun_grad must agree; keep the freshly computed value
        trace.append(value)
        alpha = min(alpha * grow, max_alpha)
        if tol > 0.0 and improved < tol:
            break
    return x, trace
