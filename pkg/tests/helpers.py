"""Finite-difference gradient checks shared by the unit and acceptance suites."""

import numpy as np

from fedconflict.nn import mlp_backward, mlp_forward


def fd_grad(fn, params, h=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = fn()
            p[idx] = orig - h
            down = fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


def finite_difference_check(net, x, output_grad, h=1e-5):
    """Max relative error between backprop and central differences of sum(out * output_grad)."""
    grads = mlp_backward(net, x, output_grad).params()
    numeric = fd_grad(lambda: float(np.sum(mlp_forward(net, x) * output_grad)), net.params(), h)
    return max_rel_err(grads, numeric)
