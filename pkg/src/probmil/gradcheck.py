"""Central finite-difference checks for :func:`probmil.model.backward`."""

from __future__ import annotations

import numpy as np

from .model import MilNetwork, backward, forward_batch, loss
from .tensor_core import Rng


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / (||a|| + ||n||)``, zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradients(net: MilNetwork, strategy, bags, d, eps=1e-5, dropout_seed=None):
    """Central differences of the loss for every parameter entry.

    In training mode each evaluation re-creates the dropout stream from
    ``dropout_seed`` so all evaluations share one set of masks.
    """

    def objective():
        rng = Rng(dropout_seed) if dropout_seed is not None else None
        return loss(forward_batch(net, strategy, bags, rng).F, d)

    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = objective()
            p[idx] = orig - eps
            down = objective()
            p[idx] = orig
            g[idx] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def check_gradients(net: MilNetwork, strategy, bags, d, eps=1e-5, dropout_seed=None) -> dict:
    """Relative error per named parameter between backprop and differences."""
    rng = Rng(dropout_seed) if dropout_seed is not None else None
    cache = forward_batch(net, strategy, bags, rng)
    analytic = backward(net, d, cache)
    numeric = numeric_gradients(net, strategy, bags, d, eps, dropout_seed)
    return {name: relative_error(a, n)
            for name, a, n in zip(net.parameter_names(), analytic, numeric)}
