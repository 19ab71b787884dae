"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from dualcast.tensor import Tape, Tensor


def finite_difference_check(loss_fn, params, h=1e-5, floor=1e-6):
    """Compare taped gradients of loss_fn() against central differences.

    ``loss_fn`` rebuilds the forward graph from scratch and returns a scalar
    Tensor; ``params`` is a dict of name -> Tensor leaves. Returns the worst
    relative error over every scalar parameter.
    """
    tape = Tape()
    with tape:
        loss = loss_fn()
    for p in params.values():
        p.grad = None
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.ravel()
        grad_flat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(grad_flat[i] - fd) / max(abs(grad_flat[i]), abs(fd), floor)
            worst = max(worst, rel)
    return worst
