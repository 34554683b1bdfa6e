"""Shared test utilities: the finite-difference gradient oracle.

The oracle perturbs every coordinate of every differentiated tensor by
+-h and compares the central difference of a scalar output against the
analytic gradient from backward().  It is independent of the autodiff
engine: the function under test is re-run as a black box.
"""

import numpy as np

from convdial.autodiff import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def finite_difference_grads(fn, tensors, h: float = 1e-5):
    """Central finite differences of ``fn()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(fn, tensors, h: float = 1e-5, tol: float = 1e-3) -> float:
    """Assert analytic vs central-difference gradients agree within tol.

    ``fn`` must return a scalar Tensor recomputed from ``tensors`` on each
    call.  Returns the worst relative error seen.
    """
    for t in tensors:
        t.grad = None
        assert t.data.dtype == np.float64, "gradcheck runs in 64-bit mode"
    out = fn()
    assert isinstance(out, Tensor) and out.size == 1
    out.backward()
    numeric = finite_difference_grads(fn, tensors, h=h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = relative_error(analytic, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: relative error {err:.3e} >= {tol}"
    return worst


def random_weighting(rng, shape):
    """Fixed random projection used to reduce outputs to a scalar."""
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)
