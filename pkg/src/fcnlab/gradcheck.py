"""Central finite-difference gradient checks."""

import numpy as np


def numeric_grad(f, x, eps=1e-5):
    """d f / d x for scalar-valued f by central differences; x is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_net(net, x, eps=1e-5, seed=0, params=None):
    """Relative errors of a Net's analytic gradients against finite differences.

    The scalar checked is <forward(x), u> for a fixed random u.  Returns a dict
    keyed by parameter name plus ``"input"``.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    y = net.forward(x)
    u = rng.standard_normal(y.shape)
    pgrads, dx = net.backward(u)

    def loss():
        out = net.forward(x)
        net._tape = None
        return float(np.sum(out * u))

    errors = {"input": rel_error(dx, numeric_grad(loss, x, eps))}
    for name in params if params is not None else net.params:
        errors[name] = rel_error(pgrads[name], numeric_grad(loss, net.params[name], eps))
    return errors
