"""Central finite-difference verification of the network's backward pass."""

from dataclasses import replace

import numpy as np

from .network import build_network, mse_loss


def relative_error(analytic, numeric, floor=1e-8):
    """Norm-based relative error ``|a - n| / max(|a| + |n|, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    return float(diff / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor))


def numeric_gradient(f, x, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * step)
    return grad


def network_gradient_check(config, batch=3, seed=0, step=1e-6, corrupt=None):
    """Compare backprop against central differences for every parameter tensor.

    ``config`` is forced to 64-bit. Dropout keeps a fixed mask by reseeding
    before each forward. ``corrupt`` names a parameter whose analytic
    gradient is scaled by 1.5, for negative-control runs.

    Returns an ordered ``{parameter name: relative error}``.
    """
    config = replace(config, dtype="float64")
    net = build_network(config, seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.standard_normal((batch, config.channels, config.input_h, config.input_w))
    target = rng.standard_normal((batch, config.input_h)) * 2
    mask = np.ones_like(target)
    mask[0, : config.input_h // 2] = 0
    drop_seed = seed + 7

    def loss():
        net.dropout.reseed(drop_seed)
        pred = net.forward(x, training=True)
        return mse_loss(pred, target, mask)[0]

    net.dropout.reseed(drop_seed)
    pred = net.forward(x, training=True)
    _, g = mse_loss(pred, target, mask)
    if corrupt is not None:
        net.backward_hook = lambda name, value: value * 1.5 if name == corrupt else value
    analytic = {k: v.copy() for k, v in net.backward(g).items()}
    net.backward_hook = None

    report = {}
    for name, param in net.parameters().items():
        numeric = numeric_gradient(loss, param, step)
        report[name] = relative_error(analytic[name], numeric)
    return report
