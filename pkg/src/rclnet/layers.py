"""
Layer building blocks with hand-paired forward/backward passes.

The recurrent convolutional layer (RCL) refines a state over ``T`` shared
iterations on top of a feed-forward 1x1 projection::

    f      = BN(conv1x1(u)) + bias
    x(0)   = relu(f)
    x(t)   = relu(f + conv3x3(x(t-1)))        t = 1..T

The feed-forward term ``f`` is computed once and re-enters every step.
Batch norm is applied to the feed-forward path only.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, StateError
from .tensor import ConvSpec, conv2d, conv2d_backward

FF_SPEC = ConvSpec(1, 1, 1, 1, 0, 0)
REC_SPEC = ConvSpec(3, 3, 1, 1, 1, 1)


def relu(x):
    return np.maximum(x, 0)


def activate(x, activation):
    if activation == "relu":
        return relu(x)
    if activation == "identity":
        return x
    raise ConfigurationError(f"unknown activation {activation!r}")


def activate_backward(grad, pre, activation):
    if activation == "relu":
        return grad * (pre > 0)
    return grad


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    training: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("batch norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigurationError("batch norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def create(cls, maps, dtype=np.float32, **kwargs):
        return cls(
            gamma=np.ones(maps, dtype=dtype),
            beta=np.zeros(maps, dtype=dtype),
            running_mean=np.zeros(maps, dtype=dtype),
            running_var=np.ones(maps, dtype=dtype),
            **kwargs,
        )


def batchnorm_forward(x, state):
    """Normalize ``B x K x H x W`` per map over batch and spatial axes.

    In training mode the batch statistics are used and the running
    statistics are updated in place; in inference mode the running
    statistics are used. Returns ``(y, cache)``.
    """
    if x.ndim != 4 or x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batch norm over {state.gamma.shape[0]} maps got input shape {x.shape}")
    shape = (1, -1, 1, 1)
    if state.training:
        if x.shape[0] < 2:
            raise ConfigurationError("batch norm in training mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = state.gamma.reshape(shape) * xhat + state.beta.reshape(shape)
    return y.astype(x.dtype, copy=False), (xhat, inv_std, state.training)


def batchnorm_backward(grad, cache, state):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, training = cache
    shape = (1, -1, 1, 1)
    grad_gamma = (grad * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad.sum(axis=(0, 2, 3))
    gxhat = grad * state.gamma.reshape(shape)
    if not training:
        return gxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    n = grad.shape[0] * grad.shape[2] * grad.shape[3]
    grad_x = (inv_std.reshape(shape) / n) * (
        n * gxhat
        - gxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return grad_x.astype(grad.dtype, copy=False), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Dropout


@dataclass
class DropoutState:
    rate: float = 0.5
    training: bool = True
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.rate}")
        self.reseed(self.rng_seed)

    def reseed(self, seed):
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)


def dropout(x, state):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when the
    layer acts as the identity."""
    if not state.training or state.rate == 0:
        return x, None
    keep = 1.0 - state.rate
    mask = (state.rng.random(x.shape) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


# ---------------------------------------------------------------------------
# Recurrent convolutional layer


@dataclass
class RclParams:
    ff_kernels: np.ndarray  # K x C x 1 x 1
    rec_kernels: np.ndarray  # K x K x 3 x 3, shared over iterations
    bias: np.ndarray  # K
    T: int = 3

    def __post_init__(self):
        k = self.ff_kernels.shape[0]
        if self.ff_kernels.ndim != 4 or self.ff_kernels.shape[2:] != (1, 1):
            raise DimensionError(f"feed-forward kernels must be K x C x 1 x 1, got {self.ff_kernels.shape}")
        if self.rec_kernels.shape != (k, k, 3, 3):
            raise DimensionError(
                f"recurrent kernels must be {(k, k, 3, 3)} to match {k} feed-forward maps, got {self.rec_kernels.shape}"
            )
        if self.bias.shape != (k,):
            raise DimensionError(f"bias must have shape ({k},), got {self.bias.shape}")
        if self.T < 0:
            raise ConfigurationError(f"iteration count must be >= 0, got {self.T}")

    @property
    def maps(self):
        return self.ff_kernels.shape[0]


@dataclass
class RclCache:
    u: np.ndarray
    ff_out: np.ndarray
    bn_cache: object
    pre: list  # pre-activations a(0..T)
    states: list  # x(0..T)


def rcl_forward(u, params, bn=None, activation="relu"):
    """Run one RCL. ``bn=None`` disables batch norm. Returns ``(x_T, cache)``."""
    single = u.ndim == 3
    u4 = u[None] if single else u
    ff_out = conv2d(u4, params.ff_kernels, None, FF_SPEC)
    if bn is not None:
        f, bn_cache = batchnorm_forward(ff_out, bn)
    else:
        f, bn_cache = ff_out, None
    f = f + params.bias.reshape(1, -1, 1, 1)
    pre = [f]
    states = [activate(f, activation)]
    for _ in range(params.T):
        a = f + conv2d(states[-1], params.rec_kernels, None, REC_SPEC)
        pre.append(a)
        states.append(activate(a, activation))
    cache = RclCache(u4, ff_out, bn_cache, pre, states)
    out = states[-1]
    return (out[0] if single else out), cache


def rcl_backward(grad_out, cache, params, bn=None, activation="relu"):
    """Backpropagation through time over the unrolled ``T + 1`` steps.

    Returns ``(grad_u, grads)`` with ``grads`` keyed ``ff_kernels``,
    ``rec_kernels``, ``bias`` and, when batch norm is active, ``gamma`` and
    ``beta``. Shared-weight gradients are sums over the time steps.
    """
    if cache is None:
        raise StateError("rcl_backward called without a forward cache")
    single = grad_out.ndim == 3
    gx = grad_out[None] if single else grad_out
    grad_f = np.zeros_like(cache.pre[0])
    grad_rec = np.zeros_like(params.rec_kernels)
    for t in range(params.T, 0, -1):
        ga = activate_backward(gx, cache.pre[t], activation)
        grad_f += ga
        gx, gk, _ = conv2d_backward(ga, cache.states[t - 1], params.rec_kernels, REC_SPEC)
        grad_rec += gk
    ga = activate_backward(gx, cache.pre[0], activation)
    grad_f += ga
    grads = {"bias": grad_f.sum(axis=(0, 2, 3))}
    if bn is not None:
        grad_ff, grads["gamma"], grads["beta"] = batchnorm_backward(grad_f, cache.bn_cache, bn)
    else:
        grad_ff = grad_f
    grad_u, grads["ff_kernels"], _ = conv2d_backward(grad_ff, cache.u, params.ff_kernels, FF_SPEC)
    grads["rec_kernels"] = grad_rec
    return (grad_u[0] if single else grad_u), grads


def rcl_unrolled_edges(T):
    """Edges of one RCL's computation graph unrolled over ``T`` steps.

    Nodes are ``"u"`` and ``("x", t)``; each edge is one weighted layer
    (the feed-forward projection into step ``t`` or a recurrent conv).
    """
    edges = [("u", ("x", t)) for t in range(T + 1)]
    edges += [(("x", t - 1), ("x", t)) for t in range(1, T + 1)]
    return edges


def path_lengths(edges, source, target):
    """Set of distinct path lengths (edge counts) from ``source`` to ``target`` in a DAG."""
    succ = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
    memo = {}

    def walk(node):
        if node == target:
            return {0}
        if node not in memo:
            memo[node] = {n + 1 for nxt in succ.get(node, ()) for n in walk(nxt)}
        return memo[node]

    return walk(source)
