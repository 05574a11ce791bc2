"""
The recurrent-convolutional regression network.

Layer stack (Table-2 family)::

    input 3 x H x W
    C1     conv 3x3 s1 p1 -> BN -> relu
    pool1
    RCL2   (1x1 feed-forward + T shared 3x3 iterations)
    pool2
    ...
    RCLm+1
    poolm+1
    flatten -> dropout -> dense -> H predictions (or softmax over C classes)
"""

import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, DimensionError, FormatError, StateError
from .layers import (
    BatchNormState,
    DropoutState,
    RclParams,
    activate_backward,
    batchnorm_backward,
    batchnorm_forward,
    dropout,
    dropout_backward,
    rcl_backward,
    rcl_forward,
    rcl_unrolled_edges,
    relu,
)
from .tensor import ConvSpec, PoolSpec

C1_SPEC = ConvSpec(3, 3, 1, 1, 1, 1)

# Table 2, (pool_w, pool_h, stride_w, stride_h)
FULL_POOLS = (
    PoolSpec(4, 1, 4, 1),
    PoolSpec(4, 1, 4, 1),
    PoolSpec(4, 4, 4, 4),
    PoolSpec(2, 2, 2, 2),
    PoolSpec(1, 1, 1, 1),
)

HEADS = ("regression", "classification")


@dataclass(frozen=True)
class NetworkConfig:
    input_w: int = 713
    input_h: int = 30
    channels: int = 3
    maps: int = 256
    rcl_count: int = 4
    iterations: int = 3
    pool_specs: tuple = FULL_POOLS
    head: str = "regression"
    class_count: int = 16
    dropout_rate: float = 0.5
    batch_norm: bool = True
    clamp_predictions: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "pool_specs", tuple(_as_pool(p) for p in self.pool_specs))
        if self.rcl_count < 1:
            raise ConfigurationError(f"rcl_count must be >= 1, got {self.rcl_count}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if min(self.input_w, self.input_h, self.channels, self.maps) < 1:
            raise ConfigurationError("input extents, channels and maps must be >= 1")
        if len(self.pool_specs) != self.rcl_count + 1:
            raise ConfigurationError(
                f"need {self.rcl_count + 1} pool specs (after C1 and each RCL), got {len(self.pool_specs)}"
            )
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "classification" and self.class_count < 2:
            raise ConfigurationError("classification head needs at least 2 classes")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.shape_trace()

    @classmethod
    def full(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def reduced(cls, input_w=32, input_h=8, maps=8, rcl_count=2, iterations=2, **overrides):
        pools = [PoolSpec(2, 1, 2, 1)] + [PoolSpec(2, 2, 2, 2)] * (rcl_count - 1) + [PoolSpec(1, 1, 1, 1)]
        overrides.setdefault("pool_specs", tuple(pools))
        return cls(
            input_w=input_w, input_h=input_h, maps=maps, rcl_count=rcl_count, iterations=iterations, **overrides
        )

    def static_variant(self):
        """Same architecture on single-frame windows: height 1, no pooling along time."""
        pools = tuple(PoolSpec(p.pool_w, 1, p.stride_w, 1) for p in self.pool_specs)
        return replace(self, input_h=1, pool_specs=pools)

    @property
    def output_size(self):
        return self.input_h if self.head == "regression" else self.class_count

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def shape_trace(self):
        """Spatial extents ``(w, h)`` after the input and after every pool."""
        h, w = self.input_h, self.input_w
        trace = [(w, h)]
        for i, spec in enumerate(self.pool_specs):
            name = "pool1" if i == 0 else f"pool{i + 1}"
            if spec.pool_h > h or spec.pool_w > w:
                raise ConfigurationError(f"{name}: pool {(spec.pool_w, spec.pool_h)} larger than input {(w, h)}")
            h, w = spec.output_extent(h, w)
            if h < 1 or w < 1:
                raise ConfigurationError(f"{name}: non-positive output extent {(w, h)}")
            trace.append((w, h))
        return trace

    @property
    def flat_features(self):
        w, h = self.shape_trace()[-1]
        return self.maps * w * h

    def to_dict(self):
        d = asdict(self)
        d["pool_specs"] = [asdict(p) for p in self.pool_specs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        if "pool_specs" in d:
            d["pool_specs"] = tuple(_as_pool(p) for p in d["pool_specs"])
        return cls(**d)


def _as_pool(p):
    if isinstance(p, PoolSpec):
        return p
    if isinstance(p, dict):
        return PoolSpec(**p)
    return PoolSpec(*p)


def parameter_count(config, include_batch_norm=True):
    """Closed-form learnable parameter count for a config."""
    k, c = config.maps, config.channels
    total = k * c * 9 + k
    total += config.rcl_count * (k * k + k + k * k * 9)
    total += config.flat_features * config.output_size + config.output_size
    if include_batch_norm and config.batch_norm:
        total += 2 * k * (config.rcl_count + 1)
    return total


def path_length_range(config):
    """(shortest, longest) input-to-output path length counted in weighted layers."""
    from .layers import path_lengths

    lengths = path_lengths(rcl_unrolled_edges(config.iterations), "u", ("x", config.iterations))
    return 1 + config.rcl_count * min(lengths) + 1, 1 + config.rcl_count * max(lengths) + 1


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse_loss(pred, target, mask=None):
    """Mean squared error over unmasked entries.

    ``mask`` marks entries that count (True/1); padded window rows are
    passed with mask 0 and contribute neither loss nor gradient.
    Returns ``(loss, grad)``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    if mask is None:
        n = diff.size
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
        diff = diff * mask
        n = mask.sum()
    if n == 0:
        return 0.0, np.zeros_like(pred)
    return float((diff**2).sum() / n), (2.0 / n) * diff


def cross_entropy_loss(probs, target):
    """Categorical cross-entropy on softmax outputs.

    ``probs`` is ``C`` or ``B x C``; ``target`` a class index or a vector of
    them. The returned gradient is w.r.t. the softmax *logits*
    (``probs - onehot``), averaged over the batch.
    """
    probs = np.asarray(probs)
    single = probs.ndim == 1
    p = probs[None] if single else probs
    t = np.atleast_1d(np.asarray(target))
    if t.shape[0] != p.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {p.shape[0]} probability vectors")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= p.shape[1]:
        raise ValueError(f"class index out of range [0, {p.shape[1]}): {t}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1")
    picked = p[np.arange(p.shape[0]), t]
    loss = float(-np.log(np.maximum(picked, np.finfo(p.dtype).tiny)).mean())
    grad = p.copy()
    grad[np.arange(p.shape[0]), t] -= 1
    grad /= p.shape[0]
    return loss, (grad[0] if single else grad)


@dataclass
class _Rcl:
    params: RclParams
    bn: BatchNormState = None


class Network:
    """Trainable instance of the layer stack described by a :class:`NetworkConfig`.

    Parameters and their gradients are exposed by dotted name through
    :meth:`parameters` and :attr:`grads`, in declaration order.
    """

    def __init__(self, config, rng_seed=0):
        self.config = config
        self.rng_seed = rng_seed
        dt = config.np_dtype
        rng = np.random.default_rng(rng_seed)
        k, c = config.maps, config.channels

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dt)

        self.c1_kernels = he((k, c, 3, 3), c * 9)
        self.c1_bias = np.zeros(k, dtype=dt)
        self.c1_bn = BatchNormState.create(k, dt) if config.batch_norm else None
        self.rcls = []
        for _ in range(config.rcl_count):
            params = RclParams(
                ff_kernels=he((k, k, 1, 1), k),
                rec_kernels=he((k, k, 3, 3), k * 9),
                bias=np.zeros(k, dtype=dt),
                T=config.iterations,
            )
            self.rcls.append(_Rcl(params, BatchNormState.create(k, dt) if config.batch_norm else None))
        d = config.flat_features
        self.out_weights = he((config.output_size, d), d)
        self.out_bias = np.zeros(config.output_size, dtype=dt)
        self.dropout = DropoutState(config.dropout_rate, training=False, rng_seed=rng_seed + 1)
        self.grads = {name: np.zeros_like(p) for name, p in self.parameters().items()}
        self.backward_hook = None
        self._cache = None

    # -- parameter registry -------------------------------------------------

    def _entries(self):
        """(name, owner, attribute, is_parameter, decays) in declaration order."""
        out = [("c1.kernels", self, "c1_kernels", True, True), ("c1.bias", self, "c1_bias", True, False)]
        if self.c1_bn is not None:
            out += _bn_entries("c1.bn", self.c1_bn)
        for i, r in enumerate(self.rcls):
            p = f"rcl{i + 2}"
            out += [
                (f"{p}.ff_kernels", r.params, "ff_kernels", True, True),
                (f"{p}.rec_kernels", r.params, "rec_kernels", True, True),
                (f"{p}.bias", r.params, "bias", True, False),
            ]
            if r.bn is not None:
                out += _bn_entries(f"{p}.bn", r.bn)
        out += [("out.weights", self, "out_weights", True, True), ("out.bias", self, "out_bias", True, False)]
        return out

    def parameters(self):
        return {n: getattr(o, a) for n, o, a, is_param, _ in self._entries() if is_param}

    def decay_mask(self):
        """Parameter name -> whether weight decay applies (not to biases or BN)."""
        return {n: decays for n, _, _, is_param, decays in self._entries() if is_param}

    def state_tensors(self):
        """All parameters plus batch-norm running statistics, in declaration order."""
        return {n: getattr(o, a) for n, o, a, _, _ in self._entries()}

    def load_state(self, tensors):
        entries = self._entries()
        if len(tensors) != len(entries):
            raise DimensionError(f"expected {len(entries)} tensors, got {len(tensors)}")
        for (name, owner, attr, _, _), value in zip(entries, tensors):
            current = getattr(owner, attr)
            if np.shape(value) != current.shape:
                raise DimensionError(f"{name}: shape {np.shape(value)} does not match network {current.shape}")
            current[...] = value

    def copy_state(self):
        return {n: t.copy() for n, t in self.state_tensors().items()}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0

    # -- forward / backward -------------------------------------------------

    def set_mode(self, training):
        for bn in [self.c1_bn] + [r.bn for r in self.rcls]:
            if bn is not None:
                bn.training = training
        self.dropout.training = training

    def forward(self, x, training=False):
        """Predictions for one window ``3 x H x W`` or a batch of them.

        Regression returns raw linear outputs (``H`` per window);
        classification returns softmax probabilities over ``C`` classes.
        Caches intermediates for :meth:`backward` in training mode.
        """
        cfg = self.config
        x = np.asarray(x, dtype=cfg.np_dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.input_h, cfg.input_w):
            raise DimensionError(
                f"expected windows of shape {(cfg.channels, cfg.input_h, cfg.input_w)}, got {x.shape[-3:]}"
            )
        self.set_mode(training)
        cache = {"x": x}
        z = tc.conv2d(x, self.c1_kernels, None, C1_SPEC)
        if self.c1_bn is not None:
            z, cache["c1_bn"] = batchnorm_forward(z, self.c1_bn)
        z = z + self.c1_bias.reshape(1, -1, 1, 1)
        cache["c1_pre"] = z
        h = relu(z)
        pools, rcls = [], []
        h, arg = tc.maxpool2d(h, cfg.pool_specs[0])
        pools.append((arg, cache["c1_pre"].shape))
        for i, r in enumerate(self.rcls):
            h, rc = rcl_forward(h, r.params, r.bn)
            rcls.append(rc)
            shape = h.shape
            h, arg = tc.maxpool2d(h, cfg.pool_specs[i + 1])
            pools.append((arg, shape))
        cache["pools"], cache["rcls"] = pools, rcls
        cache["flat_shape"] = h.shape
        feats = h.reshape(h.shape[0], -1)
        feats, cache["drop_mask"] = dropout(feats, self.dropout)
        cache["feats"] = feats
        out = tc.dense(feats, self.out_weights, self.out_bias)
        if cfg.head == "classification":
            out = softmax(out)
        self._cache = cache if training else None
        return out[0] if single else out

    def backward(self, loss_grad):
        """Reverse pass from the gradient w.r.t. the head's pre-activation
        (the predictions for regression, the logits for classification).

        Overwrites :attr:`grads` and returns it.
        """
        cache = self._cache
        if cache is None:
            raise StateError("backward requires a preceding forward pass in training mode")
        cfg = self.config
        g = np.asarray(loss_grad, dtype=cfg.np_dtype)
        if g.ndim == 1:
            g = g[None]
        grads = {}
        gf, grads["out.weights"], grads["out.bias"] = tc.dense_backward(g, cache["feats"], self.out_weights)
        gf = dropout_backward(gf, cache["drop_mask"])
        gh = gf.reshape(cache["flat_shape"])
        for i in range(len(self.rcls) - 1, -1, -1):
            arg, shape = cache["pools"][i + 1]
            gh = tc.maxpool2d_backward(gh, arg, shape)
            r = self.rcls[i]
            gh, rg = rcl_backward(gh, cache["rcls"][i], r.params, r.bn)
            p = f"rcl{i + 2}"
            for key in ("ff_kernels", "rec_kernels", "bias"):
                grads[f"{p}.{key}"] = rg[key]
            if r.bn is not None:
                grads[f"{p}.bn.gamma"], grads[f"{p}.bn.beta"] = rg["gamma"], rg["beta"]
        arg, shape = cache["pools"][0]
        gh = tc.maxpool2d_backward(gh, arg, shape)
        gz = activate_backward(gh, cache["c1_pre"], "relu")
        grads["c1.bias"] = gz.sum(axis=(0, 2, 3))
        if self.c1_bn is not None:
            gz, grads["c1.bn.gamma"], grads["c1.bn.beta"] = batchnorm_backward(gz, cache["c1_bn"], self.c1_bn)
        _, grads["c1.kernels"], _ = tc.conv2d_backward(gz, cache["x"], self.c1_kernels, C1_SPEC)
        for name, value in grads.items():
            if self.backward_hook is not None:
                value = self.backward_hook(name, value)
            self.grads[name][...] = value
        return self.grads

    def predict(self, windows, batch_size=256):
        """Inference-mode forward over many windows in chunks."""
        windows = np.asarray(windows)
        outs = [self.forward(windows[i : i + batch_size]) for i in range(0, len(windows), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.config.output_size), self.config.np_dtype)


def _bn_entries(prefix, bn):
    return [
        (f"{prefix}.gamma", bn, "gamma", True, False),
        (f"{prefix}.beta", bn, "beta", True, False),
        (f"{prefix}.running_mean", bn, "running_mean", False, False),
        (f"{prefix}.running_var", bn, "running_var", False, False),
    ]


def build_network(config, rng_seed=0):
    """Construct a network; He-normal weights, zero biases, deterministic in the seed."""
    return Network(config, rng_seed)


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   b"RCLNET1"  u8 version
#   u32 config-json length, config json (utf-8)
#   u32 tensor count
#   per tensor: u32 ndim, ndim x u32 extents, float32 LE data
#
# Tensors follow Network.state_tensors() order.

CHECKPOINT_MAGIC = b"RCLNET1"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(net):
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    tensors = list(net.state_tensors().values())
    parts.append(struct.pack("<I", len(tensors)))
    for t in tensors:
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def write_checkpoint(net, path):
    data = checkpoint_bytes(net)
    with open(path, "wb") as fh:
        fh.write(data)


def network_from_bytes(data):
    """Decode a checkpoint; any inconsistency raises :class:`FormatError`."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC.decode()!r}", 0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", pos - 1)
    (n,) = struct.unpack("<I", take(4, "config length"))
    cfg_at = pos
    raw = take(n, "config")
    try:
        config = NetworkConfig.from_dict(json.loads(raw.decode()))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"invalid network config: {exc}", cfg_at) from None
    if parameter_count(config) > len(data) // 4:
        raise FormatError("config describes more parameters than the file holds", cfg_at)
    net = Network(config)
    entries = net.state_tensors()
    count_at = pos
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    if count != len(entries):
        raise FormatError(f"checkpoint holds {count} tensors, config implies {len(entries)}", count_at)
    for name, current in entries.items():
        at = pos
        (ndim,) = struct.unpack("<I", take(4, f"{name} rank"))
        if ndim != current.ndim:
            raise FormatError(f"{name}: rank {ndim}, expected {current.ndim}", at)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        if shape != current.shape:
            raise FormatError(f"{name}: shape {shape}, expected {current.shape}", at)
        values = np.frombuffer(take(4 * current.size, f"{name} data"), dtype="<f4")
        current[...] = values.reshape(shape)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor", pos)
    net.grads = {name: np.zeros_like(p) for name, p in net.parameters().items()}
    return net


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return network_from_bytes(fh.read())
