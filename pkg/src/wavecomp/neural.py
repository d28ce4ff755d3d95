"""Small numpy network library: MLPs, a GRU cell, manual backprop, optimizers.

Layers use the row-vector convention ``y = x @ W + b``.  Everything is
float64.  Parameters live in :class:`NetworkParams`, an ordered name ->
array mapping whose ``version`` counter is bumped by every in-place update so
stale forward caches can be detected.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, ModelStateError, TrainingError

ACTIVATIONS = ("tanh", "linear")


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


class NetworkParams:
    """Ordered mapping of tensor name to float64 array."""

    def __init__(self, tensors=None):
        self._t = {}
        self.version = 0
        for name, arr in (tensors or {}).items():
            self[name] = arr

    def __setitem__(self, name, arr):
        arr = np.array(arr, dtype=np.float64)
        if arr.ndim == 0 or any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor {name!r} needs a positive shape, got {arr.shape}")
        self._t[name] = arr

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def keys(self):
        return self._t.keys()

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def copy(self):
        return NetworkParams({k: v.copy() for k, v in self._t.items()})

    def zeros_like(self):
        return NetworkParams({k: np.zeros_like(v) for k, v in self._t.items()})

    @property
    def size(self):
        return sum(v.size for v in self._t.values())

    def checksum(self):
        h = hashlib.sha256()
        for k, v in self._t.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._t.items())
        return f"NetworkParams({shapes})"


def merge_prefixed(groups):
    """Combine ``{prefix: NetworkParams}`` into one set named ``prefix/name``."""
    out = NetworkParams()
    for prefix, params in groups.items():
        for k, v in params.items():
            out[f"{prefix}/{k}"] = v
    return out


def split_prefixed(params, prefix):
    pre = prefix + "/"
    sub = NetworkParams({k[len(pre):]: v for k, v in params.items() if k.startswith(pre)})
    if not len(sub):
        raise DimensionError(f"no tensors with prefix {prefix!r}")
    return sub


# -- feedforward ------------------------------------------------------------

@dataclass(frozen=True)
class FeedforwardSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"network dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS or self.output_activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self):
        return len(self.hidden_dims) + 1

    def shapes(self):
        d = self.layer_dims
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = (d[i], d[i + 1])
            out[f"b{i}"] = (d[i + 1],)
        return out


def _uniform_fan_in(rng, fan_in, shape):
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def init_feedforward(spec: FeedforwardSpec, rng, output_scale=1.0, gain=1.0) -> NetworkParams:
    """Uniform ``+-gain/sqrt(fan_in)`` init with zero biases.

    The last layer uses ``output_scale`` in place of ``gain``.
    """
    p = NetworkParams()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        w = _uniform_fan_in(rng, fan_in, (fan_in, fan_out))
        w *= output_scale if i == spec.n_layers - 1 else gain
        p[f"W{i}"] = w
        p[f"b{i}"] = np.zeros(fan_out)
    return p


def check_params(params: NetworkParams, shapes: dict):
    """Raise :class:`DimensionError` naming the first mismatching tensor."""
    for name, shape in shapes.items():
        if name not in params:
            raise DimensionError(f"missing tensor {name!r} (expected shape {shape})")
        if params[name].shape != tuple(shape):
            raise DimensionError(f"tensor {name!r} has shape {params[name].shape}, expected {tuple(shape)}")


@dataclass
class ForwardCache:
    params_id: int
    params_version: int
    lead_shape: tuple
    inputs: list = field(default_factory=list)  # input to each layer, 2-D
    outputs: list = field(default_factory=list)  # activated output of each layer, 2-D

    @property
    def features(self):
        """Activations feeding the last layer (the penultimate features)."""
        return self.inputs[-1].reshape(self.lead_shape + (self.inputs[-1].shape[-1],))


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def forward(params: NetworkParams, spec: FeedforwardSpec, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise DimensionError(f"input has shape {x.shape}, expected last dim {spec.input_dim}")
    check_params(params, spec.shapes())
    lead = x.shape[:-1]
    h = x.reshape(-1, spec.input_dim)
    cache = ForwardCache(id(params), params.version, lead)
    for i in range(spec.n_layers):
        cache.inputs.append(h)
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        last = i == spec.n_layers - 1
        h = _act(spec.output_activation if last else spec.activation, z)
        cache.outputs.append(h)
    return h.reshape(lead + (spec.output_dim,)), cache


def _check_fresh(params, cache):
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise ModelStateError("forward cache is stale: parameters changed since the forward pass")


def backward(params: NetworkParams, spec: FeedforwardSpec, cache: ForwardCache, grad_out):
    """Reverse pass.  Returns ``(param_grads, input_grad)``."""
    _check_fresh(params, cache)
    g = np.asarray(grad_out, dtype=float).reshape(-1, spec.output_dim)
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise DimensionError(f"output gradient has {g.shape[0]} rows, cache has {cache.inputs[0].shape[0]}")
    grads = NetworkParams()
    for i in reversed(range(spec.n_layers)):
        last = i == spec.n_layers - 1
        if (spec.output_activation if last else spec.activation) == "tanh":
            g = g * (1.0 - cache.outputs[i] ** 2)
        grads[f"W{i}"] = cache.inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
    ordered = NetworkParams({k: grads[k] for k in spec.shapes()})
    return ordered, g.reshape(cache.lead_shape + (spec.input_dim,))


# -- gated recurrent cell ---------------------------------------------------

@dataclass(frozen=True)
class RecurrentCellSpec:
    """GRU cell with a linear readout ``y = h @ Wo + bo``."""

    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ConfigError("recurrent cell dims must be >= 1")

    def shapes(self):
        i, h, o = self.input_dim, self.hidden_dim, self.output_dim
        return {"Wx": (i, 3 * h), "bx": (3 * h,), "Uh": (h, 3 * h), "bh": (3 * h,),
                "Wo": (h, o), "bo": (o,)}


def init_recurrent(spec: RecurrentCellSpec, rng, output_scale=1.0) -> NetworkParams:
    i, h, o = spec.input_dim, spec.hidden_dim, spec.output_dim
    return NetworkParams({
        "Wx": _uniform_fan_in(rng, h, (i, 3 * h)),
        "bx": np.zeros(3 * h),
        "Uh": _uniform_fan_in(rng, h, (h, 3 * h)),
        "bh": np.zeros(3 * h),
        "Wo": _uniform_fan_in(rng, h, (h, o)) * output_scale,
        "bo": np.zeros(o),
    })


@dataclass
class RecurrentCache:
    params_id: int
    params_version: int
    steps: list = field(default_factory=list)


def _gru_step(params, spec, x, h):
    H = spec.hidden_dim
    gx = x @ params["Wx"] + params["bx"]
    gh = h @ params["Uh"] + params["bh"]
    z = sigmoid(gx[:, :H] + gh[:, :H])
    r = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
    h_new = (1.0 - z) * n + z * h
    y = h_new @ params["Wo"] + params["bo"]
    return y, h_new, (x, h, z, r, n, gh[:, 2 * H:], h_new)


def _check_recurrent_inputs(params, spec, x, h):
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"input has shape {x.shape}, expected last dim {spec.input_dim}")
    if h.shape[-1] != spec.hidden_dim:
        raise DimensionError(f"hidden has shape {h.shape}, expected last dim {spec.hidden_dim}")
    check_params(params, spec.shapes())


def recurrent_step(params: NetworkParams, spec: RecurrentCellSpec, x, h):
    """One GRU step.  Returns ``(output, new_hidden, cache)``; batch-first 2-D or 1-D."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    _check_recurrent_inputs(params, spec, x, h)
    squeeze = x.ndim == 1
    y, h_new, saved = _gru_step(params, spec, np.atleast_2d(x), np.atleast_2d(h))
    cache = RecurrentCache(id(params), params.version, [saved])
    if squeeze:
        return y[0], h_new[0], cache
    return y, h_new, cache


def recurrent_sequence(params: NetworkParams, spec: RecurrentCellSpec, xs, h0):
    """Run over ``xs`` of shape ``(T, B, input_dim)`` from ``h0`` ``(B, H)``.

    Returns ``(ys (T, B, out), h_T, cache)``.
    """
    xs = np.asarray(xs, dtype=float)
    h = np.asarray(h0, dtype=float)
    if xs.ndim != 3:
        raise DimensionError(f"sequence input must be (T, B, D), got {xs.shape}")
    _check_recurrent_inputs(params, spec, xs, h)
    cache = RecurrentCache(id(params), params.version)
    ys = np.empty((xs.shape[0], xs.shape[1], spec.output_dim))
    for t in range(xs.shape[0]):
        ys[t], h, saved = _gru_step(params, spec, xs[t], h)
        cache.steps.append(saved)
    return ys, h, cache


def recurrent_sequence_backward(params: NetworkParams, spec: RecurrentCellSpec, cache: RecurrentCache,
                                grad_ys, grad_h_last=None):
    """Backprop through time.  Returns ``(param_grads, input_grads, h0_grad)``."""
    _check_fresh(params, cache)
    H = spec.hidden_dim
    grad_ys = np.asarray(grad_ys, dtype=float)
    if grad_ys.ndim == 2:
        grad_ys = grad_ys[None]
    T = len(cache.steps)
    if grad_ys.shape[0] != T:
        raise DimensionError(f"got {grad_ys.shape[0]} output gradients for {T} cached steps")
    grads = params.zeros_like()
    B = cache.steps[0][0].shape[0]
    dh = np.zeros((B, H)) if grad_h_last is None else np.array(grad_h_last, dtype=float).reshape(B, H)
    dxs = np.empty((T, B, spec.input_dim))
    Wo, Wx, Uh = params["Wo"], params["Wx"], params["Uh"]
    for t in reversed(range(T)):
        x, h, z, r, n, ghn, h_new = cache.steps[t]
        gy = grad_ys[t].reshape(B, spec.output_dim)
        grads["Wo"] += h_new.T @ gy
        grads["bo"] += gy.sum(axis=0)
        dh = dh + gy @ Wo.T
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (h - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx = np.concatenate([dz_pre, dr_pre, dn_pre], axis=1)
        dgh = np.concatenate([dz_pre, dr_pre, dn_pre * r], axis=1)
        grads["Wx"] += x.T @ dgx
        grads["bx"] += dgx.sum(axis=0)
        grads["Uh"] += h.T @ dgh
        grads["bh"] += dgh.sum(axis=0)
        dxs[t] = dgx @ Wx.T
        dh = dh * z + dgh @ Uh.T
    return grads, dxs, dh


# -- optimization -----------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, clip_norm):
    norm = global_norm(grads)
    if clip_norm is None or norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    return NetworkParams({k: g * scale for k, g in grads.items()}), norm


def optimize_step(params: NetworkParams, grads: NetworkParams, state: Optional[OptimizerState],
                  config: OptimizerConfig):
    """Apply one (clipped) update in place.  Returns ``(params, state)``."""
    state = state or OptimizerState()
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise DimensionError(f"gradient {k!r} does not match the parameters")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in tensor {k!r}")
    grads, _ = clip_by_global_norm(grads, config.clip_norm)
    state.step += 1
    lr = config.learning_rate
    if config.kind == "sgd":
        for k, g in grads.items():
            if config.momentum:
                buf = state.m.get(k)
                buf = g.copy() if buf is None else config.momentum * buf + g
                state.m[k] = buf
                g = buf
            params[k] -= lr * g
    else:
        b1, b2 = config.beta1, config.beta2
        c1 = 1.0 - b1 ** state.step
        c2 = 1.0 - b2 ** state.step
        for k, g in grads.items():
            m = state.m.get(k)
            v = state.v.get(k)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            state.m[k], state.v[k] = m, v
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    params.version += 1
    return params, state


# -- checkpoints ------------------------------------------------------------

MAGIC = b"WVC1"
FORMAT_VERSION = 1


def checkpoint_bytes(params: NetworkParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: NetworkParams, path):
    """Write ``WVC1`` + version + tensor table with little-endian float64 payloads."""
    data = checkpoint_bytes(params)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count != 1 else vals[0]


def load_checkpoint(path, expected_shapes: Optional[dict] = None) -> NetworkParams:
    data = Path(path).read_bytes()
    rd = _Reader(data, path)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a WVC1 checkpoint")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    count = rd.u32()
    params = NetworkParams()
    for _ in range(count):
        try:
            name = rd.take(rd.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: bad tensor name") from exc
        rank = rd.u32()
        dims = rd.u32(rank) if rank != 1 else (rd.u32(),)
        dims = tuple(dims) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        if name in params:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        params[name] = arr
    if rd.pos != len(data):
        raise FormatError(f"{path}: {len(data) - rd.pos} trailing bytes")
    if expected_shapes is not None:
        check_params(params, expected_shapes)
        extra = set(params.keys()) - set(expected_shapes)
        if extra:
            raise DimensionError(f"unexpected tensors in checkpoint: {sorted(extra)}")
    return params


# -- finite differences -----------------------------------------------------

def numerical_gradient(loss_fn: Callable[[], float], params: NetworkParams, eps=1e-5) -> NetworkParams:
    """Central differences of ``loss_fn()`` with respect to every entry of ``params``."""
    out = params.zeros_like()
    for name, arr in params.items():
        flat = arr.reshape(-1)
        g = out[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            params.version += 1
            up = loss_fn()
            flat[i] = old - eps
            params.version += 1
            down = loss_fn()
            flat[i] = old
            params.version += 1
            g[i] = (up - down) / (2 * eps)
    return out


def max_relative_error(analytic, numeric, floor=1e-5):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all tensors."""
    worst = 0.0
    for name in numeric.keys():
        a, n = np.asarray(analytic[name]), np.asarray(numeric[name])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
