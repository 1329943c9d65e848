"""Layer primitives with forward and backward rules.

Convolution is direct cross-correlation (no kernel flip) with zero padding.
All layers operate on NCHW tensors from :mod:`afnet.tensor` and register a
backward rule so the whole network is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import storage
from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionMismatchError,
    GeometryError,
)
from .tensor import Tensor, make_op, reduce_mean


class ParamStore:
    """Named collection of learnable tensors plus non-learnable buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ContractError(f"parameter name {name!r} registered twice")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ContractError(f"buffer name {name!r} registered twice")
        self._buffers[name] = value
        return value

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self._buffers)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self._params.items()}
        out.update({name: buf.copy() for name, buf in self._buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching entries in place; returns the names that were skipped."""
        skipped = []
        known = set(self._params) | set(self._buffers)
        for name, arr in state.items():
            if name in self._params:
                t = self._params[name]
                if tuple(t.data.shape) != tuple(arr.shape):
                    raise DimensionMismatchError(
                        f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {tuple(t.data.shape)}")
                t.data = np.asarray(arr, dtype=t.data.dtype).copy()
            elif name in self._buffers:
                buf = self._buffers[name]
                buf[...] = np.asarray(arr, dtype=buf.dtype).reshape(buf.shape)
            else:
                skipped.append(name)
        if strict:
            missing = known - set(state)
            if missing or skipped:
                raise ContractError(
                    f"checkpoint mismatch: missing {sorted(missing)}, unknown {sorted(skipped)}")
        return skipped

    def save(self, path) -> None:
        storage.save_checkpoint(self.state_dict(), path)

    def load(self, path, strict: bool = True) -> list[str]:
        return self.load_state_dict(storage.load_checkpoint(path), strict=strict)


@dataclass
class Conv2dParams:
    weight: Tensor                      # [C_out, C_in, k, k]
    bias: Optional[Tensor] = None       # [C_out]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ContractError(f"conv weight must be [C_out, C_in, k, k], got {w.shape}")
        if w.shape[2] < 1:
            raise ContractError("kernel extent must be >= 1")
        if self.stride < 1:
            raise ContractError("stride must be positive")
        if self.padding < 0:
            raise ContractError("padding must be non-negative")
        if self.bias is not None and self.bias.data.shape != (w.shape[0],):
            raise DimensionMismatchError(
                f"bias shape {self.bias.data.shape} != ({w.shape[0]},)")


def conv_layer(store: ParamStore, name: str, c_in: int, c_out: int, k: int,
               rng: np.random.Generator, stride: int = 1, padding: int = 0,
               bias: bool = True, dtype=np.float32) -> Conv2dParams:
    """Register a conv's parameters with fan-in scaled uniform initialization."""
    fan_in = c_in * k * k
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
    weight = store.register(f"{name}.weight", w)
    b = None
    if bias:
        b = store.register(f"{name}.bias",
                           rng.uniform(-bound, bound, size=(c_out,)).astype(dtype))
    return Conv2dParams(weight=weight, bias=b, stride=stride, padding=padding)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    n, c_in, h, w = x.shape if x.data.ndim == 4 else (None,) * 4
    if n is None:
        raise DimensionMismatchError(f"conv2d expects NCHW input, got rank {x.data.ndim}")
    c_out, c_in_w, k, _ = p.weight.shape
    if c_in != c_in_w:
        raise DimensionMismatchError(
            f"axis 1 (channels): input has {c_in}, weight expects {c_in_w}")
    s, pad = p.stride, p.padding
    oh = (h + 2 * pad - k) // s + 1
    ow = (w + 2 * pad - k) // s + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv2d produces empty output: input {h}x{w}, kernel {k}, stride {s}, pad {pad}")

    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # windows: [N, C_in, oh, ow, k, k]; contract over C_in and the kernel axes
    out = np.tensordot(windows, p.weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.moveaxis(out, 3, 1)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, c_out, 1, 1)

    weight = p.weight
    bias = p.bias

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        wd = weight.data
        for i in range(k):
            for j in range(k):
                # [N, oh, ow, C_in] contribution of kernel tap (i, j)
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.moveaxis(contrib, 3, 1)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return make_op("conv2d", parents, out, lambda g: backward(g)[:2])
    return make_op("conv2d", parents, out, backward)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")
        if np.any(self.running_var < 0):
            raise ContractError("running_var must be non-negative")


def bn_layer(store: ParamStore, name: str, channels: int,
             dtype=np.float32, momentum: float = 0.1,
             epsilon: float = 1e-5) -> BatchNormParams:
    gamma = store.register(f"{name}.gamma", np.ones(channels, dtype=dtype))
    beta = store.register(f"{name}.beta", np.zeros(channels, dtype=dtype))
    rm = store.register_buffer(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
    rv = store.register_buffer(f"{name}.running_var", np.ones(channels, dtype=dtype))
    return BatchNormParams(gamma=gamma, beta=beta, running_mean=rm,
                           running_var=rv, momentum=momentum, epsilon=epsilon)


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionMismatchError(f"batch_norm expects NCHW input, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    if c != p.gamma.data.shape[0]:
        raise DimensionMismatchError(
            f"axis 1 (channels): input has {c}, batch norm expects {p.gamma.data.shape[0]}")
    m = n * h * w
    if m == 0:
        raise DegenerateInputError("batch_norm with zero elements per channel")
    axes = (0, 2, 3)
    cshape = (1, c, 1, 1)
    gamma, beta = p.gamma, p.beta

    if p.mode == "train":
        if m < 2:
            raise DegenerateInputError(
                f"train-mode batch_norm needs >= 2 elements per channel, got {m}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        sigma = np.sqrt(var + p.epsilon)
        xhat = (x.data - mu.reshape(cshape)) / sigma.reshape(cshape)
        out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
        mom = p.momentum
        p.running_mean[...] = (1 - mom) * p.running_mean + mom * mu
        p.running_var[...] = (1 - mom) * p.running_var + mom * var * (m / (m - 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma.data.reshape(cshape)
            mean_dxhat = dxhat.mean(axis=axes).reshape(cshape)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes).reshape(cshape)
            dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) / sigma.reshape(cshape)
            return dx, dgamma, dbeta

    elif p.mode == "eval":
        sigma = np.sqrt(p.running_var + p.epsilon)
        xhat = (x.data - p.running_mean.reshape(cshape)) / sigma.reshape(cshape)
        out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

        def backward(g):
            dgamma = (g * xhat).sum(axes)
            dbeta = g.sum(axes)
            dx = g * (gamma.data / sigma).reshape(cshape)
            return dx, dgamma, dbeta

    else:
        raise ContractError(f"batch_norm mode must be 'train' or 'eval', got {p.mode!r}")

    return make_op("batch_norm", (x, gamma, beta), out, backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        out = np.maximum(x.data, 0)
        mask = x.data > 0

        def backward(g):
            return (g * mask,)

    elif kind == "sigmoid":
        xd = x.data
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        out[~pos] = ex / (1.0 + ex)
        s = out

        def backward(g):
            return (g * s * (1.0 - s),)

    else:
        raise ContractError(f"unknown activation kind {kind!r}")
    return make_op(kind, (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionMismatchError(f"max_pool2d expects NCHW input, got rank {x.data.ndim}")
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"max_pool2d produces empty output: input {h}x{w}, window {k}, stride {stride}")
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, oh, ow, k * k)
    # argmax picks the first occurrence in row-major window order on ties
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    x_shape = x.shape

    def backward(g):
        gx = np.zeros(x_shape, dtype=g.dtype)
        ni, ci, hi, wi = np.indices((n, c, oh, ow), sparse=False)
        hsrc = hi * stride + arg // k
        wsrc = wi * stride + arg % k
        np.add.at(gx, (ni, ci, hsrc, wsrc), g)
        return (gx,)

    return make_op("max_pool2d", (x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, [N,C,H,W] -> [N,C,1,1]."""
    if x.data.ndim != 4:
        raise DimensionMismatchError(f"global_avg_pool expects NCHW input, got rank {x.data.ndim}")
    return reduce_mean(x, axes=(2, 3))


_interp_cache: dict[tuple, np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype) -> np.ndarray:
    key = (n_in, n_out, align_corners, np.dtype(dtype).str)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        if align_corners:
            src = o * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        else:
            src = (o + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        lam = src - i0
        i1 = min(i0 + 1, n_in - 1)
        mat[o, i0] += 1.0 - lam
        mat[o, i1] += lam
    _interp_cache[key] = mat
    return mat


def bilinear_upsample(x: Tensor, scale: int, align_corners: bool = False) -> Tensor:
    """Upsample H and W by an integer factor with bilinear interpolation.

    Default source mapping is half-pixel: src = (dst + 0.5)/scale - 0.5,
    clamped to the borders, so constants are preserved exactly.
    """
    if x.data.ndim != 4:
        raise DimensionMismatchError(f"bilinear_upsample expects NCHW input, got rank {x.data.ndim}")
    if scale < 1:
        raise ContractError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return make_op("bilinear", (x,), x.data.copy(), lambda g: (g,))
    n, c, h, w = x.shape
    wh = _interp_matrix(h, h * scale, align_corners, x.data.dtype)
    ww = _interp_matrix(w, w * scale, align_corners, x.data.dtype)
    tmp = np.tensordot(x.data, wh, axes=([2], [1]))    # [N,C,W,Ho]
    out = np.tensordot(tmp, ww, axes=([2], [1]))       # [N,C,Ho,Wo]

    def backward(g):
        t = np.tensordot(g, ww, axes=([3], [0]))       # [N,C,Ho,Wi]
        gx = np.tensordot(t, wh, axes=([2], [0]))      # [N,C,Wi,Hi] -> fix order
        return (gx.transpose(0, 1, 3, 2),)

    return make_op("bilinear", (x,), out, backward)


def softmax_over_classes(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis with max-subtraction."""
    if logits.data.ndim != 4:
        raise DimensionMismatchError(
            f"softmax_over_classes expects NCHW input, got rank {logits.data.ndim}")
    if logits.shape[1] < 2:
        raise ContractError(f"need K >= 2 classes, got {logits.shape[1]}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)
    s = out

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return make_op("softmax", (logits,), out, backward)
