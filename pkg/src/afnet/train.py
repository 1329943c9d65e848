"""Loss, deep supervision, Adam, warmup+step learning rate, augmentation, training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .arch import SegModel
from .errors import ContractError, DegenerateInputError, ValidationError
from .layers import ParamStore
from .tensor import Tensor, add, backward, make_op, no_grad


def cross_entropy_loss(logits: Tensor, labels: np.ndarray,
                       ignore_index: Optional[int] = None) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    The usual negated form, so optimization drives the value toward 0.
    """
    if logits.data.ndim != 4:
        raise ContractError(f"logits must be [N,K,H,W], got rank {logits.data.ndim}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ContractError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = np.ones(labels.shape, dtype=bool)
    if ignore_index is not None:
        valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        values = sorted(np.unique(labels[bad]).tolist())
        raise ValidationError(f"labels outside [0,{k}): {values}")
    count = int(valid.sum())
    if count == 0:
        raise DegenerateInputError("cross_entropy_loss: every pixel is ignored")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_probs, safe[:, None], axis=1)[:, 0]
    loss_val = -(picked * valid).sum() / count
    out = np.full((1, 1, 1, 1), loss_val, dtype=logits.data.dtype)

    def backward_fn(g):
        probs = np.exp(log_probs)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (probs - onehot) * valid[:, None] / count
        return (grad * g.reshape(()),)

    return make_op("cross_entropy", (logits,), out, backward_fn)


def deep_supervision_loss(stage_logits: Sequence[Tensor], labels: np.ndarray,
                          ignore_index: Optional[int] = None) -> Tensor:
    """Unweighted sum of the per-stage cross entropies."""
    stage_logits = list(stage_logits)
    if not stage_logits:
        raise ContractError("deep_supervision_loss needs at least one stage")
    total = None
    for logits in stage_logits:
        term = cross_entropy_loss(logits, labels, ignore_index)
        total = term if total is None else add(total, term)
    return total


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _decays(name: str, tensor: Tensor) -> bool:
    # L2 on conv kernels only; biases and BN affine parameters are exempt
    return tensor.data.ndim == 4


def adam_step(params: ParamStore, state: AdamState, lr: float) -> None:
    """One Adam update with bias correction; L2 folded into the gradient."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name, p in params.parameters().items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        g = p.grad
        if state.weight_decay and _decays(name, p):
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class LrSchedule:
    lr0: float = 1e-5
    lr1: float = 1e-3
    warmup_epochs: int = 100
    step_interval_epochs: int = 200
    step_factor: float = 0.1
    iters_per_epoch: int = 1

    def __post_init__(self):
        if self.lr0 <= 0 or self.lr1 <= 0:
            raise ContractError("lr0 and lr1 must be positive")
        if not 0 < self.step_factor < 1:
            raise ContractError("step_factor must be in (0, 1)")
        if self.iters_per_epoch < 1 or self.warmup_epochs < 0 or self.step_interval_epochs < 1:
            raise ContractError("schedule counts must be positive")


def lr_schedule(epoch: int, iter_in_epoch: int, s: LrSchedule) -> float:
    """Exponential warmup from lr0 to lr1, then a step drop every interval.

    The warmup exponent is current/total iterations, so the rate reaches lr1
    exactly at the warmup boundary; drops are measured from that boundary.
    """
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    if epoch < s.warmup_epochs:
        total = s.warmup_epochs * s.iters_per_epoch
        current = epoch * s.iters_per_epoch + iter_in_epoch
        return s.lr0 * (s.lr1 / s.lr0) ** (current / total)
    drops = (epoch - s.warmup_epochs) // s.step_interval_epochs
    return s.lr1 * s.step_factor ** drops


@dataclass
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate90: bool = True
    crop: Optional[int] = None   # network input size; None keeps the slice size


@dataclass
class Sample:
    image: np.ndarray            # [C,H,W] float32
    aux: np.ndarray              # [C,H,W] float32
    label: np.ndarray            # [H,W] integer class map

    def __post_init__(self):
        shapes = {self.image.shape[1:], self.aux.shape[1:], self.label.shape}
        if len(shapes) != 1:
            raise ContractError(f"sample rasters disagree on extent: {sorted(shapes)}")


def crop_offset_range(extent: int, crop: int) -> tuple[int, int]:
    """Inclusive offset range for a random crop (extent-crop+1 placements)."""
    return 0, extent - crop


def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """One identical geometric transform for image, aux, and label.

    Rotations are 90-degree multiples and flips are pixel permutations, so
    the categorical label never needs interpolation.
    """
    img, aux, label = sample.image, sample.aux, sample.label
    if cfg.hflip and rng.integers(2):
        img, aux, label = img[:, :, ::-1], aux[:, :, ::-1], label[:, ::-1]
    if cfg.vflip and rng.integers(2):
        img, aux, label = img[:, ::-1], aux[:, ::-1], label[::-1]
    if cfg.rotate90:
        k = int(rng.integers(4))
        if k:
            img = np.rot90(img, k, axes=(1, 2))
            aux = np.rot90(aux, k, axes=(1, 2))
            label = np.rot90(label, k, axes=(0, 1))
    if cfg.crop is not None:
        h, w = label.shape
        if cfg.crop > h or cfg.crop > w:
            raise ContractError(f"crop {cfg.crop} larger than slice {h}x{w}")
        if cfg.crop < h or cfg.crop < w:
            oy = int(rng.integers(0, h - cfg.crop + 1))
            ox = int(rng.integers(0, w - cfg.crop + 1))
            img = img[:, oy:oy + cfg.crop, ox:ox + cfg.crop]
            aux = aux[:, oy:oy + cfg.crop, ox:ox + cfg.crop]
            label = label[oy:oy + cfg.crop, ox:ox + cfg.crop]
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(aux),
                  np.ascontiguousarray(label))


@dataclass
class TrainHyper:
    epochs: int = 200
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    ignore_index: Optional[int] = 255


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None

    def log_line(self) -> str:
        fmt = lambda x: "" if x is None else f"{x:.6g}"
        return f"{self.epoch},{self.lr:.6g},{self.train_loss:.6g},{fmt(self.val_loss)},{fmt(self.val_acc)}"


@dataclass
class TrainResult:
    records: list
    best_state: dict
    last_state: dict
    optimizer: AdamState
    best_epoch: Optional[int]


def _stack_batch(samples: Sequence[Sample], dtype):
    main = Tensor(np.stack([s.image for s in samples]).astype(dtype))
    aux = Tensor(np.stack([s.aux for s in samples]).astype(dtype))
    labels = np.stack([s.label for s in samples]).astype(np.int64)
    return main, aux, labels


def evaluate(model: SegModel, samples: Sequence[Sample],
             ignore_index: Optional[int] = 255) -> tuple[float, float]:
    """Mean deep-supervision loss and pixel accuracy of the finest head."""
    model.set_mode("eval")
    losses, correct, total = [], 0, 0
    with no_grad():
        for s in samples:
            main, aux, labels = _stack_batch([s], model.dtype)
            aux_arg = None if model.variant.tag == "DFN" else aux
            logits = model.forward(main, aux_arg)
            losses.append(deep_supervision_loss(logits, labels, ignore_index).data.item())
            pred = logits[-1].data.argmax(axis=1)
            valid = labels != ignore_index if ignore_index is not None else np.ones_like(labels, bool)
            correct += int(((pred == labels) & valid).sum())
            total += int(valid.sum())
    acc = correct / total if total else 0.0
    return float(np.mean(losses)), acc


def train_loop(dataset: Sequence[Sample], model: SegModel, schedule: LrSchedule,
               hyper: TrainHyper, augment_cfg: Optional[AugmentConfig] = None,
               val_set: Optional[Sequence[Sample]] = None,
               on_epoch: Optional[Callable[[EpochRecord], None]] = None,
               optimizer: Optional[AdamState] = None) -> TrainResult:
    """Deterministic training given a seed; returns best/last states and the log."""
    dataset = list(dataset)
    if not dataset:
        raise ContractError("train_loop: dataset is empty")
    rng = np.random.default_rng(hyper.seed)
    state = optimizer or AdamState(beta1=hyper.beta1, beta2=hyper.beta2,
                                   eps=hyper.eps, weight_decay=hyper.weight_decay)
    iters = schedule.iters_per_epoch
    records: list[EpochRecord] = []
    best_acc, best_state, best_epoch = -1.0, None, None
    start_epoch = state.t // iters

    for epoch in range(start_epoch, start_epoch + hyper.epochs):
        model.set_mode("train")
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for it in range(iters):
            idx = [int(order[(it * hyper.batch_size + j) % len(dataset)])
                   for j in range(hyper.batch_size)]
            batch = [augment(dataset[i], rng, augment_cfg) if augment_cfg else dataset[i]
                     for i in idx]
            main, aux, labels = _stack_batch(batch, model.dtype)
            aux_arg = None if model.variant.tag == "DFN" else aux
            logits = model.forward(main, aux_arg)
            loss = deep_supervision_loss(logits, labels, hyper.ignore_index)
            model.store.zero_grad()
            backward(loss)
            lr = lr_schedule(epoch, it, schedule)
            adam_step(model.store, state, lr)
            epoch_losses.append(loss.data.item())

        record = EpochRecord(epoch=epoch, lr=lr_schedule(epoch, 0, schedule),
                             train_loss=float(np.mean(epoch_losses)))
        if val_set:
            record.val_loss, record.val_acc = evaluate(model, val_set, hyper.ignore_index)
            if record.val_acc > best_acc:
                best_acc, best_epoch = record.val_acc, epoch
                best_state = model.store.state_dict()
        records.append(record)
        if on_epoch:
            on_epoch(record)

    last_state = model.store.state_dict()
    if best_state is None:
        best_state, best_epoch = last_state, records[-1].epoch if records else None
    return TrainResult(records=records, best_state=best_state, last_state=last_state,
                       optimizer=state, best_epoch=best_epoch)
