"""ADAM, step learning-rate schedule, the training loop and LOSO folds."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import Dataset
from .dsl import ModelConfig
from .model import Network

log = logging.getLogger(__name__)

# samples used to re-estimate batch-norm statistics after each epoch
CALIBRATION_SAMPLES = 4096


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: tuple[tuple[int, float], ...] = ((100, 0.1), (150, 0.1))
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", tuple(tuple(s) for s in self.lr_schedule))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        marks = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(marks, marks[1:])):
            raise ValueError("lr schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, mult in self.lr_schedule:
            if e <= epoch:
                lr *= mult
        return lr


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update. Returns new parameter arrays; ``state`` is updated."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append((p - step).astype(p.dtype, copy=False))
    return out


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_error: float
    val_error: float | None = None
    val_loss: float | None = None


@dataclass
class TrainResult:
    network: Network
    history: list[EpochMetrics] = field(default_factory=list)

    @property
    def final_val_error(self) -> float | None:
        return self.history[-1].val_error if self.history else None

    @property
    def best_val_error(self) -> float | None:
        vals = [h.val_error for h in self.history if h.val_error is not None]
        return min(vals) if vals else None

    @property
    def final_train_error(self) -> float:
        return self.history[-1].train_error


def evaluate(net: Network, data: Dataset, packed: bool = False, batch_size: int = 512) -> tuple[float, float]:
    """(error %, mean loss) with inference-mode batch norm."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    wrong, loss = 0, 0.0
    for i in range(0, len(data), batch_size):
        xb, yb = data.x[i:i + batch_size], data.y[i:i + batch_size]
        if packed:
            logits = net.predict_packed(xb)
        else:
            logits = net.forward(xb).data
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss -= float(logp[np.arange(len(yb)), yb].sum())
        wrong += int((logits.argmax(axis=1) != yb).sum())
    return 100.0 * wrong / len(data), loss / len(data)


def train(model: ModelConfig, data: Dataset, cfg: TrainConfig, val: Dataset | None = None,
          quantize: bool = True, metrics_path=None, dtype=np.float32, progress=None) -> TrainResult:
    """Train for exactly ``cfg.epochs`` epochs; no early stopping.

    Train error is measured after each epoch with inference-mode batch norm.
    Deterministic for a fixed ``cfg.seed``.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.sample_shape != tuple(model.input_shape):
        raise ValueError(f"data samples {data.sample_shape} do not match model input {model.input_shape}")
    if data.bit_width != model.M:
        raise ValueError(f"data has M={data.bit_width}, model expects M={model.M}")
    net = Network(model, seed=cfg.seed, dtype=dtype, quantize=quantize)
    params = net.parameters()
    state = AdamState.fresh([p.data for p in params])
    rng = np.random.default_rng([cfg.seed, 1])
    calib = np.sort(np.random.default_rng([cfg.seed, 2]).permutation(len(data))[:CALIBRATION_SAMPLES])
    result = TrainResult(net)
    writer = _MetricsWriter(metrics_path) if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            order = rng.permutation(len(data))
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                if len(idx) < 2 and len(order) > 1:
                    continue  # batch norm needs at least two samples
                logits = net.forward(data.x[idx], training=True, rng=rng)
                loss = ag.softmax_cross_entropy(logits, data.y[idx])
                if not math.isfinite(float(loss.data)):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                ag.zero_grad(params)
                ag.backward(loss, params)
                new = adam_step([p.data for p in params], [p.grad for p in params], state, lr,
                                cfg.beta1, cfg.beta2, cfg.eps)
                for p, d in zip(params, new):
                    p.data = d
            net.recalibrate_bn(data.x[calib])
            tr_err, tr_loss = evaluate(net, data)
            if not math.isfinite(tr_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            m = EpochMetrics(epoch, lr, tr_loss, tr_err)
            if val is not None and len(val):
                m.val_error, m.val_loss = evaluate(net, val)
            result.history.append(m)
            if writer:
                writer.write(m)
            if progress:
                progress(m)
    finally:
        if writer:
            writer.close()
    return result


class _MetricsWriter:
    FIELDS = ("epoch", "split", "error_pct", "loss", "lr")

    def __init__(self, path):
        self.f = Path(path).open("w", newline="")
        self.w = csv.writer(self.f)
        self.w.writerow(self.FIELDS)

    def write(self, m: EpochMetrics):
        self.w.writerow([m.epoch, "train", repr(m.train_error), repr(m.train_loss), repr(m.lr)])
        if m.val_error is not None:
            self.w.writerow([m.epoch, "val", repr(m.val_error), repr(m.val_loss), repr(m.lr)])
        self.f.flush()

    def close(self):
        self.f.close()


@dataclass(frozen=True)
class FoldPlan:
    subject_ids: tuple
    held_out: tuple

    def __post_init__(self):
        if sorted(map(str, self.held_out)) != sorted(map(str, self.subject_ids)):
            raise ValueError("every subject must be held out exactly once")


def loso_split(subjects, subject_list=None):
    """Leave-one-subject-out folds.

    Returns the plan and a list of ``(train_idx, val_idx)`` index arrays, one per
    held-out subject.
    """
    subjects = np.asarray(subjects)
    ids = list(dict.fromkeys(subject_list)) if subject_list is not None else list(dict.fromkeys(subjects.tolist()))
    if len(ids) < 2:
        raise ValueError("LOSO needs at least two subjects")
    folds = []
    for s in ids:
        val_idx = np.flatnonzero(subjects == s)
        if len(val_idx) == 0:
            raise ValueError(f"subject {s!r} has no samples")
        train_idx = np.flatnonzero(np.isin(subjects, ids) & (subjects != s))
        folds.append((train_idx, val_idx))
    return FoldPlan(tuple(ids), tuple(ids)), folds


def run_loso(model: ModelConfig, data: Dataset, cfg: TrainConfig, subject_list=None, **kw) -> dict:
    """Train one model per fold; the reported metric is the mean over folds."""
    plan, folds = loso_split(data.subjects, subject_list)
    finals, bests = [], []
    for s, (tr, va) in zip(plan.held_out, folds):
        res = train(model, data.subset(tr), cfg, val=data.subset(va), **kw)
        finals.append(res.final_val_error)
        bests.append(res.best_val_error)
        log.info("fold %s: final %.2f%% best %.2f%%", s, finals[-1], bests[-1])
    return {"subjects": list(plan.subject_ids), "final": finals, "best": bests,
            "mean_final": float(np.mean(finals)), "mean_best": float(np.mean(bests))}
