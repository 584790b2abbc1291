"""Adam training of the patch classifier with geometric learning-rate decay.

The learning rate at epoch k is lr0 * decay**k.  Model selection keeps the
checkpoint with the highest validation accuracy (earliest epoch wins ties).
Runs are bit-reproducible for a given config seed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from patchreg.network import (
    Architecture,
    ModelParams,
    forward_batch,
    init_model,
    model_gradients,
)
from patchreg.sampling import PatchDataset, rng_stream


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_decay: float = 0.8
    dropout: float = 0.5
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not (0 < self.lr_decay <= 1):
            raise ValueError(f"lr_decay must be in (0,1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_decay ** epoch


class AdamState:
    """First/second moment accumulators shaped like the model parameters."""

    def __init__(self, model: ModelParams):
        self.m = [np.zeros_like(a) for a in model.param_arrays()]
        self.v = [np.zeros_like(a) for a in model.param_arrays()]
        self.t = 0


def adam_step(model: ModelParams, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place."""
    params = model.param_arrays()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return model, state


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = -1.0

    @property
    def lr(self) -> list[float]:
        return [r.lr for r in self.records]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,lr,train_loss,val_accuracy\n")
        for r in self.records:
            out.write(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_accuracy!r}\n")
        return out.getvalue()


def validate_accuracy(model: ModelParams, val_set: PatchDataset) -> float:
    """Fraction of pairs classified correctly in eval mode.

    Exactly tied logits resolve to class 0 (argmax takes the first max).
    """
    if len(val_set) == 0:
        raise ValueError("empty validation set")
    correct = 0
    for start in range(0, len(val_set), 256):
        idx = np.arange(start, min(start + 256, len(val_set)))
        x = np.stack([val_set.u[idx], val_set.v[idx]], axis=1)
        logits, _ = forward_batch(model, x, train=False)
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == val_set.z[idx]))
    return correct / len(val_set)


def train(dataset: PatchDataset, val_set: PatchDataset, cfg: TrainConfig,
          arch: Architecture | None = None):
    """Train a classifier; returns (best_model, history).

    Shuffles per epoch, applies Adam per batch at the epoch's decayed
    learning rate, and checkpoints on validation accuracy.
    """
    if len(dataset) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    model = init_model(arch, seed=cfg.seed)
    state = AdamState(model)
    shuffle_rng = rng_stream(cfg.seed, 1)
    dropout_rng = rng_stream(cfg.seed, 2)

    history = TrainHistory()
    best_model = model.copy()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(len(dataset))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = dataset.subset(idx)
            loss, grads = model_gradients(
                model, batch, weight_decay=cfg.weight_decay, mode="train",
                rng=dropout_rng, drop_rate=cfg.dropout,
            )
            adam_step(model, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / len(order)
        val_acc = validate_accuracy(model, val_set)
        history.records.append(EpochRecord(epoch, lr, train_loss, val_acc))
        if val_acc > history.best_val_accuracy:
            history.best_val_accuracy = val_acc
            history.best_epoch = epoch
            best_model = model.copy()
    return best_model, history
