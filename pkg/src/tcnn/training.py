"""Training loop: Adam with bias correction, multi-step LR schedule, weighted
batch sampling with augmentation, best-checkpoint selection by validation F1,
and wall-clock accounting for the training-time-improvement metric.

Reproducibility contract: (model seed, data seed, config) fully determine
every recorded loss and the final parameters, bit for bit, at a fixed thread
count. All sampling and augmentation randomness comes from counter-based
substreams keyed by the data seed and the (epoch, step) pair.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as tcnn_rng
from .data import AugmentConfig, SplitDataset, augment, stack_images
from .layers import softmax_cross_entropy, softmax_cross_entropy_backward
from .metrics import confusion, quality
from .model import Model, predict_scores


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: loss={loss}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 32
    lr_initial: float = 3e-4
    lr_floor: float = 1e-6
    lr_decay: float = 0.1
    milestones: tuple[int, ...] | None = None  # None: decay at 50% and 85%
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0  # model/optimizer stream
    data_seed: int = 0  # sampling/augmentation stream
    threshold: float = 0.2  # decision threshold for validation F1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_floor > self.lr_initial:
            raise ValueError("lr_floor must not exceed lr_initial")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(sorted(self.milestones))
        return (int(self.epochs * 0.5), int(self.epochs * 0.85))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule: multiply by the decay factor at each
    milestone, never dropping below the floor."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    n_hits = sum(1 for m in cfg.resolved_milestones() if epoch >= m)
    return max(cfg.lr_initial * cfg.lr_decay ** n_hits, cfg.lr_floor)


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update with bias-corrected moments; parameters are updated in
    place. Non-finite gradients abort with the offending parameter named."""
    state.t += 1
    t = state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{key} with shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {key} at step {t}")
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_precision: float
    val_recall: float
    val_f1: float
    lr: float
    wall_seconds: float

    def to_json_dict(self) -> dict:
        def none_if_nan(x: float):
            return None if math.isnan(x) else x

        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_precision": none_if_nan(self.val_precision),
            "val_recall": none_if_nan(self.val_recall),
            "val_f1": none_if_nan(self.val_f1),
            "lr": self.lr,
        }


@dataclass
class TrainRecord:
    """Per-epoch history plus best-epoch selection and total wall time.

    Wall-clock fields are kept out of the deterministic serialization
    (:meth:`to_jsonl`) and surface only through :meth:`timing_dict`, so two
    identically seeded runs serialize identically.
    """

    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    total_wall_seconds: float = 0.0
    seed: int = 0
    data_seed: int = 0

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e.to_json_dict(), sort_keys=True) + "\n" for e in self.epochs
        )

    def timing_dict(self) -> dict:
        return {
            "total_wall_seconds": self.total_wall_seconds,
            "epoch_wall_seconds": [e.wall_seconds for e in self.epochs],
        }


def _validation_f1(model: Model, val_images: np.ndarray, val_labels: np.ndarray,
                   threshold: float) -> tuple[float, float, float]:
    scores = predict_scores(model, val_images)
    q = quality(confusion(scores, val_labels, threshold))
    return q.precision, q.recall, q.f1


def train(model: Model, dataset: SplitDataset, cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None) -> tuple[Model, TrainRecord]:
    """Run the full optimization loop and return (best model, record).

    Each epoch draws ``ceil(n_train / batch_size)`` batches with replacement,
    with per-sample probabilities inversely proportional to class frequency,
    augments them, and takes one Adam step per batch. The returned model is a
    copy of the parameters from the epoch with the highest validation F1
    (ties resolved to the earliest epoch).
    """
    if augment_cfg is None:
        augment_cfg = AugmentConfig()
    weights = dataset.train_weights
    probs = weights / weights.sum()
    n_train = len(dataset.train)
    n_batches = math.ceil(n_train / cfg.batch_size)
    val_images, val_labels = stack_images(dataset.val)

    layer_params = [layer.params() for layer in model.layers]
    states = [AdamState.for_params(p) for p in layer_params]

    record = TrainRecord(seed=cfg.seed, data_seed=cfg.data_seed)
    best_f1 = -1.0
    best_model = model.copy()
    t_start = time.perf_counter()

    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        lr = lr_at(epoch, cfg)
        loss_sum = 0.0
        for step in range(n_batches):
            gen = tcnn_rng.stream(cfg.data_seed, epoch * n_batches + step + 1)
            idx = gen.choice(n_train, size=cfg.batch_size, replace=True, p=probs)
            batch = [augment(dataset.train[i], augment_cfg, gen) for i in idx]
            images, labels = stack_images(batch)

            logits = model.forward(images)
            loss, probs_out = softmax_cross_entropy(logits, labels)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            loss_sum += loss
            grads = model.backward(softmax_cross_entropy_backward(probs_out, labels))
            for params, g, state in zip(layer_params, grads, states):
                if params:
                    adam_step(params, g, state, lr, cfg.beta1, cfg.beta2, cfg.eps)

        vp, vr, vf1 = _validation_f1(model, val_images, val_labels, cfg.threshold)
        record.epochs.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_batches,
            val_precision=vp,
            val_recall=vr,
            val_f1=vf1,
            lr=lr,
            wall_seconds=time.perf_counter() - t_epoch,
        ))
        score = -1.0 if math.isnan(vf1) else vf1
        if score > best_f1:
            best_f1 = score
            best_model = model.copy()
            record.best_epoch = epoch

    record.total_wall_seconds = time.perf_counter() - t_start
    return best_model, record


def time_improvement(t_cnn_seconds: float, t_tcnn_seconds: float) -> float:
    """Percentage reduction in training time relative to the dense baseline;
    negative when the factorized model is slower."""
    if t_cnn_seconds <= 0:
        raise ValueError("baseline training time must be positive")
    return (t_cnn_seconds - t_tcnn_seconds) / t_cnn_seconds * 100.0
