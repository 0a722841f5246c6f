"""Losses, class weighting, the epoch loop and model selection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import imaging
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MultimodalDataset
from .errors import ConfigError, NumericError, ShapeError
from .imaging import AugmentConfig
from .model import ModelBundle, forward, set_input_statistics
from .optim import OptimizerState, lr_at_epoch, sgd_step
from .tensor import Tensor, add, backward, clamped_log, mean, mul, scale, softmax, sub, tsum

__all__ = ["LossConfig", "TrainConfig", "EpochStats", "FitResult", "class_weights",
           "weighted_ce", "sr_loss", "final_loss", "train_epoch", "fit", "save_checkpoint",
           "load_checkpoint"]

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 1.0
    weight_mode: str = "inverse_frequency"
    ce_form: str = "as_written"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ConfigError("alpha and beta must be >= 0 and not both zero")
        if self.weight_mode not in ("inverse_frequency", "uniform"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")
        if self.ce_form not in ("as_written", "categorical"):
            raise ConfigError(f"unknown ce_form {self.ce_form!r}")


@dataclass
class TrainConfig:
    epochs: int = 70
    batch_size: int = 32
    base_lr: float = 0.01
    step_size: int = 15
    gamma: float = 0.1
    seed: int = 0
    sr_method: str = "bilinear"
    standardize_input: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1 or self.batch_size < 1 or self.step_size < 1:
            raise ConfigError("epochs, batch_size and step_size must be positive")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.sr_method not in ("bilinear", "bicubic", "file"):
            raise ConfigError(f"unknown sr_method {self.sr_method!r}")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.base_lr, self.step_size, self.gamma)


# ----------------------------------------------------------------------------
# losses


def class_weights(counts: Sequence[int], mode: str = "inverse_frequency") -> np.ndarray:
    """``N / (K * n_i)``: the support-weighted mean of the weights is exactly 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ConfigError(f"every class needs at least one training sample, got counts {counts.tolist()}")
    if mode == "uniform":
        return np.ones(len(counts))
    if mode != "inverse_frequency":
        raise ConfigError(f"unknown weight mode {mode!r}")
    return counts.sum() / (len(counts) * counts)


def weighted_ce(probs: Tensor, labels, weights, form: str = "as_written") -> Tensor:
    """Batch mean of the weighted cross-entropy.

    ``as_written``: ``-sum_i [w_i y_i log p_i + (1 - y_i) log(1 - p_i)]``
    ``categorical``: ``-sum_i w_i y_i log p_i``
    Log arguments are clamped at 1e-12.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if probs.ndim != 2 or y.shape != probs.shape:
        raise ShapeError(f"probs {probs.shape} and labels {y.shape} must both be N×K")
    w = np.asarray(weights, dtype=probs.data.dtype)
    if w.shape != (probs.shape[1],):
        raise ShapeError(f"{w.shape[0] if w.ndim else 0} weights for {probs.shape[1]} classes")
    y = y.astype(probs.data.dtype)
    per_sample = mul(clamped_log(probs, LOG_FLOOR), Tensor(w * y))
    if form == "as_written":
        per_sample = add(per_sample, mul(clamped_log(sub(1.0, probs), LOG_FLOOR), Tensor(1.0 - y)))
    elif form != "categorical":
        raise ConfigError(f"unknown ce_form {form!r}")
    return scale(tsum(per_sample), -1.0 / probs.shape[0])


def sr_loss(sr_target, sr_pred: Tensor) -> Tensor:
    """Mean squared error over every element."""
    target = sr_target if isinstance(sr_target, Tensor) else Tensor(sr_target)
    if target.shape != sr_pred.shape:
        raise ShapeError(f"SR target {target.shape} vs prediction {sr_pred.shape}")
    diff = sub(target, sr_pred)
    return mean(mul(diff, diff))


def final_loss(l_wce: Tensor, l_sr: Tensor, cfg: LossConfig) -> Tensor:
    for name, term in (("weighted CE", l_wce), ("SR", l_sr)):
        if not np.all(np.isfinite(term.data)):
            raise NumericError(f"{name} loss is not finite")
    return add(scale(l_wce, cfg.alpha), scale(l_sr, cfg.beta))


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ----------------------------------------------------------------------------
# loop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_wce: float
    loss_sr: float
    loss_final: float
    samples: int


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of batch composition and worker order."""
    return np.random.default_rng([seed, epoch, index])


def prepare_batch(data: MultimodalDataset, indices: Sequence[int], cfg: TrainConfig, epoch: int,
                  factor: int, augment: bool = True):
    imgs, targets = [], []
    for i in indices:
        params = imaging.draw_augment(cfg.augment, sample_rng(cfg.seed, epoch, int(i))) \
            if augment else imaging.AugmentParams()
        img = imaging.apply_augment(data.images[i], params)
        if cfg.sr_method == "file":
            if data.sr_images is None:
                raise ConfigError("sr_method=file but the dataset has no SR target images")
            target = imaging.apply_geometry(data.sr_images[i], params)
        else:
            target = imaging.sr_target(img, cfg.sr_method, factor)
        imgs.append(img)
        targets.append(target)
    images = np.stack(imgs).transpose(0, 3, 1, 2)
    sr = np.stack(targets).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(images), np.ascontiguousarray(sr)


def train_epoch(bundle: ModelBundle, data: MultimodalDataset, train_cfg: TrainConfig,
                loss_cfg: LossConfig, epoch: int, weights=None) -> EpochStats:
    if len(data) == 0:
        raise ConfigError("training data is empty")
    k = bundle.config.n_classes
    if weights is None:
        weights = class_weights(data.class_counts(), loss_cfg.weight_mode)
    state = train_cfg.optimizer()
    state.current_epoch = epoch
    lr = lr_at_epoch(state, epoch)
    order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(data))
    params = bundle.trainable_parameters()
    sums = np.zeros(3)
    seen = 0
    for b, start in enumerate(range(0, len(data), train_cfg.batch_size)):
        idx = order[start:start + train_cfg.batch_size]
        try:
            images, targets = prepare_batch(data, idx, train_cfg, epoch, bundle.config.sr_factor)
            out = forward(bundle, Tensor(images), Tensor(data.meta[idx]))
            probs = softmax(out.logits)
            l_wce = weighted_ce(probs, one_hot(data.labels[idx], k), weights, loss_cfg.ce_form)
            l_sr = sr_loss(targets, out.sr_pred)
            loss = final_loss(l_wce, l_sr, loss_cfg)
            backward(loss)
            sgd_step(params, state)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
        sums += len(idx) * np.array([l_wce.item(), l_sr.item(), loss.item()])
        seen += len(idx)
    sums /= seen
    return EpochStats(epoch, lr, float(sums[0]), float(sums[1]), float(sums[2]), seen)


@dataclass
class FitResult:
    bundle: ModelBundle            # best-by-validation-BACC parameters
    last: ModelBundle
    history: List[dict]
    best_epoch: int


def fit(bundle: ModelBundle, train: MultimodalDataset, val: MultimodalDataset,
        train_cfg: TrainConfig, loss_cfg: LossConfig, out_dir=None) -> FitResult:
    """Train for ``train_cfg.epochs`` epochs, selecting by validation BACC.

    With ``out_dir``, writes ``history.jsonl``, ``last.ckpt`` (refreshed every
    epoch) and ``best.ckpt``.
    """
    from .evaluation import evaluate

    if len(train) == 0 or len(val) == 0:
        raise ConfigError("fit needs non-empty train and validation partitions")
    weights = class_weights(train.class_counts(), loss_cfg.weight_mode)
    if train_cfg.standardize_input:
        set_input_statistics(bundle, train.images, train.meta)
    out_dir = Path(out_dir) if out_dir is not None else None
    history_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.jsonl"
        history_path.write_text("")
    best_bacc, best_epoch, best_state = -math.inf, -1, None
    history = []
    for epoch in range(train_cfg.epochs):
        stats = train_epoch(bundle, train, train_cfg, loss_cfg, epoch, weights)
        report = evaluate(bundle, val)
        row = {"epoch": epoch, "lr": stats.lr, "loss_wce": stats.loss_wce,
               "loss_sr": stats.loss_sr, "loss_final": stats.loss_final,
               "val_bacc": report.bacc, "val_acc": report.acc}
        history.append(row)
        if report.bacc > best_bacc:
            best_bacc, best_epoch, best_state = report.bacc, epoch, bundle.snapshot()
            if out_dir is not None:
                save_checkpoint(_with_state(bundle, best_state), out_dir / "best.ckpt")
        if out_dir is not None:
            save_checkpoint(bundle, out_dir / "last.ckpt")
            with open(history_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return FitResult(_with_state(bundle, best_state), bundle, history, best_epoch)


def _with_state(bundle: ModelBundle, state) -> ModelBundle:
    from collections import OrderedDict

    params = OrderedDict(
        (k, Tensor(state[k], requires_grad=True, name=k, dtype=p.data.dtype))
        for k, p in bundle.params.items())
    return ModelBundle(bundle.config, params, dict(bundle.extras), dict(bundle.buffers))
