"""Downstream classification: weighted cross-entropy, balanced accuracy, fine-tuning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .backbone import Checkpoint, HeadSpec, Network, build_network, to_checkpoint, transfer_weights
from .data import ClassLabel, ClassMode, ClassWeights, Dataset, compute_class_weights
from .errors import DegenerateDataError, EmptyError, NumericError, ShapeError
from .optim import Optimizer
from .seeding import torch_generator
from .steps import StepSpec


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | ClassWeights | None = None,
                classes: Sequence[ClassLabel] | None = None) -> torch.Tensor:
    """``(1/B) * sum_i w[y_i] * -log softmax(logits_i)[y_i]``.

    ``weights`` may be a per-class tensor, a :class:`ClassWeights` (resolved
    against ``classes``, default all four labels in order) or ``None`` for 1.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("logits must be B x C with one label per row")
    if isinstance(weights, ClassWeights):
        weights = weights.tensor(classes or tuple(ClassLabel)[: logits.shape[1]], dtype=logits.dtype)
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    nll = log_norm - shifted.gather(1, labels.view(-1, 1)).squeeze(1)
    if weights is not None:
        nll = weights.to(logits.dtype)[labels] * nll
    return nll.sum() / logits.shape[0]


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return counts


def balanced_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Mean recall over the classes that occur in ``labels``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyError("no samples to score")
    if preds.shape != labels.shape:
        raise ShapeError("preds and labels differ in length")
    recalls = [float(np.mean(preds[labels == c] == c)) for c in np.unique(labels)]
    return sum(recalls) / len(recalls)


@dataclass
class MetricsReport:
    balanced_accuracy: float
    per_class_recall: dict[ClassLabel, float]
    support: dict[ClassLabel, int]
    confusion: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_predictions(cls, preds, labels, class_mode: ClassMode) -> "MetricsReport":
        classes = class_mode.classes
        cm = confusion_matrix(preds, labels, len(classes))
        support = {c: int(cm[i].sum()) for i, c in enumerate(classes)}
        recall = {c: cm[i, i] / support[c] for i, c in enumerate(classes) if support[c] > 0}
        if not recall:
            raise EmptyError("no samples to score")
        return cls(float(np.mean(list(recall.values()))), recall, support, cm)


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, Dataset):
        return images.tensor()
    if isinstance(images, np.ndarray):
        x = torch.from_numpy(images.astype(np.float32) / 255.0) if images.dtype == np.uint8 else torch.from_numpy(images)
        return x.unsqueeze(1) if x.ndim == 3 else x
    return images


@torch.no_grad()
def predict(model: Network | Checkpoint, images, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties go to the smaller index) and raw logits."""
    net = build_network(model) if isinstance(model, Checkpoint) else model
    if "classification" not in net.heads:
        raise ShapeError("model has no classification head")
    x = _as_batch(images)
    if x.ndim != 4 or x.shape[1] != net.config.in_channels:
        raise ShapeError(f"expected (N, {net.config.in_channels}, H, W) images, got {tuple(x.shape)}")
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    chunks = [net.heads["classification"](net.embed(x[i : i + batch_size].to(dtype))) for i in range(0, len(x), batch_size)]
    net.train(was_training)
    logits = torch.cat(chunks).double().numpy() if chunks else np.zeros((0, net.heads["classification"].out_features))
    # np.argmax returns the first maximum, i.e. the smaller class index on ties
    return np.argmax(logits, axis=1), logits


def evaluate(model: Network | Checkpoint, dataset: Dataset) -> MetricsReport:
    preds, _ = predict(model, dataset)
    return MetricsReport.from_predictions(preds, dataset.labels, dataset.class_mode)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metric: float


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    train_report: MetricsReport | None
    val_report: MetricsReport | None
    log: list[EpochRecord]

    @property
    def diverged(self) -> bool:
        return any(not math.isfinite(r.loss) for r in self.log)


def iterate_batches(n: int, batch_size: int, gen: torch.Generator, min_size: int = 1):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= min_size:
            yield idx


def finetune(init: Checkpoint, train: Dataset, val: Dataset | None, step: StepSpec,
             lr: float | None = None, epochs: int | None = None) -> FinetuneResult:
    """Train backbone and classification head end-to-end with weighted cross-entropy."""
    if train.labels is None or len(np.unique(train.labels)) < 2:
        raise DegenerateDataError("classification needs at least two classes in the training data")
    classes = train.class_mode.classes
    lr = step.lr_candidates[0] if lr is None else lr
    epochs = step.full_epochs if epochs is None else epochs
    if "classification" not in init.head_tasks():
        init = transfer_weights(init, HeadSpec("classification", num_classes=len(classes)), step.seed)
    net = build_network(init)
    net.train()
    weights = compute_class_weights(train.labels.tolist(), train.class_mode).tensor(classes)
    opt = Optimizer(net.parameters(), lr, step.optimizer, step.sgd_momentum, step.weight_decay, step.trust_coeff)
    gen = torch_generator(step.seed, "classify.finetune.batches")
    x, y = train.tensor(), train.label_tensor()
    log: list[EpochRecord] = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in iterate_batches(len(train), step.batch_size, gen, min_size=2):
            logits = net.heads["classification"](net.embed(x[idx]))
            if not torch.isfinite(logits).all():
                total, count = math.nan, 1
                break
            loss = weighted_ce(logits, y[idx], weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        loss_value = total / max(count, 1)
        if not math.isfinite(loss_value):
            log.append(EpochRecord(epoch, math.nan, math.nan))
            break
        scored = val if val is not None and len(val) else train
        log.append(EpochRecord(epoch, loss_value, evaluate(net, scored).balanced_accuracy))
    diverged = any(not math.isfinite(r.loss) for r in log)
    ckpt = to_checkpoint(net, {"task": "classification", "lr": repr(lr), "seed": str(step.seed)})
    train_report = None if diverged else evaluate(net, train)
    val_report = None if diverged or val is None or not len(val) else evaluate(net, val)
    return FinetuneResult(ckpt, train_report, val_report, log)


def write_predictions(path: str | Path, model: Network | Checkpoint, dataset: Dataset) -> None:
    """CSV ``id,true_label,pred_label,logit_0..logit_{C-1}``."""
    preds, logits = predict(model, dataset)
    classes = dataset.class_mode.classes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "true_label", "pred_label"] + [f"logit_{i}" for i in range(logits.shape[1])])
        for i, sid in enumerate(dataset.ids):
            true = "" if dataset.labels is None else ClassLabel(int(dataset.labels[i])).slug
            writer.writerow([sid, true, classes[int(preds[i])].slug] + [f"{v:.9g}" for v in logits[i]])
