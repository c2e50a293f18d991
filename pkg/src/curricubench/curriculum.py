"""Sequential pretraining with per-step LR search and backbone hand-off."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, Checkpoint, HeadSpec, build_network, init_backbone, load_checkpoint, \
    save_checkpoint, to_checkpoint, transfer_weights
from .classify import EpochRecord, evaluate, finetune, iterate_batches
from .data import Dataset
from .errors import SearchError
from .optim import Optimizer
from .seeding import derive_seed, torch_generator
from .ssl import PretextTrainer, TaskParams
from .steps import Criterion, CurriculumSpec, StepSpec

log = logging.getLogger(__name__)


@dataclass
class LrSearchResult:
    candidates: tuple[float, ...]
    scores: list[float]
    chosen_lr: float
    criterion: Criterion


def choose_lr(candidates: Sequence[float], scores: Sequence[float], criterion: Criterion) -> float:
    """Best finite-scored candidate; ties go to the smallest learning rate."""
    finite = [(lr, s) for lr, s in zip(candidates, scores) if math.isfinite(s)]
    if not finite:
        raise SearchError("every learning-rate candidate produced a non-finite score")
    sign = 1.0 if criterion is Criterion.MAX_TASK_PERFORMANCE else -1.0
    best = max(sign * s for _, s in finite)
    return min(lr for lr, s in finite if sign * s == best)


@dataclass
class StepLog:
    task: str
    records: list[EpochRecord]
    search: LrSearchResult | None = None

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "metric"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.loss:.9g}", f"{r.metric:.9g}"])


@dataclass
class TrainOutcome:
    checkpoint: Checkpoint
    records: list[EpochRecord]
    score: float


def _train_pretext(step: StepSpec, init: Checkpoint, images: torch.Tensor, lr: float, epochs: int,
                   params: TaskParams) -> TrainOutcome:
    net = build_network(init)
    net.train()
    trainer = PretextTrainer(step.task, params, step.batch_size)
    trainer.attach(net)
    opt = Optimizer(net.parameters(), lr, step.optimizer, step.sgd_momentum, step.weight_decay, step.trust_coeff)
    batch_gen = torch_generator(step.seed, f"curriculum.{step.task}.batches")
    aug_gen = torch_generator(step.seed, f"curriculum.{step.task}.augment")
    records: list[EpochRecord] = []
    diverged = False
    for epoch in range(1, epochs + 1):
        losses, correct, count = [], 0, 0
        for idx in iterate_batches(len(images), step.batch_size, batch_gen, min_size=2):
            stats = trainer.step(net, images[idx], aug_gen, opt)
            if stats.loss is not None:
                losses.append(stats.loss)
            correct += stats.correct
            count += stats.count
        loss = float(np.mean(losses)) if losses else math.nan
        metric = correct / count if count else math.nan
        if not all(math.isfinite(v) for v in losses):
            diverged = True
            records.append(EpochRecord(epoch, math.nan, math.nan))
            break
        records.append(EpochRecord(epoch, loss, metric))
    last = records[-1]
    score = last.loss if step.search_criterion is Criterion.MIN_LOSS else last.metric
    if diverged:
        score = math.nan
    ckpt = to_checkpoint(net, {"task": step.task, "lr": repr(lr), "seed": str(step.seed)})
    return TrainOutcome(ckpt, records, score)


def train_at_lr(step: StepSpec, init: Checkpoint, data: tuple[Dataset, Dataset], lr: float, epochs: int,
                params: TaskParams | None = None) -> TrainOutcome:
    train, val = data
    if step.task == "classification":
        result = finetune(init, train, val, step, lr=lr, epochs=epochs)
        score = math.nan if result.diverged else result.log[-1].metric
        if step.search_criterion is Criterion.MIN_LOSS and not result.diverged:
            score = result.log[-1].loss
        return TrainOutcome(result.checkpoint, result.log, score)
    return _train_pretext(step, init, train.tensor(), lr, epochs, params or TaskParams())


def lr_search(step: StepSpec, init: Checkpoint, data: tuple[Dataset, Dataset], params: TaskParams | None = None,
              jobs: int = 1) -> LrSearchResult:
    """Train a fresh copy of ``init`` per candidate for ``search_epochs`` and pick the best LR."""
    step.validate()

    def probe(lr: float) -> float:
        return train_at_lr(step, init, data, lr, step.search_epochs, params).score

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(probe, step.lr_candidates))
    else:
        scores = [probe(lr) for lr in step.lr_candidates]
    criterion = step.search_criterion
    chosen = choose_lr(step.lr_candidates, scores, criterion)
    log.info("lr search %s: scores %s -> %g", step.task, scores, chosen)
    return LrSearchResult(step.lr_candidates, scores, chosen, criterion)


def run_step(step: StepSpec, init: Checkpoint, data: tuple[Dataset, Dataset], params: TaskParams | None = None,
             jobs: int = 1) -> tuple[Checkpoint, StepLog]:
    """LR search, then ``full_epochs`` of training from ``init`` at the chosen LR.

    With a single candidate the search is skipped.
    """
    step.validate()
    if len(step.lr_candidates) == 1:
        search = None
        lr = step.lr_candidates[0]
    else:
        search = lr_search(step, init, data, params, jobs)
        lr = search.chosen_lr
    outcome = train_at_lr(step, init, data, lr, step.full_epochs, params)
    return outcome.checkpoint, StepLog(step.task, outcome.records, search)


@dataclass
class CurriculumResult:
    checkpoints: list[Checkpoint]
    logs: list[StepLog]
    handoffs: list[tuple[Checkpoint, Checkpoint]]
    val_balanced_accuracy: float
    sequence: list[str]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def initial_checkpoint(spec: CurriculumSpec, config: BackboneConfig, seed: int) -> Checkpoint:
    if str(spec.init) == "scratch":
        return init_backbone(config, derive_seed(seed, "backbone.init_backbone"))
    return load_checkpoint(spec.init)


def run_curriculum(spec: CurriculumSpec, data: tuple[Dataset, Dataset], config: BackboneConfig, seed: int = 0,
                   output_dir: str | Path | None = None, params: TaskParams | None = None,
                   jobs: int = 1) -> CurriculumResult:
    """Run every pretraining step, then the downstream classification.

    Each step starts from ``transfer_weights`` of the previous step's output.
    Checkpoints and logs are written as soon as a step finishes, so a failure
    leaves the completed prefix on disk.
    """
    spec.validate()
    params = params or spec.task_params or TaskParams()
    train, _ = data
    prev = initial_checkpoint(spec, config, seed)
    checkpoints, logs, handoffs = [], [], []
    all_steps = list(spec.steps) + [spec.downstream]
    for index, step in enumerate(all_steps):
        head = HeadSpec(step.task, num_classes=train.num_classes, proj_dim=params.proj_dim,
                        n_prototypes=params.swav_prototypes)
        start = transfer_weights(prev, head, step.seed)
        handoffs.append((prev, start))
        ckpt, step_log = run_step(step, start, data, params, jobs)
        ckpt = ckpt.with_meta(step_index=str(index))
        checkpoints.append(ckpt)
        logs.append(step_log)
        if output_dir is not None:
            step_dir = Path(output_dir) / f"step_{index:02d}_{step.task}"
            save_checkpoint(ckpt, step_dir / "checkpoint")
            step_log.write_csv(step_dir / "log.csv")
        prev = ckpt
    _, val = data
    accuracy = evaluate(prev, val).balanced_accuracy if len(val) else math.nan
    return CurriculumResult(checkpoints, logs, handoffs, accuracy, spec.sequence)


def is_curriculum_order(sequence: Sequence[str], single_task_acc: Mapping[str, float]) -> bool:
    """True when single-task accuracies strictly increase along ``sequence``."""
    accs = [single_task_acc[task] for task in sequence]
    return all(a < b for a, b in zip(accs, accs[1:]))
