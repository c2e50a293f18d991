"""Per-step training hyperparameters and the curriculum description."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

LR_RANGE = (0.01, 0.25)
DEFAULT_LR_CANDIDATES = (0.01, 0.025, 0.05, 0.1, 0.25)

# task -> (batch size, LR-search epochs, full-training epochs, optimizer)
HYPERPARAMS = {
    "classification": (64, 80, 150, "sgd"),
    "relloc": (32, 20, 30, "sgd"),
    "rotation": (16, 20, 30, "sgd"),
    "moco": (32, 20, 30, "sgd"),
    "swav": (8, 20, 30, "lars"),
}
SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 1e-4

# (search epochs, full epochs) used instead of the full schedule under the desk profile
DESK_EPOCHS = {"ssl": (3, 10), "classification": (5, 25)}


class Criterion(str, enum.Enum):
    MAX_TASK_PERFORMANCE = "max_task_performance"
    MIN_LOSS = "min_loss"


def default_criterion(task: str) -> Criterion:
    return Criterion.MIN_LOSS if task in ("moco", "swav") else Criterion.MAX_TASK_PERFORMANCE


@dataclass(frozen=True)
class StepSpec:
    task: str
    batch_size: int
    lr_candidates: tuple[float, ...] = DEFAULT_LR_CANDIDATES
    search_epochs: int = 1
    full_epochs: int = 1
    optimizer: str = "sgd"
    sgd_momentum: float = SGD_MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    seed: int = 0
    criterion: Criterion | None = None
    trust_coeff: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "lr_candidates", tuple(float(v) for v in self.lr_candidates))
        if self.criterion is not None:
            object.__setattr__(self, "criterion", Criterion(self.criterion))

    @property
    def search_criterion(self) -> Criterion:
        return self.criterion or default_criterion(self.task)

    def validate(self) -> None:
        from .backbone import TASKS

        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        c = self.lr_candidates
        if not c:
            raise ValueError(f"{self.task}: lr_candidates is empty")
        if list(c) != sorted(c):
            raise ValueError(f"{self.task}: lr_candidates must be sorted ascending")
        if any(not LR_RANGE[0] <= v <= LR_RANGE[1] for v in c):
            raise ValueError(f"{self.task}: lr_candidates must lie in [{LR_RANGE[0]}, {LR_RANGE[1]}]")
        if self.batch_size < 1 or self.search_epochs < 1 or self.full_epochs < 1:
            raise ValueError(f"{self.task}: batch size and epoch counts must be positive")
        if self.optimizer not in ("sgd", "lars"):
            raise ValueError(f"{self.task}: optimizer must be sgd or lars")


def default_step(task: str, profile: str = "desk", seed: int = 0) -> StepSpec:
    """Reference hyperparameters for ``task``; the desk profile shortens the epochs."""
    batch, search, full, optimizer = HYPERPARAMS[task]
    if profile == "desk":
        search, full = DESK_EPOCHS["classification" if task == "classification" else "ssl"]
    elif profile != "paper":
        raise ValueError(f"unknown profile {profile!r}")
    return StepSpec(task, batch, DEFAULT_LR_CANDIDATES, search, full, optimizer, seed=seed)


@dataclass(frozen=True)
class CurriculumSpec:
    steps: tuple[StepSpec, ...]
    downstream: StepSpec
    init: str | Path = "scratch"  # or a checkpoint directory
    task_params: object = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def sequence(self) -> list[str]:
        return [s.task for s in self.steps]

    def validate(self) -> None:
        for step in self.steps:
            step.validate()
            if step.task == "classification":
                raise ValueError("pretraining steps must be pretext tasks")
        self.downstream.validate()
        if self.downstream.task != "classification":
            raise ValueError("the downstream step must be classification")


def with_seed(step: StepSpec, seed: int) -> StepSpec:
    return replace(step, seed=seed)
