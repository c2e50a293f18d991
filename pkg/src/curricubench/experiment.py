"""Experiment manifests and the drivers that turn them into results rows.

A manifest is an INI-style file::

    [experiment]
    name = rotation-then-moco
    output_dir = runs
    global_seed = 7
    profile = desk

    [dataset]
    source = phantom
    n_samples = 400
    mode = signal_in_lung

    [curriculum]
    steps = rotation, moco

    [task.moco]
    queue = 128
"""

from __future__ import annotations

import configparser
import csv
import math
import os
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from filelock import FileLock

from .attention import compute_cams, inverse_segment, lung_only, mean_ail
from .backbone import BackboneConfig, build_network
from .classify import write_predictions
from .curriculum import is_curriculum_order, run_curriculum
from .data import ClassMode, Dataset, DatasetSpec, PhantomConfig, PhantomMode, make_split, materialize
from .errors import ManifestError, MaskError
from .formats import write_f32g
from .seeding import derive_seed
from .ssl import SSL_TASKS, TaskParams
from .steps import CurriculumSpec, default_step

SEED_ENV = "CURRICUBENCH_SEED"
RESULTS_HEADER = ["run_id", "pretrain_sequence", "is_curriculum", "val_balanced_acc", "mean_ail", "wall_clock_s"]

_STEP_KEYS = {
    "batch_size": int,
    "search_epochs": int,
    "full_epochs": int,
    "optimizer": str,
    "sgd_momentum": float,
    "weight_decay": float,
    "criterion": str,
    "trust_coeff": float,
}
_TASK_PARAM_KEYS = {
    "moco": {"temperature": "moco_temperature", "queue": "moco_queue", "encoder_momentum": "moco_momentum"},
    "swav": {"prototypes": "swav_prototypes", "epsilon": "swav_epsilon", "sinkhorn_iters": "swav_iters",
             "temperature": "swav_temperature"},
    "relloc": {"gap": "relloc_gap", "jitter": "relloc_jitter"},
}


@dataclass(frozen=True)
class AttentionSettings:
    cam_clamp: bool = True
    min_area_fraction: float = 0.01
    closing_radius: int = 2
    only_correct: bool = False


@dataclass
class ExperimentManifest:
    name: str
    dataset: DatasetSpec
    backbone: BackboneConfig
    curriculum: CurriculumSpec
    attention: AttentionSettings = field(default_factory=AttentionSettings)
    output_dir: Path = Path("runs")
    global_seed: int = 0
    profile: str = "desk"
    task_params: TaskParams = field(default_factory=TaskParams)
    single_task_acc: dict[str, float] = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return f"{self.name}-s{self.global_seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def parse_manifest(text: str, base_dir: Path | None = None, profile: str | None = None) -> ExperimentManifest:
    """Parse manifest text; ``profile`` overrides ``[experiment] profile``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
        return _build_manifest(cp, base_dir or Path("."), profile)
    except ManifestError:
        raise
    except (configparser.Error, ValueError, KeyError) as exc:
        raise ManifestError(f"invalid manifest: {exc}") from exc


def load_manifest(path: str | Path, profile: str | None = None) -> ExperimentManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse_manifest(text, path.parent, profile)


def _build_manifest(cp: configparser.ConfigParser, base_dir: Path, profile_override: str | None) -> ExperimentManifest:
    exp = cp["experiment"] if cp.has_section("experiment") else {}
    name = exp.get("name", "").strip()
    if not name:
        raise ManifestError("[experiment] name must be nonempty")
    seed = int(os.environ.get(SEED_ENV, exp.get("global_seed", "0")))
    profile = profile_override or exp.get("profile", "desk")
    if profile not in ("desk", "paper"):
        raise ManifestError(f"unknown profile {profile!r}")
    output_dir = Path(exp.get("output_dir", "runs"))
    if not output_dir.is_absolute():
        output_dir = base_dir / output_dir

    ds = cp["dataset"] if cp.has_section("dataset") else {}
    class_mode = ClassMode(ds.get("class_mode", "two_class"))
    side = int(ds.get("side", "64"))
    source = ds.get("source", "phantom").strip()
    if source == "phantom":
        src: Path | PhantomConfig = PhantomConfig(
            n_samples=int(ds.get("n_samples", "400")),
            side=side,
            mode=PhantomMode(ds.get("mode", "signal_in_lung")),
            noise_sigma=float(ds.get("noise_sigma", "8")),
            seed=int(ds.get("seed", str(derive_seed(seed, "data.gen_phantom")))),
            class_mode=class_mode,
        )
        src.validate()
    else:
        src = Path(source) if Path(source).is_absolute() else base_dir / source
    dataset = DatasetSpec(src, side, float(ds.get("split_fraction", "0.8")),
                          int(ds.get("split_seed", str(derive_seed(seed, "data.make_split")))), class_mode)
    dataset.validate()

    bb = cp["backbone"] if cp.has_section("backbone") else {}
    backbone = BackboneConfig(
        stage_widths=_ints(bb.get("stage_widths", "16,32,64")),
        blocks_per_stage=int(bb.get("blocks_per_stage", "1")),
    )
    backbone.validate()

    params = TaskParams(proj_dim=int(bb.get("proj_dim", "32")))
    for task, mapping in _TASK_PARAM_KEYS.items():
        section = f"task.{task}"
        if cp.has_section(section):
            for key, attr in mapping.items():
                if key in cp[section]:
                    typ = type(getattr(params, attr))
                    params = replace(params, **{attr: typ(cp[section][key])})

    cur = cp["curriculum"] if cp.has_section("curriculum") else {}
    sequence = [t.strip() for t in cur.get("steps", "").split(",") if t.strip()]
    unknown = [t for t in sequence if t not in SSL_TASKS]
    if unknown:
        raise ManifestError(f"unknown pretext tasks {unknown}")
    steps = []
    for index, task in enumerate(sequence + ["classification"]):
        step = default_step(task, profile, derive_seed(seed, f"curriculum.run_step.{index}"))
        section = f"task.{task}"
        if cp.has_section(section):
            overrides = {k: typ(cp[section][k]) for k, typ in _STEP_KEYS.items() if k in cp[section]}
            if "lr_candidates" in cp[section]:
                overrides["lr_candidates"] = _floats(cp[section]["lr_candidates"])
            step = replace(step, **overrides)
        step.validate()
        steps.append(step)
    init = cur.get("init", "scratch").strip()
    if init != "scratch" and not Path(init).is_absolute():
        init = str(base_dir / init)
    curriculum = CurriculumSpec(tuple(steps[:-1]), steps[-1], init, params)
    curriculum.validate()

    at = cp["attention"] if cp.has_section("attention") else {}
    attention = AttentionSettings(
        cam_clamp=cp.getboolean("attention", "cam_clamp", fallback=True) if at else True,
        min_area_fraction=float(at.get("min_area_fraction", "0.01")),
        closing_radius=int(at.get("closing_radius", "2")),
        only_correct=cp.getboolean("attention", "only_correct", fallback=False) if at else False,
    )
    single = {k: float(v) for k, v in cp["single_task_acc"].items()} if cp.has_section("single_task_acc") else {}
    return ExperimentManifest(name, dataset, backbone, curriculum, attention, output_dir, seed, profile, params, single)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@dataclass
class ResultsRow:
    run_id: str
    pretrain_sequence: list[str]
    is_curriculum: bool
    val_balanced_acc: float  # percent
    mean_ail: float  # percent, nan when no masks exist
    wall_clock_s: float

    def to_csv(self) -> list[str]:
        return [
            self.run_id,
            "+".join(self.pretrain_sequence),
            "true" if self.is_curriculum else "false",
            f"{self.val_balanced_acc:.6f}",
            f"{self.mean_ail:.6f}",
            f"{self.wall_clock_s:.3f}",
        ]

    @classmethod
    def from_csv(cls, row: dict[str, str]) -> "ResultsRow":
        try:
            seq = [t for t in row["pretrain_sequence"].split("+") if t]
            flag = row["is_curriculum"].strip().lower()
            if flag not in ("true", "false"):
                raise ValueError(f"bad is_curriculum {flag!r}")
            acc, ail_v = float(row["val_balanced_acc"]), float(row["mean_ail"])
            for v in (acc, ail_v):
                if math.isfinite(v) and not 0.0 <= v <= 100.0:
                    raise ValueError(f"percentage {v} out of range")
            if not row["run_id"]:
                raise ValueError("empty run_id")
            return cls(row["run_id"], seq, flag == "true", acc, ail_v, float(row["wall_clock_s"]))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"missing field {exc}") from exc


def append_results(path: str | Path, rows: list[ResultsRow]) -> None:
    """Append rows, writing the header first if the file is new. Never rewrites old rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(RESULTS_HEADER)
            for row in rows:
                writer.writerow(row.to_csv())


def curriculum_flag(sequence: list[str], single_task_acc: dict[str, float]) -> bool:
    if len(sequence) <= 1:
        return True
    if not all(t in single_task_acc for t in sequence):
        return False
    return is_curriculum_order(sequence, single_task_acc)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    row: ResultsRow
    result: object
    ail: object | None


def _train_and_audit(manifest: ExperimentManifest, dataset: Dataset, masks: dict | None, run_id: str,
                     jobs: int = 1) -> RunOutcome:
    start = time.perf_counter()
    train, val = make_split(dataset, manifest.dataset.split_fraction, manifest.dataset.seed)
    run_dir = Path(manifest.output_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    result = run_curriculum(manifest.curriculum, (train, val), manifest.backbone, manifest.global_seed,
                            run_dir, manifest.task_params, jobs)
    write_predictions(run_dir / "predictions.csv", result.final, val)
    summary = None
    mean_pct = math.nan
    if masks:
        summary = mean_ail(result.final, val, masks, manifest.attention.cam_clamp, manifest.attention.only_correct)
        summary.write_csv(run_dir / "ail.csv", val.ids)
        mean_pct = 100.0 * summary.mean
        cam_dir = run_dir / "cams"
        cam_dir.mkdir(exist_ok=True)
        cams = compute_cams(build_network(result.final), val.tensor(), manifest.attention.cam_clamp)
        for sid, cam in zip(val.ids, cams):
            write_f32g(cam_dir / f"{Path(sid).stem}.f32g", cam)
    seq = manifest.curriculum.sequence
    row = ResultsRow(run_id, seq, curriculum_flag(seq, manifest.single_task_acc),
                     100.0 * result.val_balanced_accuracy, mean_pct, time.perf_counter() - start)
    return RunOutcome(row, result, summary)


def run_experiment(manifest: ExperimentManifest, jobs: int = 1, manifest_path: str | Path | None = None) -> RunOutcome:
    """Data, split, curriculum, AIL audit; appends one row to ``results.csv``."""
    dataset, masks = materialize(manifest.dataset)
    outcome = _train_and_audit(manifest, dataset, masks, manifest.run_id, jobs)
    if manifest_path is not None:
        shutil.copyfile(manifest_path, manifest.run_dir / "manifest.ini")
    append_results(Path(manifest.output_dir) / "results.csv", [outcome.row])
    return outcome


def run_confound(manifest: ExperimentManifest, jobs: int = 1) -> tuple[RunOutcome, RunOutcome]:
    """Train on lung-only images and on inversely segmented images.

    Both rows go to ``confound.csv`` next to ``results.csv``.
    """
    dataset, masks = materialize(manifest.dataset)
    if not masks or any(sid not in masks for sid in dataset.ids):
        raise MaskError("the confound experiment needs a lung mask for every image")
    lung = dataset.with_images(np.stack([lung_only(im, masks[s]) for im, s in zip(dataset.images, dataset.ids)]))
    inverse = dataset.with_images(
        np.stack([inverse_segment(im, masks[s]) for im, s in zip(dataset.images, dataset.ids)])
    )
    masked = _train_and_audit(manifest, lung, masks, f"{manifest.run_id}-lung_only", jobs)
    inv = _train_and_audit(manifest, inverse, masks, f"{manifest.run_id}-inverse", jobs)
    append_results(Path(manifest.output_dir) / "confound.csv", [masked.row, inv.row])
    return masked, inv


__all__ = [
    "AttentionSettings",
    "ExperimentManifest",
    "ResultsRow",
    "RESULTS_HEADER",
    "append_results",
    "load_manifest",
    "parse_manifest",
    "run_confound",
    "run_experiment",
]
