"""Small residual encoder, task heads and the portable checkpoint format.

A :class:`Checkpoint` is a plain mapping of tensor names to float32 numpy
arrays plus string metadata. Backbone tensors live under ``backbone.`` and
task heads under ``heads.<task>.``; the backbone configuration is recorded in
the metadata, so a checkpoint is enough to rebuild the network.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptCheckpointError, ShapeError, TransferError
from .seeding import torch_generator

TASKS = ("classification", "rotation", "relloc", "moco", "swav")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    stage_strides: tuple[int, ...] | None = None  # defaults to 2 per stage

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.stage_strides is None:
            object.__setattr__(self, "stage_strides", (2,) * len(self.stage_widths))
        else:
            object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))

    @property
    def embedding_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def total_stride(self) -> int:
        return math.prod(self.stage_strides)

    def validate(self) -> None:
        if self.in_channels < 1 or self.blocks_per_stage < 1 or not self.stage_widths:
            raise ValueError("invalid backbone config")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")
        if len(self.stage_strides) != len(self.stage_widths) or any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("one stride (1 or 2) per stage")
        if 64 // self.total_stride < 4:
            raise ValueError("final feature map would be smaller than 4x4 at side 64")

    def to_meta(self) -> dict[str, str]:
        return {
            "backbone.in_channels": str(self.in_channels),
            "backbone.stage_widths": ",".join(map(str, self.stage_widths)),
            "backbone.blocks_per_stage": str(self.blocks_per_stage),
            "backbone.stage_strides": ",".join(map(str, self.stage_strides)),
        }

    @classmethod
    def from_meta(cls, meta: Mapping[str, str]) -> "BackboneConfig":
        try:
            return cls(
                in_channels=int(meta["backbone.in_channels"]),
                stage_widths=tuple(int(v) for v in meta["backbone.stage_widths"].split(",")),
                blocks_per_stage=int(meta["backbone.blocks_per_stage"]),
                stage_strides=tuple(int(v) for v in meta["backbone.stage_strides"].split(",")),
            )
        except KeyError as exc:
            raise TransferError(f"checkpoint metadata lacks {exc.args[0]}") from None


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Backbone(nn.Module):
    """Stem convolution followed by one residual stage per configured width."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        w0 = config.stage_widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, w0, 3, 1, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU()
        )
        stages = []
        in_ch = w0
        for width, stride in zip(config.stage_widths, config.stage_strides):
            blocks = [BasicBlock(in_ch, width, stride)]
            blocks += [BasicBlock(width, width, 1) for _ in range(config.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = width
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Last-stage feature maps ``(B, K, h, w)``."""
        return self.stages(self.stem(x))


class SwavHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, proj_dim: int, n_prototypes: int):
        super().__init__()
        self.projector = _mlp(d_in, hidden, proj_dim)
        self.prototypes = nn.Parameter(torch.empty(n_prototypes, proj_dim))

    def forward(self, emb):
        return self.projector(emb)


def _mlp(d_in: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, out))


@dataclass(frozen=True)
class HeadSpec:
    """Shape of a task head.

    ``num_classes`` only matters for classification; ``proj_dim``,
    ``hidden_dim`` (``None`` means the embedding width) and ``n_prototypes``
    only for the contrastive heads.
    """

    task: str
    num_classes: int = 2
    proj_dim: int = 32
    hidden_dim: int | None = None
    n_prototypes: int = 32

    def build(self, embedding_dim: int) -> nn.Module:
        hidden = self.hidden_dim or embedding_dim
        if self.task == "classification":
            return nn.Linear(embedding_dim, self.num_classes)
        if self.task == "rotation":
            return nn.Linear(embedding_dim, 4)
        if self.task == "relloc":
            return nn.Linear(2 * embedding_dim, 8)
        if self.task == "moco":
            return _mlp(embedding_dim, hidden, self.proj_dim)
        if self.task == "swav":
            return SwavHead(embedding_dim, hidden, self.proj_dim, self.n_prototypes)
        raise ValueError(f"unknown task {self.task!r}")

    @classmethod
    def infer(cls, task: str, tensors: Mapping[str, np.ndarray]) -> "HeadSpec":
        p = f"heads.{task}."
        if task == "classification":
            return cls(task, num_classes=tensors[p + "weight"].shape[0])
        if task in ("rotation", "relloc"):
            return cls(task)
        if task == "moco":
            return cls(task, proj_dim=tensors[p + "2.weight"].shape[0], hidden_dim=tensors[p + "0.weight"].shape[0])
        if task == "swav":
            k, proj = tensors[p + "prototypes"].shape
            return cls(task, proj_dim=proj, hidden_dim=tensors[p + "projector.0.weight"].shape[0], n_prototypes=k)
        raise ValueError(f"unknown task {task!r}")


class Network(nn.Module):
    def __init__(self, config: BackboneConfig, heads: Mapping[str, HeadSpec] | None = None):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.heads = nn.ModuleDict({t: spec.build(config.embedding_dim) for t, spec in (heads or {}).items()})

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.backbone(x)
        return maps, maps.mean(dim=(2, 3))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x).mean(dim=(2, 3))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if arr.dtype != np.float32:
                raise TypeError(f"tensor {name} is {arr.dtype}, expected float32")
            if arr.ndim == 0 or 0 in arr.shape:
                raise ValueError(f"tensor {name} must have a positive shape")

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.tensors.keys() == other.tensors.keys()
            and all(
                a.shape == other.tensors[k].shape and a.tobytes() == other.tensors[k].tobytes()
                for k, a in self.tensors.items()
            )
        )

    __hash__ = None

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig.from_meta(self.meta)

    def backbone_names(self) -> list[str]:
        return [k for k in self.tensors if k.startswith("backbone.")]

    def head_tasks(self) -> list[str]:
        return sorted({k.split(".")[1] for k in self.tensors if k.startswith("heads.")})

    def with_meta(self, **updates: str) -> "Checkpoint":
        return Checkpoint(dict(self.tensors), {**self.meta, **{k: str(v) for k, v in updates.items()}})


def _export(net: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: t.detach().to(torch.float32).cpu().numpy().copy()
        for name, t in net.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def to_checkpoint(net: Network, meta: Mapping[str, str] | None = None) -> Checkpoint:
    full_meta = dict(net.config.to_meta())
    full_meta.update(meta or {})
    return Checkpoint(_export(net), full_meta)


def build_network(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> Network:
    """Instantiate the network a checkpoint describes and load its tensors."""
    config = ckpt.config
    heads = {t: HeadSpec.infer(t, ckpt.tensors) for t in ckpt.head_tasks()}
    net = Network(config, heads)
    state = net.state_dict()
    expected = {k for k in state if not k.endswith("num_batches_tracked")}
    if expected != set(ckpt.tensors):
        missing = sorted(expected - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - expected)
        raise TransferError(f"checkpoint does not match its config (missing {missing[:3]}, extra {extra[:3]})")
    for name in expected:
        if tuple(state[name].shape) != ckpt.tensors[name].shape:
            raise TransferError(f"tensor {name} has shape {ckpt.tensors[name].shape}, expected {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(ckpt.tensors[name].copy())
    net.load_state_dict(state)
    return net.to(dtype)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                m.bias.zero_()
        elif isinstance(m, SwavHead):
            with torch.no_grad():
                m.prototypes.copy_(F.normalize(torch.randn(m.prototypes.shape, generator=gen), dim=1))


def init_backbone(config: BackboneConfig, seed: int) -> Checkpoint:
    """He-scaled random backbone; batch-norm scale 1 and shift 0."""
    net = Network(config)
    _init_module(net, torch_generator(seed, "backbone.init"))
    return to_checkpoint(net, {"task": "init", "seed": str(seed)})


def transfer_weights(src: Checkpoint, head_spec: HeadSpec, seed: int) -> Checkpoint:
    """Copy the backbone of ``src`` and attach a freshly initialized head."""
    config = src.config
    reference = Network(config, {head_spec.task: head_spec})
    wanted = [k for k in _export(reference) if k.startswith("backbone.")]
    missing = [k for k in wanted if k not in src.tensors]
    if missing:
        raise TransferError(f"source checkpoint lacks backbone tensors {missing[:3]}")
    _init_module(reference.heads, torch_generator(seed, f"backbone.head.{head_spec.task}"))
    tensors = {k: src.tensors[k].copy() for k in wanted}
    tensors.update({k: v for k, v in _export(reference).items() if k.startswith("heads.")})
    meta = {k: v for k, v in src.meta.items() if k.startswith("backbone.")}
    meta.update({"task": head_spec.task, "seed": str(seed)})
    return Checkpoint(tensors, meta)


@dataclass
class FeatureBundle:
    maps: torch.Tensor  # (B, K, h, w)
    embedding: torch.Tensor  # (B, K)


def forward_features(model: Checkpoint | Network, batch: torch.Tensor) -> FeatureBundle:
    """Inference-mode features; batch norm uses running statistics."""
    net = build_network(model) if isinstance(model, Checkpoint) else model
    config = net.config
    if batch.ndim != 4 or batch.shape[1] != config.in_channels:
        raise ShapeError(f"expected (B, {config.in_channels}, H, W), got {tuple(batch.shape)}")
    if batch.shape[2] % config.total_stride or batch.shape[3] % config.total_stride:
        raise ShapeError(f"spatial size {tuple(batch.shape[2:])} not divisible by stride {config.total_stride}")
    was_training = net.training
    net.eval()
    try:
        maps, emb = net.features(batch.to(next(net.parameters()).dtype))
    finally:
        net.train(was_training)
    return FeatureBundle(maps, emb)


MANIFEST = "manifest.tsv"
META = "meta.tsv"


def save_checkpoint(ckpt: Checkpoint, directory: str | Path) -> None:
    """Write ``manifest.tsv``, ``meta.tsv`` and one little-endian f32 file per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in sorted(ckpt.tensors):
        data = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes()
        rel = f"{name}.f32"
        (directory / rel).write_bytes(data)
        shape = ",".join(map(str, ckpt.tensors[name].shape))
        rows.append(f"{name}\t{shape}\tf32\t{rel}\t{zlib.crc32(data):08x}\n")
    (directory / MANIFEST).write_text("".join(rows), encoding="utf-8")
    (directory / META).write_text("".join(f"{k}\t{v}\n" for k, v in sorted(ckpt.meta.items())), encoding="utf-8")


def load_checkpoint(directory: str | Path, verify: bool = True) -> Checkpoint:
    directory = Path(directory)
    try:
        lines = (directory / MANIFEST).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read {directory / MANIFEST}: {exc}") from exc
    tensors = {}
    for lineno, line in enumerate(lines, 1):
        parts = line.split("\t")
        if len(parts) != 5 or parts[2] != "f32":
            raise CorruptCheckpointError(f"{MANIFEST}:{lineno}: malformed row")
        name, shape_txt, _, rel, crc = parts
        shape = tuple(int(v) for v in shape_txt.split(","))
        try:
            data = (directory / rel).read_bytes()
        except OSError as exc:
            raise CorruptCheckpointError(f"tensor file {rel} listed in manifest is unreadable") from exc
        if len(data) != 4 * math.prod(shape):
            raise CorruptCheckpointError(f"{rel}: {len(data)} bytes, expected {4 * math.prod(shape)}")
        if verify and crc != "-" and int(crc, 16) != zlib.crc32(data):
            raise CorruptCheckpointError(f"{rel}: checksum mismatch")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    meta = {}
    meta_path = directory / META
    if meta_path.is_file():
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("\t")
            meta[key] = value
    return Checkpoint(tensors, meta)
