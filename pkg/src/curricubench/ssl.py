"""Pretext tasks: rotation prediction, relative patch location, MoCo v2 and SwAV.

Each task has a self-labeling batch builder and a differentiable loss over
backbone embeddings. The ``*Task`` classes at the bottom bundle batch
construction, loss and any persistent state (MoCo queue, SwAV prototypes)
into the single ``step`` call the curriculum trainer needs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import Network
from .errors import DegenerateBatchError, NumericError, ShapeError, StateError, TaskError
from .optim import Optimizer

SSL_TASKS = ("rotation", "relloc", "moco", "swav")

# row-major 3x3 grid without the center cell
NEIGHBOR_CELLS = ((0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2))


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------


@dataclass
class RotationBatch:
    images: torch.Tensor
    targets: torch.Tensor  # k in {0,1,2,3}: rotated k*90 degrees counter-clockwise


def rotate(images: torch.Tensor, k: int) -> torch.Tensor:
    return torch.rot90(images, k, dims=(-2, -1))


def make_rotation_batch(images: torch.Tensor, gen: torch.Generator) -> RotationBatch:
    if images.shape[-1] != images.shape[-2]:
        raise ShapeError("rotation needs square images")
    ks = torch.randint(0, 4, (images.shape[0],), generator=gen)
    rotated = torch.stack([rotate(img, int(k)) for img, k in zip(images, ks)])
    return RotationBatch(rotated, ks)


# ---------------------------------------------------------------------------
# relative location
# ---------------------------------------------------------------------------


@dataclass
class RelLocBatch:
    center_patches: torch.Tensor
    neighbor_patches: torch.Tensor
    targets: torch.Tensor


def relloc_geometry(side: int, gap: int) -> tuple[int, int]:
    """Return ``(cell, patch)`` sizes for a square image."""
    cell = side // 3
    patch = cell - gap
    if patch < 4:
        raise ShapeError(f"side {side} too small for relative location with gap {gap}")
    return cell, patch


def patch_origin(cell_rc: tuple[int, int], cell: int, gap: int) -> tuple[int, int]:
    return cell_rc[0] * cell + gap // 2, cell_rc[1] * cell + gap // 2


def make_relloc_batch(images: torch.Tensor, gen: torch.Generator, gap: int = 2, jitter: int = 1) -> RelLocBatch:
    side = images.shape[-1]
    if images.shape[-2] != side:
        raise ShapeError("relative location needs square images")
    if jitter < 0 or gap < 0:
        raise ValueError("gap and jitter must be nonnegative")
    cell, patch = relloc_geometry(side, gap)
    targets = torch.randint(0, 8, (images.shape[0],), generator=gen)
    offsets = torch.randint(-jitter, jitter + 1, (images.shape[0], 2), generator=gen)
    cy, cx = patch_origin((1, 1), cell, gap)
    centers, neighbors = [], []
    for img, t, off in zip(images, targets, offsets):
        ny, nx = patch_origin(NEIGHBOR_CELLS[int(t)], cell, gap)
        ny = min(max(ny + int(off[0]), 0), side - patch)
        nx = min(max(nx + int(off[1]), 0), side - patch)
        centers.append(img[..., cy : cy + patch, cx : cx + patch])
        neighbors.append(img[..., ny : ny + patch, nx : nx + patch])
    return RelLocBatch(torch.stack(centers), torch.stack(neighbors), targets)


def _fit_to_stride(patches: torch.Tensor, stride: int) -> torch.Tensor:
    side = patches.shape[-1]
    target = math.ceil(side / stride) * stride
    if target == side:
        return patches
    return F.interpolate(patches, size=(target, target), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# augmentation for the contrastive tasks (no 90-degree rotations)
# ---------------------------------------------------------------------------


def _gaussian_kernel(sigma: float, dtype) -> torch.Tensor:
    radius = max(1, int(math.ceil(2 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def augment(images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random resized crop, horizontal flip, brightness/contrast jitter, blur."""
    b = images.shape[0]
    dtype = images.dtype

    def u(lo, hi, n=b):
        return lo + (hi - lo) * torch.rand(n, generator=gen, dtype=torch.float64)

    area = u(0.6, 1.0)
    log_ratio = u(math.log(3 / 4), math.log(4 / 3))
    ratio = torch.exp(log_ratio)
    sx = torch.sqrt(area * ratio).clamp(max=1.0)
    sy = torch.sqrt(area / ratio).clamp(max=1.0)
    tx = (1 - sx) * u(-1.0, 1.0)
    ty = (1 - sy) * u(-1.0, 1.0)
    flip = torch.where(torch.rand(b, generator=gen) < 0.5, -1.0, 1.0).double()
    theta = torch.zeros(b, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = sx * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = sy
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta.to(dtype), list(images.shape), align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)

    brightness = u(-0.2, 0.2).to(dtype).view(b, 1, 1, 1)
    contrast = u(0.8, 1.2).to(dtype).view(b, 1, 1, 1)
    mean = out.mean(dim=(1, 2, 3), keepdim=True)
    out = (out - mean) * contrast + mean + brightness

    blur = torch.rand(b, generator=gen) < 0.5
    sigmas = u(0.1, 1.0)
    blurred = []
    for i in range(b):
        img = out[i : i + 1]
        if blur[i]:
            k = _gaussian_kernel(float(sigmas[i]), dtype)
            r = k.numel() // 2
            c = img.shape[1]
            img = F.pad(img, (r, r, r, r), mode="replicate")
            img = F.conv2d(img, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
            img = F.conv2d(img, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
        blurred.append(img)
    return torch.cat(blurred).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# MoCo v2
# ---------------------------------------------------------------------------


class KeyQueue:
    """Fixed-capacity FIFO of key vectors backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.buffer = torch.zeros(capacity, dim, dtype=dtype)
        self.ptr = 0
        self.length = 0

    def __len__(self) -> int:
        return self.length

    def enqueue(self, keys: torch.Tensor) -> None:
        keys = keys.detach()[-self.capacity :]
        for key in keys:
            self.buffer[self.ptr] = key
            self.ptr = (self.ptr + 1) % self.capacity
        self.length = min(self.length + keys.shape[0], self.capacity)

    def keys(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.length < self.capacity:
            return self.buffer[: self.length].clone()
        return torch.cat([self.buffer[self.ptr :], self.buffer[: self.ptr]])


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean InfoNCE over the batch: one positive key per query against shared negatives."""
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    neg = q @ negatives.t()
    logits = torch.cat([pos, neg], dim=1) / temperature
    return -F.log_softmax(logits, dim=1)[:, 0].mean()


@torch.no_grad()
def momentum_update(key_net: torch.nn.Module, query_net: torch.nn.Module, m: float) -> None:
    """``theta_k <- m*theta_k + (1-m)*theta_q`` per parameter; buffers are copied."""
    for pk, pq in zip(key_net.parameters(), query_net.parameters()):
        pk.copy_(m * pk + (1.0 - m) * pq)
    for bk, bq in zip(key_net.buffers(), query_net.buffers()):
        bk.copy_(bq)


@dataclass
class MocoState:
    key_net: Network
    queue: KeyQueue
    temperature: float = 0.2
    momentum: float = 0.99
    warmup_batches: int = 0
    steps: int = 0

    @classmethod
    def create(cls, net: Network, capacity: int = 256, temperature: float = 0.2, momentum: float = 0.99,
               batch_size: int = 32) -> "MocoState":
        if not 0.0 <= momentum < 1.0:
            raise ValueError("encoder momentum must lie in [0, 1)")
        key_net = copy.deepcopy(net)
        for p in key_net.parameters():
            p.requires_grad_(False)
        dim = net.heads["moco"][-1].out_features
        dtype = next(net.parameters()).dtype
        return cls(key_net, KeyQueue(capacity, dim, dtype), temperature, momentum,
                   math.ceil(capacity / batch_size), 0)


def _project(net: Network, head: str, images: torch.Tensor) -> torch.Tensor:
    return F.normalize(net.heads[head](net.embed(images)), dim=1)


def moco_step(state: MocoState, net: Network, images: torch.Tensor, gen: torch.Generator,
              optimizer: Optimizer | None = None, augmenter=augment):
    """One MoCo iteration: loss, optional gradient step, key-encoder EMA, enqueue.

    Returns ``(loss, grads, state)``. During warm-up the batch keys are only
    enqueued and ``loss`` is ``None``.
    """
    view_q = augmenter(images, gen)
    view_k = augmenter(images, gen)
    with torch.no_grad():
        keys = _project(state.key_net, "moco", view_k)
    if state.steps < state.warmup_batches:
        state.queue.enqueue(keys)
        state.steps += 1
        return None, {}, state
    if len(state.queue) == 0:
        raise StateError("key queue is empty after warm-up")
    q = _project(net, "moco", view_q)
    loss = info_nce(q, keys, state.queue.keys(), state.temperature)
    grads = _backward(net, loss, optimizer)
    momentum_update(state.key_net, net, state.momentum)
    state.queue.enqueue(keys)
    state.steps += 1
    return loss.detach(), grads, state


# ---------------------------------------------------------------------------
# SwAV
# ---------------------------------------------------------------------------


def sinkhorn(scores: torch.Tensor, epsilon: float = 0.05, iters: int = 3) -> torch.Tensor:
    """Equipartitioned soft assignment of ``B`` samples to ``K`` prototypes.

    Alternately rescales ``exp(scores / epsilon)`` so columns sum to ``1/K``
    and rows sum to ``1/B``; the row step comes last. Computed in float64
    log space and returned in the input dtype.
    """
    if scores.ndim != 2 or min(scores.shape) < 1:
        raise ShapeError("scores must be a non-empty B x K matrix")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not torch.isfinite(scores).all():
        raise NumericError("non-finite scores")
    b, k = scores.shape
    log_q = scores.detach().double() / epsilon
    log_q = log_q - torch.logsumexp(log_q.flatten(), dim=0)
    for _ in range(iters):
        log_q = log_q - torch.logsumexp(log_q, dim=0, keepdim=True) - math.log(k)
        log_q = log_q - torch.logsumexp(log_q, dim=1, keepdim=True) - math.log(b)
    return torch.exp(log_q).to(scores.dtype)


def swapped_prediction(scores_pred: torch.Tensor, codes: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cross-entropy between fixed codes and ``softmax(scores_pred / temperature)``."""
    return -(codes * F.log_softmax(scores_pred / temperature, dim=1)).sum(dim=1).mean()


@dataclass
class SwavState:
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    temperature: float = 0.1


def swav_loss(z1: torch.Tensor, z2: torch.Tensor, prototypes: torch.Tensor, state: SwavState,
              return_terms: bool = False):
    """Symmetrized swapped-prediction loss for two views of the same batch."""
    b = z1.shape[0]
    if b < 2:
        raise DegenerateBatchError("SwAV needs at least two samples per batch")
    z1, z2 = F.normalize(z1, dim=1), F.normalize(z2, dim=1)
    s1, s2 = z1 @ prototypes.t(), z2 @ prototypes.t()
    with torch.no_grad():
        q1 = sinkhorn(s1, state.epsilon, state.sinkhorn_iters) * b
        q2 = sinkhorn(s2, state.epsilon, state.sinkhorn_iters) * b
    t1 = swapped_prediction(s1, q2, state.temperature)
    t2 = swapped_prediction(s2, q1, state.temperature)
    loss = 0.5 * (t1 + t2)
    return (loss, t1, t2) if return_terms else loss


@torch.no_grad()
def normalize_prototypes(net: Network) -> None:
    protos = net.heads["swav"].prototypes
    protos.copy_(F.normalize(protos, dim=1))


def swav_step(state: SwavState, net: Network, images: torch.Tensor, gen: torch.Generator,
              optimizer: Optimizer | None = None, augmenter=augment):
    """Two views, swapped prediction, optional update, prototype re-normalization."""
    if images.shape[0] < 2:
        raise DegenerateBatchError("SwAV needs at least two samples per batch")
    head = net.heads["swav"]
    z1 = head(net.embed(augmenter(images, gen)))
    z2 = head(net.embed(augmenter(images, gen)))
    loss = swav_loss(z1, z2, head.prototypes, state)
    grads = _backward(net, loss, optimizer)
    normalize_prototypes(net)
    return loss.detach(), grads, state


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    view1: torch.Tensor
    view2: torch.Tensor


def _backward(net: Network, loss: torch.Tensor, optimizer: Optimizer | None) -> dict[str, torch.Tensor]:
    if optimizer is not None:
        optimizer.zero_grad()
    else:
        for p in net.parameters():
            p.grad = None
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in net.named_parameters() if p.grad is not None}
    if optimizer is not None:
        optimizer.step()
    return grads


def rotation_logits(net: Network, batch: RotationBatch) -> torch.Tensor:
    return net.heads["rotation"](net.embed(batch.images))


def relloc_logits(net: Network, batch: RelLocBatch) -> torch.Tensor:
    stride = net.config.total_stride
    center = net.embed(_fit_to_stride(batch.center_patches, stride))
    neighbor = net.embed(_fit_to_stride(batch.neighbor_patches, stride))
    return net.heads["relloc"](torch.cat([center, neighbor], dim=1))


def task_loss(task: str, net: Network, batch, state=None) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Differentiable loss for one batch plus logits when the task has them."""
    expected = {
        "rotation": RotationBatch,
        "relloc": RelLocBatch,
        "moco": ContrastiveBatch,
        "swav": ContrastiveBatch,
    }
    if task not in expected:
        raise TaskError(f"unknown pretext task {task!r}")
    if not isinstance(batch, expected[task]):
        raise TaskError(f"task {task} cannot consume {type(batch).__name__}")
    if task == "rotation":
        logits = rotation_logits(net, batch)
        return F.cross_entropy(logits, batch.targets), logits
    if task == "relloc":
        logits = relloc_logits(net, batch)
        return F.cross_entropy(logits, batch.targets), logits
    if task == "moco":
        if not isinstance(state, MocoState):
            raise TaskError("moco needs a MocoState")
        q = _project(net, "moco", batch.view1)
        with torch.no_grad():
            k = _project(state.key_net, "moco", batch.view2)
        if len(state.queue) == 0:
            raise StateError("key queue is empty")
        return info_nce(q, k, state.queue.keys(), state.temperature), None
    head = net.heads["swav"]
    return swav_loss(head(net.embed(batch.view1)), head(net.embed(batch.view2)), head.prototypes,
                     state or SwavState()), None


def pretext_loss(task: str, net: Network, batch, state=None) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and parameter gradients for one batch; parameters are not updated."""
    loss, _ = task_loss(task, net, batch, state)
    return float(loss.detach()), _backward(net, loss, None)


# ---------------------------------------------------------------------------
# trainers used by the curriculum
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    loss: float | None
    correct: int = 0
    count: int = 0


@dataclass
class TaskParams:
    """Task-internal constants (not covered by the per-step hyperparameters)."""

    moco_temperature: float = 0.2
    moco_queue: int = 256
    moco_momentum: float = 0.99
    swav_prototypes: int = 32
    swav_epsilon: float = 0.05
    swav_iters: int = 3
    swav_temperature: float = 0.1
    relloc_gap: int = 2
    relloc_jitter: int = 1
    proj_dim: int = 32


@dataclass
class PretextTrainer:
    task: str
    params: TaskParams = field(default_factory=TaskParams)
    batch_size: int = 32
    state: object = None

    def attach(self, net: Network) -> None:
        if self.task == "moco":
            self.state = MocoState.create(net, self.params.moco_queue, self.params.moco_temperature,
                                          self.params.moco_momentum, self.batch_size)
        elif self.task == "swav":
            self.state = SwavState(self.params.swav_epsilon, self.params.swav_iters, self.params.swav_temperature)
            normalize_prototypes(net)

    def step(self, net: Network, images: torch.Tensor, gen: torch.Generator, optimizer: Optimizer) -> StepStats:
        if self.task == "moco":
            loss, _, _ = moco_step(self.state, net, images, gen, optimizer)
            return StepStats(None if loss is None else float(loss))
        if self.task == "swav":
            loss, _, _ = swav_step(self.state, net, images, gen, optimizer)
            return StepStats(float(loss))
        if self.task == "rotation":
            batch = make_rotation_batch(images, gen)
        elif self.task == "relloc":
            batch = make_relloc_batch(images, gen, self.params.relloc_gap, self.params.relloc_jitter)
        else:
            raise TaskError(f"unknown pretext task {self.task!r}")
        loss, logits = task_loss(self.task, net, batch)
        _backward(net, loss, optimizer)
        correct = int((logits.argmax(dim=1) == batch.targets).sum())
        return StepStats(float(loss.detach()), correct, len(batch.targets))
