"""Class activation maps, lung-mask cleanup and the attention-inside-lungs score."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import Checkpoint, Network, build_network
from .data import Dataset
from .errors import EmptyError, EmptyMaskError, NumericError, ShapeError, ZeroAttentionError

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@torch.no_grad()
def compute_cams(model: Network | Checkpoint, images: torch.Tensor, clamp: bool = True) -> np.ndarray:
    """CAMs of the predicted class for a batch ``(N, 1, H, W)``; returns ``(N, H, W)`` float32.

    The raw map is the head-weighted sum of last-stage feature maps. Negative
    values are clamped to zero (unless ``clamp`` is off) before bilinear
    upsampling to the image size.
    """
    net = build_network(model) if isinstance(model, Checkpoint) else model
    head = net.heads["classification"]
    was_training = net.training
    net.eval()
    try:
        maps, emb = net.features(images.to(head.weight.dtype))
    finally:
        net.train(was_training)
    if not torch.isfinite(maps).all():
        raise NumericError("non-finite feature maps")
    logits = head(emb)
    predicted = logits.argmax(dim=1)  # first maximum on ties
    weights = head.weight[predicted]  # (N, K)
    raw = torch.einsum("nk,nkhw->nhw", weights, maps)
    if clamp:
        raw = raw.clamp(min=0)
    up = F.interpolate(raw.unsqueeze(1), size=images.shape[-2:], mode="bilinear", align_corners=False)
    return up.squeeze(1).float().numpy()


def compute_cam(model: Network | Checkpoint, image, clamp: bool = True) -> np.ndarray:
    """CAM for one image given as ``(H, W)`` uint8/float or ``(1, H, W)`` tensor."""
    x = torch.as_tensor(np.asarray(image))
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    while x.ndim < 4:
        x = x.unsqueeze(0)
    return compute_cams(model, x, clamp)[0]


def _disc(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return yy**2 + xx**2 <= radius**2


def postprocess_mask(raw: np.ndarray, min_area_fraction: float = 0.01, closing_radius: int = 2) -> np.ndarray:
    """Keep the (up to) two largest 8-connected components above the area
    threshold, then close holes with a disc of ``closing_radius``.

    The closing is computed on a padded canvas so the image border does not
    erode the mask.
    """
    raw = np.asarray(raw)
    if raw.ndim != 2 or not np.isin(raw, (0, 1)).all():
        raise ShapeError("raw mask must be a 2-D binary grid")
    labels, n = ndimage.label(raw.astype(bool), structure=EIGHT_CONNECTED)
    areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    threshold = min_area_fraction * raw.size
    passing = [i + 1 for i in np.argsort(-areas, kind="stable") if areas[i] >= threshold][:2]
    if not passing:
        raise EmptyMaskError("no connected component reaches the area threshold")
    kept = np.isin(labels, passing)
    if closing_radius > 0:
        pad = closing_radius + 1
        padded = np.pad(kept, pad)
        closed = ndimage.binary_closing(padded, structure=_disc(closing_radius))
        kept = closed[pad:-pad, pad:-pad]
    return kept.astype(np.uint8)


def ail(attention: np.ndarray, mask: np.ndarray) -> float:
    """Share of total attention that falls inside the mask (float64 sums)."""
    a = np.asarray(attention, dtype=np.float64)
    m = np.asarray(mask)
    if a.shape != m.shape:
        raise ShapeError(f"attention {a.shape} and mask {m.shape} differ")
    total = a.sum()
    if total == 0:
        raise ZeroAttentionError("attention map sums to zero")
    if not np.isfinite(total):
        raise NumericError("non-finite attention")
    return float((a * (m != 0)).sum() / total)


@dataclass
class AilSummary:
    mean: float
    per_image: dict[str, float]
    excluded: dict[str, str] = field(default_factory=dict)

    def write_csv(self, path: str | Path, ids) -> None:
        """CSV ``id,ail,excluded_reason`` in the order of ``ids``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "ail", "excluded_reason"])
            for sid in ids:
                if sid in self.per_image:
                    writer.writerow([sid, f"{self.per_image[sid]:.9g}", ""])
                else:
                    writer.writerow([sid, "", self.excluded.get(sid, "not_scored")])


def summarize_ail(scores: Mapping[str, float], excluded: Mapping[str, str] | None = None) -> AilSummary:
    if not scores:
        raise EmptyError("no image produced a valid AIL score")
    values = np.fromiter(scores.values(), dtype=np.float64)
    # numpy sums float64 arrays pairwise
    return AilSummary(float(values.sum() / len(values)), dict(scores), dict(excluded or {}))


def mean_ail(model: Network | Checkpoint, dataset: Dataset, masks: Mapping[str, np.ndarray], clamp: bool = True,
             only_correct: bool = False, batch_size: int = 128) -> AilSummary:
    """Average AIL over the images of ``dataset``.

    Images without a mask are skipped and images whose CAM sums to zero are
    excluded; both are reported in ``excluded``. With ``only_correct`` the
    average is restricted to correctly classified images.
    """
    net = build_network(model) if isinstance(model, Checkpoint) else model
    x = dataset.tensor()
    cams = np.concatenate([compute_cams(net, x[i : i + batch_size], clamp) for i in range(0, len(x), batch_size)]) \
        if len(x) else np.zeros((0,) + dataset.images.shape[1:], np.float32)
    correct = None
    if only_correct:
        from .classify import predict

        preds, _ = predict(net, dataset)
        correct = preds == dataset.labels
    scores, excluded = {}, {}
    for i, sid in enumerate(dataset.ids):
        if sid not in masks:
            excluded[sid] = "missing_mask"
            continue
        if correct is not None and not correct[i]:
            excluded[sid] = "misclassified"
            continue
        try:
            scores[sid] = ail(cams[i], masks[sid])
        except ZeroAttentionError:
            excluded[sid] = "zero_attention"
            log.info("%s excluded: zero attention", sid)
    return summarize_ail(scores, excluded)


def inverse_segment(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the lung pixels (``mask == 1``), keep everything else."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    return np.where(mask != 0, np.zeros_like(image), image)


def lung_only(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero everything outside the lungs."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    return np.where(mask != 0, image, np.zeros_like(image))
