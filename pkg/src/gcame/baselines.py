"""Reference explainers: signed GradCAM and D-RISE."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .core import (SaliencyMap, combine_saliency, explain, gradients_for_score,
                   weight_feature_maps)
from .detector import Detector, ExplanationTarget, ImageInput, forward_with_capture

log = logging.getLogger(__name__)


def gradcam_explain(detector: Detector, image: ImageInput, target, session=None) -> SaliencyMap:
    """Classification-style GradCAM on a detector.

    With an :class:`ExplanationTarget` this is the G-CAME pipeline with every
    Gaussian mask set to 1. With a bare class index the score is the summed
    class probability over every box above the detector's threshold, so all
    objects of that class light up.
    """
    if isinstance(target, ExplanationTarget):
        return explain(detector, image, target, session=session, gaussian=False, method_tag="gradcam")
    c = int(target)
    if not 0 <= c < detector.num_classes:
        raise ValueError(f"class {c} outside [0, {detector.num_classes})")
    t0 = time.perf_counter()
    if session is None:
        _, session = forward_with_capture(detector, image)
    rows = session.rows
    keep = rows[:, 4].detach() >= detector.score_threshold
    if not bool(keep.any()):
        keep = torch.ones_like(keep)
    score = rows[keep, 5 + c].sum()
    captures = gradients_for_score(session, score, f"sum of class {c} scores")
    weightings = [weight_feature_maps(cap) for cap in captures]
    smap = combine_saliency(captures, weightings, None, image.shape, None, "gradcam",
                            {"target_class": c, "layers": [cap.layer_id for cap in captures]})
    smap.meta["runtime_s"] = time.perf_counter() - t0
    return smap


@dataclass
class DRiseConfig:
    grid_size: tuple[int, int] = (16, 16)
    occurrence_prob: float = 0.5
    num_masks: int = 4000
    seed: int = 0
    batch_size: int = 100
    use_objectness: bool = False
    # 0 scores every dense prediction row; raise to score only confident boxes
    score_threshold: float = 0.0

    def __post_init__(self):
        self.grid_size = tuple(int(g) for g in self.grid_size)
        if min(self.grid_size) < 2:
            raise ValueError("grid_size must be at least 2 x 2")
        if not 0 < self.occurrence_prob < 1:
            raise ValueError("occurrence_prob must lie in (0, 1)")
        if self.num_masks < 1 or self.batch_size < 1:
            raise ValueError("num_masks and batch_size must be positive")


def generate_random_masks(config: DRiseConfig, image_shape) -> Iterator[np.ndarray]:
    """Yield ``batch x H x W`` float32 masks in [0, 1].

    Each mask is a Bernoulli grid upsampled bilinearly to one cell larger than
    the image and cropped at a random sub-cell offset.
    """
    h, w = image_shape[:2]
    gh, gw = config.grid_size
    cell_h, cell_w = math.ceil(h / gh), math.ceil(w / gw)
    up_h, up_w = (gh + 1) * cell_h, (gw + 1) * cell_w
    rng = np.random.default_rng(config.seed)
    remaining = config.num_masks
    while remaining > 0:
        n = min(config.batch_size, remaining)
        grid = (rng.random((n, 1, gh, gw)) < config.occurrence_prob).astype(np.float32)
        shifts = np.stack([rng.integers(0, cell_h, n), rng.integers(0, cell_w, n)], 1)
        up = F.interpolate(torch.from_numpy(grid), size=(up_h, up_w), mode="bilinear",
                           align_corners=False)[:, 0].numpy()
        yield np.stack([up[i, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(shifts)])
        remaining -= n


def _box_iou_many(boxes: torch.Tensor, box) -> torch.Tensor:
    x1, y1, x2, y2 = (float(v) for v in box)
    iw = (torch.minimum(boxes[..., 2], torch.tensor(x2, dtype=boxes.dtype))
          - torch.maximum(boxes[..., 0], torch.tensor(x1, dtype=boxes.dtype))).clamp(min=0)
    ih = (torch.minimum(boxes[..., 3], torch.tensor(y2, dtype=boxes.dtype))
          - torch.maximum(boxes[..., 1], torch.tensor(y1, dtype=boxes.dtype))).clamp(min=0)
    inter = iw * ih
    area = (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)
    union = area + (x2 - x1) * (y2 - y1) - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(union))


def mask_scores(rows: torch.Tensor, target, config: DRiseConfig) -> np.ndarray:
    """Per-image ``max_j IoU(target, box_j) * p_c(box_j)`` for ``B x N x (5 + C)`` rows."""
    det = getattr(target, "detection", target)
    c = getattr(target, "target_class", None)
    c = det.class_index if c is None else c
    rows = rows.double()
    sim = _box_iou_many(rows[..., :4], det.box) * rows[..., 5 + c]
    if config.use_objectness:
        sim = sim * rows[..., 4]
    sim = torch.where(rows[..., 4] >= config.score_threshold, sim, torch.zeros_like(sim))
    return sim.max(dim=1).values.numpy() if sim.shape[1] else np.zeros(sim.shape[0])


def drise_explain(detector: Detector, image: ImageInput, target, config: DRiseConfig | None = None
                  ) -> SaliencyMap:
    """Score-weighted average of random masks, values in [0, 1]."""
    config = config or DRiseConfig()
    t0 = time.perf_counter()
    h, w = image.shape
    base = image.to_tensor()
    acc = np.zeros((h, w), dtype=np.float64)
    total = 0.0
    for masks in generate_random_masks(config, (h, w)):
        m = torch.from_numpy(masks)[:, None]
        rows = detector.raw_batch(base * m)
        s = mask_scores(rows, target, config)
        acc += np.tensordot(s, masks.astype(np.float64), axes=1)
        total += float(s.sum())
    meta = {"num_masks": config.num_masks, "grid_size": list(config.grid_size),
            "occurrence_prob": config.occurrence_prob, "seed": config.seed}
    if total <= 0:
        log.warning("D-RISE: target never matched on any masked image; returning a uniform map")
        values = np.ones((h, w))
        meta["degenerate"] = True
    else:
        values = np.clip(acc / total, 0.0, 1.0)
    meta["runtime_s"] = time.perf_counter() - t0
    tgt = target if isinstance(target, ExplanationTarget) else ExplanationTarget(target)
    return SaliencyMap(values, tgt, "drise", meta)
