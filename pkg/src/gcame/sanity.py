"""Model-parameter randomization checks for saliency explanations."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from scipy.stats import spearmanr
from skimage.metrics import structural_similarity
from torch import nn

from .core import ExplanationError, SaliencyMap, explain
from .detector import Detector, ExplanationTarget, ImageInput, _resolve
from .metrics import pairwise_iou

log = logging.getLogger(__name__)

MATCH_IOU = 0.5


class RandomizationMode(str, Enum):
    CASCADING = "cascading"
    INDEPENDENT = "independent"


@dataclass
class RandomizationPlan:
    """Which layer to re-initialise and how.

    ``layer=None`` is the no-op plan. ``layer_ids`` is the top-to-bottom layer
    order used for cascading; the detector's own order when omitted.
    """

    mode: RandomizationMode = RandomizationMode.CASCADING
    layer: str | None = None
    std: float = 0.05
    seed: int = 0
    layer_ids: list[str] | None = None

    def __post_init__(self):
        self.mode = RandomizationMode(self.mode)
        if not self.std > 0:
            raise ValueError("std must be positive")

    def affected_layers(self, detector: Detector) -> list[str]:
        if self.layer is None:
            return []
        order = list(self.layer_ids or detector.randomizable_layers())
        if self.layer not in order:
            raise LookupError(f"unknown layer {self.layer!r}; known layers: {order}")
        if self.mode is RandomizationMode.INDEPENDENT:
            return [self.layer]
        return order[:order.index(self.layer) + 1]

    def label(self) -> str:
        return "original" if self.layer is None else f"{self.mode.value}:{self.layer}"

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "layer": self.layer, "std": self.std, "seed": self.seed}


def randomize(detector: Detector, plan: RandomizationPlan) -> Detector:
    """Copy of ``detector`` with the plan's layers re-drawn from N(0, std)."""
    layers = plan.affected_layers(detector)
    out = copy.deepcopy(detector)
    gen = torch.Generator().manual_seed(plan.seed)
    with torch.no_grad():
        for lid in layers:
            module = _resolve(out.model, lid)
            params = [p for m in module.modules() if isinstance(m, (nn.Conv2d, nn.Linear))
                      for p in m.parameters(recurse=False)]
            if not params:
                raise LookupError(f"layer {lid!r} has no convolution or linear weights")
            for p in params:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * plan.std)
    return out


def rank_correlation(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "values", b), dtype=np.float64).ravel()
    if np.array_equal(a, b):
        return 1.0
    if a.min() == a.max() or b.min() == b.max():
        return 0.0
    return float(spearmanr(a, b).statistic)


def structural_sim(a, b) -> float:
    a = np.asarray(getattr(a, "values", a), dtype=np.float64)
    b = np.asarray(getattr(b, "values", b), dtype=np.float64)
    if np.array_equal(a, b):
        return 1.0
    return float(structural_similarity(a, b, data_range=1.0))


@dataclass
class SanityResult:
    plan: RandomizationPlan
    saliency: SaliencyMap | None
    rank_correlation: float
    ssim: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "label": self.plan.label(),
                "rank_correlation": self.rank_correlation, "ssim": self.ssim, "flags": self.flags}


def match_target(detector: Detector, image: ImageInput, target: ExplanationTarget,
                 min_iou: float = MATCH_IOU) -> ExplanationTarget | None:
    """The detector's own detection of the target object, or None.

    A match has the target's class and the highest IoU with the target box,
    at least ``min_iou``.
    """
    best, best_iou = None, 0.0
    for det in detector.detect(image):
        if det.class_index != target.target_class:
            continue
        iou = pairwise_iou(det.box, target.detection.box)
        if iou > best_iou:
            best, best_iou = det, iou
    if best is None or best_iou < min_iou:
        return None
    return ExplanationTarget(best, target.score_kind, target.target_class)


def sanity_suite(detector: Detector, image: ImageInput, target: ExplanationTarget,
                 plans: list[RandomizationPlan], baseline: SaliencyMap | None = None
                 ) -> list[SanityResult]:
    """Re-explain the target object under each randomized model.

    The randomized model must still detect the object (same class, IoU at
    least 0.5 with the original box); its own detection is explained. If it
    no longer does, similarity is 0 and the result is flagged
    ``no_detection``.
    """
    if baseline is None:
        baseline = explain(detector, image, target)
    results = []
    for plan in plans:
        model = randomize(detector, plan)
        matched = match_target(model, image, target)
        if matched is None:
            log.info("plan %s: target object no longer detected", plan.label())
            results.append(SanityResult(plan, None, 0.0, 0.0, ["no_detection"]))
            continue
        try:
            smap = explain(model, image, matched, method_tag="gcame")
        except ExplanationError as exc:
            log.info("plan %s: explanation failed (%s)", plan.label(), exc)
            results.append(SanityResult(plan, None, 0.0, 0.0, ["no_gradient"]))
            continue
        results.append(SanityResult(plan, smap, rank_correlation(baseline, smap),
                                    structural_sim(baseline, smap)))
    return results


def similarity_table(results: list[SanityResult]) -> str:
    return json.dumps({"schema": "v1", "results": [r.to_dict() for r in results]},
                      indent=2, sort_keys=True)


def default_plans(detector: Detector, modes=("cascading", "independent"), std=0.05, seed=0,
                  layers=None) -> list[RandomizationPlan]:
    layers = list(layers or detector.randomizable_layers())
    plans = [RandomizationPlan(layer=None, std=std, seed=seed)]
    for mode in modes:
        plans += [RandomizationPlan(mode, lid, std, seed) for lid in layers]
    return plans
