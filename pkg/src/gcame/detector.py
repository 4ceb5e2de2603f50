"""Uniform interface over object detectors.

Every adapter produces dense or post-processed prediction rows laid out as
``(x1, y1, x2, y2, objectness, p_1, ..., p_C)`` and names the convolution
layers whose activations feed the explainers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn
from torchvision.ops import batched_nms

DEFAULT_SCORE_THRESHOLD = 0.25


class DetectionFormatError(ValueError):
    """Raw model output does not follow the 4 + 1 + C row layout."""


class UnsupportedArchitectureError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class ScorePathError(RuntimeError):
    """The target score is not differentiable with respect to the model."""


class ModelKind(str, Enum):
    ONE_STAGE = "one_stage"
    TWO_STAGE = "two_stage"
    TOY = "toy"


class ScoreKind(str, Enum):
    CLASS_SCORE = "class_score"
    OBJECTNESS_WEIGHTED = "objectness_weighted"


@dataclass
class ImageInput:
    """An RGB image as an ``H x W x 3`` float array in [0, 1]."""

    pixels: np.ndarray
    source_path: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < 32 or px.shape[1] < 32:
            raise ValueError(f"image must be at least 32x32, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must be finite and within [0, 1]")
        self.pixels = px.astype(np.float32, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """``1 x 3 x H x W`` float tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))[None]


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    objectness: float
    class_scores: np.ndarray
    class_index: int
    box_index: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")
        scores = np.asarray(self.class_scores, dtype=np.float64)
        if scores.size and (scores.min() < 0 or scores.max() > 1):
            raise ValueError("class scores must lie in [0, 1]")
        self.class_scores = scores

    @property
    def score(self) -> float:
        return float(self.class_scores[self.class_index])

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "objectness": float(self.objectness),
            "class_scores": [float(v) for v in self.class_scores],
            "class_index": int(self.class_index),
            "box_index": int(self.box_index),
        }


@dataclass
class TargetLayerSet:
    layer_ids: list[str]
    branch_scales: list[float]

    def __post_init__(self):
        if not self.layer_ids:
            raise ValueError("target layer set is empty")
        if len(self.branch_scales) != len(self.layer_ids):
            raise ValueError("one stride per layer required")
        if any(s <= 0 for s in self.branch_scales):
            raise ValueError("strides must be positive")

    def __len__(self):
        return len(self.layer_ids)


@dataclass
class ExplanationTarget:
    detection: Detection
    score_kind: ScoreKind = ScoreKind.CLASS_SCORE
    target_class: int | None = None

    def __post_init__(self):
        if self.target_class is None:
            self.target_class = self.detection.class_index
        n_classes = len(self.detection.class_scores)
        if not 0 <= self.target_class < n_classes:
            raise ValueError(f"target class {self.target_class} outside [0, {n_classes})")
        self.score_kind = ScoreKind(self.score_kind)


def parse_detections(raw_output, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                     num_classes: int | None = None) -> list[Detection]:
    """Turn raw ``(N, 4 + 1 + C)`` rows into detections above ``score_threshold``.

    Rows are filtered on objectness and returned sorted by objectness,
    highest first. ``box_index`` keeps the originating row so the score can be
    routed back through the graph later.
    """
    if isinstance(raw_output, torch.Tensor):
        raw_output = raw_output.detach().cpu().numpy()
    rows = np.asarray(raw_output, dtype=np.float64)
    if rows.ndim == 1 and rows.size == 0:
        return []
    if rows.ndim != 2 or rows.shape[1] < 6:
        raise DetectionFormatError(
            f"expected rows laid out as (x1, y1, x2, y2, objectness, p_1..p_C) with "
            f"length 4 + 1 + C, got array of shape {rows.shape}")
    if num_classes is not None and rows.shape[1] != 5 + num_classes:
        raise DetectionFormatError(
            f"expected row length 4 + 1 + {num_classes} = {5 + num_classes}, got {rows.shape[1]}")
    keep = np.flatnonzero(rows[:, 4] >= score_threshold)
    # stable sort keeps row order among equal objectness
    keep = keep[np.argsort(-rows[keep, 4], kind="stable")]
    out = []
    for idx in keep:
        row = rows[idx]
        if not (row[0] < row[2] and row[1] < row[3]):
            continue
        scores = np.clip(row[5:], 0.0, 1.0)
        out.append(Detection(box=tuple(float(v) for v in row[:4]),
                             objectness=float(np.clip(row[4], 0.0, 1.0)),
                             class_scores=scores,
                             class_index=int(np.argmax(scores)),
                             box_index=int(idx)))
    return out


def apply_nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    if not detections:
        return []
    boxes = torch.tensor([d.box for d in detections], dtype=torch.float64)
    scores = torch.tensor([d.objectness * d.score for d in detections], dtype=torch.float64)
    labels = torch.tensor([d.class_index for d in detections])
    keep = batched_nms(boxes, scores, labels, iou_threshold).tolist()
    kept = sorted(keep)  # preserve the objectness ordering of parse_detections
    return [detections[i] for i in kept]


def weights_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _resolve(model: nn.Module, layer_id: str) -> nn.Module:
    modules = dict(model.named_modules())
    if layer_id not in modules:
        raise LookupError(f"model has no layer named {layer_id!r}")
    return modules[layer_id]


def _has_conv(module: nn.Module) -> bool:
    return any(isinstance(m, nn.Conv2d) for m in module.modules())


class Detector:
    """Base adapter. Subclasses define ``raw_output`` and the layer layout.

    ``raw_output`` maps a ``B x 3 x H x W`` batch to ``B x N x (5 + C)`` rows
    with corner boxes and probabilities, differentiable end to end.
    """

    kind: ModelKind = ModelKind.TOY
    key = "base"

    def __init__(self, model: nn.Module, num_classes: int,
                 score_threshold: float = DEFAULT_SCORE_THRESHOLD, nms_iou: float = 0.45):
        self.model = model.eval()
        self.num_classes = num_classes
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou

    def raw_output(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def target_layers(self) -> TargetLayerSet:
        return select_target_layers(self.model, self.kind)

    def randomizable_layers(self) -> list[str]:
        """Layer ids ordered from the output (top) to the input (bottom)."""
        raise NotImplementedError

    def postprocess(self, rows, threshold: float | None = None) -> list[Detection]:
        thr = self.score_threshold if threshold is None else threshold
        dets = parse_detections(rows, thr, self.num_classes)
        return apply_nms(dets, self.nms_iou)

    @torch.no_grad()
    def detect(self, image: ImageInput, threshold: float | None = None) -> list[Detection]:
        rows = self.raw_output(image.to_tensor())[0]
        return self.postprocess(rows, threshold)

    @torch.no_grad()
    def raw_batch(self, batch: torch.Tensor) -> torch.Tensor:
        return self.raw_output(batch)

    def clone(self) -> "Detector":
        import copy
        return copy.deepcopy(self)

    def digest(self) -> str:
        return weights_digest(self.model)


def target_score(rows: torch.Tensor, target: ExplanationTarget) -> torch.Tensor:
    """Scalar score ``S^c`` for ``target`` read from ``N x (5 + C)`` rows."""
    row = rows[target.detection.box_index]
    score = row[5 + target.target_class]
    if target.score_kind is ScoreKind.OBJECTNESS_WEIGHTED:
        score = score * row[4]
    return score


def select_target_layers(model: nn.Module, model_kind, branch: str = "cls") -> TargetLayerSet:
    """Pick the convolution layers whose feature maps are explained.

    one_stage: the final convolution of each head branch (classification
    branch by default, ``branch="stem"`` for the shared stem); regression
    layers are never returned. two_stage: the output convolution of every FPN
    level. toy: the single declared head layer.
    """
    kind = ModelKind(model_kind)
    if not _has_conv(model):
        raise UnsupportedArchitectureError("model contains no convolution layers")
    if kind is ModelKind.TOY:
        ids = list(getattr(model, "target_layer_ids", ()))
        strides = list(getattr(model, "target_strides", ()))
        if not ids:
            raise UnsupportedArchitectureError("toy model declares no target layer")
        return TargetLayerSet(ids, [float(s) for s in strides])
    if kind is ModelKind.ONE_STAGE:
        head = getattr(model, "head", None)
        attr = {"cls": "cls_convs", "stem": "stems"}.get(branch)
        if attr is None:
            raise ConfigurationError(f"unknown head branch {branch!r}; use 'cls' or 'stem'")
        branches = getattr(head, attr, None) if head is not None else None
        if branches is None:
            raise UnsupportedArchitectureError(f"one-stage model needs head.{attr}")
        ids = []
        for i, sub in enumerate(branches):
            base = f"head.{attr}.{i}"
            # a plain container of conv blocks: take its last block
            if type(sub) is nn.Sequential and len(sub) > 0:
                ids.append(f"{base}.{len(sub) - 1}")
            else:
                ids.append(base)
        strides = [float(s) for s in getattr(head, "strides", (8, 16, 32))[:len(ids)]]
        if any("reg" in i for i in ids):
            raise UnsupportedArchitectureError("regression-branch layer selected")
        return TargetLayerSet(ids, strides)
    # two-stage: FPN output convolutions P2..P5
    modules = dict(model.named_modules())
    prefix = "backbone.fpn.layer_blocks"
    ids = sorted((n for n in modules if n.startswith(prefix + ".") and n.count(".") == 3),
                 key=lambda n: int(n.rsplit(".", 1)[1]))
    if not ids:
        raise UnsupportedArchitectureError("two-stage model has no FPN layer blocks")
    return TargetLayerSet(ids, [float(4 * 2 ** i) for i in range(len(ids))])


class CaptureSession:
    """Activations of the target layers from one forward pass, graph retained."""

    def __init__(self, detector: Detector, image: ImageInput, layers: TargetLayerSet,
                 rows: torch.Tensor, activations: dict[str, torch.Tensor]):
        self.detector = detector
        self.image = image
        self.layers = layers
        self.rows = rows
        self._activations = activations

    def activation(self, layer_id: str) -> torch.Tensor:
        if layer_id not in self._activations:
            raise LookupError(f"layer {layer_id!r} was not captured; "
                              f"captured layers: {list(self._activations)}")
        return self._activations[layer_id]

    @property
    def layer_ids(self) -> list[str]:
        return list(self.layers.layer_ids)


def forward_with_capture(detector: Detector, image: ImageInput,
                         layers: TargetLayerSet | None = None,
                         threshold: float | None = None
                         ) -> tuple[list[Detection], CaptureSession]:
    """Run the detector once, keeping target-layer activations for backward passes."""
    layers = layers or detector.target_layers()
    captured: dict[str, torch.Tensor] = {}
    handles = []
    try:
        for lid in layers.layer_ids:
            module = _resolve(detector.model, lid)

            def hook(mod, inp, out, lid=lid):
                captured[lid] = out
            handles.append(module.register_forward_hook(hook))
        try:
            with torch.enable_grad():
                rows = detector.raw_output(image.to_tensor())[0]
        except Exception as exc:
            raise RuntimeError(f"inference failed in {type(detector).__name__} "
                               f"while capturing {layers.layer_ids}: {exc}") from exc
    finally:
        for h in handles:
            h.remove()
    missing = [lid for lid in layers.layer_ids if lid not in captured]
    if missing:
        raise RuntimeError(f"layers {missing} produced no activation during the forward pass")
    detections = detector.postprocess(rows.detach(), threshold)
    return detections, CaptureSession(detector, image, layers, rows, captured)


def load_detector(key: str, weights_path: str | None = None, **kwargs) -> Detector:
    """Build an adapter by string key: ``toy``, ``yolox`` or ``fasterrcnn``."""
    if key == "toy":
        from .toy import build_toy_detector
        return build_toy_detector(checkpoint=weights_path or "bundled", **kwargs)
    if key == "yolox":
        from .adapters import YoloxDetector
        return YoloxDetector.from_path(weights_path, **kwargs)
    if key == "fasterrcnn":
        from .adapters import FasterRCNNDetector
        return FasterRCNNDetector.from_path(weights_path, **kwargs)
    raise ConfigurationError(f"unknown detector {key!r}; choose toy, yolox or fasterrcnn")


__all__ = [
    "ImageInput", "Detection", "TargetLayerSet", "ExplanationTarget", "ModelKind", "ScoreKind",
    "Detector", "CaptureSession", "parse_detections", "apply_nms", "select_target_layers",
    "forward_with_capture", "target_score", "weights_digest", "load_detector",
    "DetectionFormatError", "UnsupportedArchitectureError", "ConfigurationError", "ScorePathError",
]
