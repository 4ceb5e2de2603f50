"""Gaussian class activation mapping for a single detected object.

Pipeline per target layer: gradient of the target score with respect to the
layer's feature maps, the object's center on the feature grid, signed channel
weights, one Gaussian mask per channel, and a gated weighted sum. Layer maps
are upsampled to the input size, summed, and normalised to [0, 1].
"""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .detector import (CaptureSession, Detector, ExplanationTarget, ImageInput, ModelKind,
                       ScorePathError, forward_with_capture, target_score)

SIGMA_MIN = 0.1
# natural log for the sigma heuristic; swap here to audit another base
LOG = np.log


class ExplanationError(RuntimeError):
    def __init__(self, message, stage: str | None = None):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage


class NoSignalError(ExplanationError):
    """The gradient map is all zero; the layer should be skipped."""


class EmptyExplanationError(ExplanationError):
    """No target layer received gradient from the target score."""


@dataclass
class GradientCapture:
    layer_id: str
    activation: np.ndarray  # k x h x w
    gradient: np.ndarray  # k x h x w, d score / d activation
    stride: float = 1.0
    skippable: bool = False

    def __post_init__(self):
        self.activation = np.asarray(self.activation, dtype=np.float64)
        self.gradient = np.asarray(self.gradient, dtype=np.float64)
        if self.activation.shape != self.gradient.shape or self.activation.ndim != 3:
            raise ValueError(f"activation {self.activation.shape} and gradient "
                             f"{self.gradient.shape} must both be k x h x w")
        if not (np.all(np.isfinite(self.activation)) and np.all(np.isfinite(self.gradient))):
            raise ValueError(f"non-finite values captured at layer {self.layer_id}")

    @property
    def channels(self) -> int:
        return self.activation.shape[0]

    @property
    def feature_h(self) -> int:
        return self.activation.shape[1]

    @property
    def feature_w(self) -> int:
        return self.activation.shape[2]


@dataclass
class ChannelWeighting:
    alpha: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


@dataclass(frozen=True)
class GaussianMaskSpec:
    center: tuple[int, int]
    sigma: float
    grid_h: int
    grid_w: int
    scale_r: float = float("nan")
    scale_s: float = float("nan")
    raw_sigma: float = float("nan")
    degenerate: bool = False

    def __post_init__(self):
        i, j = self.center
        if not (0 <= i < self.grid_h and 0 <= j < self.grid_w):
            raise ValueError(f"center {self.center} outside {self.grid_h}x{self.grid_w} grid")
        if not self.sigma >= SIGMA_MIN:
            raise ValueError(f"sigma {self.sigma} below minimum {SIGMA_MIN}")

    @property
    def normalizer(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class SaliencyMap:
    values: np.ndarray
    target: ExplanationTarget | None = None
    method_tag: str = "gcame"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"saliency must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min(initial=0) < 0 or v.max(initial=0) > 1:
            raise ValueError("saliency values must be finite and within [0, 1]")
        self.values = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@contextmanager
def _stage(name):
    try:
        yield
    except ExplanationError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    except Exception as exc:
        raise ExplanationError(f"{type(exc).__name__}: {exc}", stage=name) from exc


def compute_gradient_maps(session: CaptureSession, target: ExplanationTarget) -> list[GradientCapture]:
    """One backward pass of the target score into every captured layer."""
    n_rows = session.rows.shape[0]
    if not 0 <= target.detection.box_index < n_rows:
        raise IndexError(f"box_index {target.detection.box_index} outside {n_rows} output rows")
    return gradients_for_score(session, target_score(session.rows, target), "target_score")


def gradients_for_score(session: CaptureSession, score: torch.Tensor,
                        accessor: str = "score") -> list[GradientCapture]:
    """Gradient of an arbitrary scalar ``score`` into every captured layer."""
    if not score.requires_grad:
        raise ScorePathError(f"{accessor} is not connected to the autograd graph; "
                             "the detector's raw_output must be differentiable")
    ids = session.layer_ids
    acts = [session.activation(lid) for lid in ids]
    grads = torch.autograd.grad(score, acts, retain_graph=True, allow_unused=True)
    out = []
    for lid, stride, act, grad in zip(ids, session.layers.branch_scales, acts, grads):
        a = act.detach()[0].double().numpy()
        g = np.zeros_like(a) if grad is None else grad.detach()[0].double().numpy()
        out.append(GradientCapture(lid, a, g, stride, skippable=not np.any(g)))
    return out


def locate_center(capture: GradientCapture, model_kind=ModelKind.TOY) -> tuple[int, int]:
    """Feature-grid pixel ``(row, col)`` where the target object sits.

    One-stage heads route the score through a 1x1 prediction convolution, so
    exactly one pixel carries gradient; otherwise (and as fallback) take the
    largest absolute channel-summed gradient, first in row-major order.
    """
    g = capture.gradient
    if not np.any(g):
        raise NoSignalError(f"gradient at layer {capture.layer_id} is all zero; skip this layer")
    w = g.shape[2]
    if ModelKind(model_kind) is ModelKind.ONE_STAGE:
        nonzero = np.any(g != 0, axis=0)
        if nonzero.sum() == 1:
            i, j = np.argwhere(nonzero)[0]
            return int(i), int(j)
    summed = np.abs(g.sum(axis=0))
    if not summed.max() > 0:
        summed = np.abs(g).sum(axis=0)
    i, j = divmod(int(np.argmax(summed)), w)
    return i, j


def weight_feature_maps(capture: GradientCapture) -> ChannelWeighting:
    alpha = capture.gradient.mean(axis=(1, 2))
    return ChannelWeighting(alpha, np.flatnonzero(alpha > 0), np.flatnonzero(alpha < 0))


def sigma_from_gradient(mean_gradient: float, feature_hw: tuple[int, int],
                        image_hw: tuple[int, int]) -> tuple[float, float, float, float, bool]:
    """``(sigma, R, S, raw_sigma, degenerate)`` for one channel.

    R = log|mean gradient|, S = sqrt(HW / hw), raw sigma = R log S * 3 / floor((sqrt(hw) - 1) / 2).
    The Gaussian only sees sigma squared, so the magnitude of the raw value is
    clamped to [SIGMA_MIN, floor((sqrt(hw) - 1) / 2) / 3].
    """
    h, w = feature_hw
    H, W = image_hw
    s = math.sqrt((H * W) / (h * w))
    half = math.floor((math.sqrt(h * w) - 1) / 2)
    sigma_max = max(half / 3, SIGMA_MIN)
    if mean_gradient == 0 or half == 0:
        r = -math.inf if mean_gradient == 0 else float(LOG(abs(mean_gradient)))
        return SIGMA_MIN, r, s, float("nan"), True
    r = float(LOG(abs(mean_gradient)))
    raw = r * float(LOG(s)) * 3 / half
    return float(min(max(abs(raw), SIGMA_MIN), sigma_max)), r, s, raw, False


def compute_sigma(capture: GradientCapture, channel: int, image_shape,
                  center: tuple[int, int] | None = None, model_kind=ModelKind.TOY) -> GaussianMaskSpec:
    if not 0 <= channel < capture.channels:
        raise IndexError(f"channel {channel} outside [0, {capture.channels})")
    if isinstance(image_shape, ImageInput):
        image_shape = image_shape.shape
    if center is None:
        center = locate_center(capture, model_kind)
    mean_g = float(capture.gradient[channel].mean())
    sigma, r, s, raw, degenerate = sigma_from_gradient(
        mean_g, (capture.feature_h, capture.feature_w), tuple(image_shape[:2]))
    return GaussianMaskSpec(tuple(int(c) for c in center), sigma, capture.feature_h,
                            capture.feature_w, r, s, raw, degenerate)


def _gaussian(d2: np.ndarray, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    return np.exp(-d2 / (2 * sigma ** 2)) / (2 * np.pi * sigma ** 2)


def _squared_distance(center, h, w):
    rows = np.arange(h, dtype=np.float64) - center[0]
    cols = np.arange(w, dtype=np.float64) - center[1]
    return rows[:, None] ** 2 + cols[None, :] ** 2


def generate_gaussian_mask(spec: GaussianMaskSpec) -> np.ndarray:
    """``grid_h x grid_w`` Gaussian around ``spec.center``, scaled so the peak is 1."""
    g = _gaussian(_squared_distance(spec.center, spec.grid_h, spec.grid_w), spec.sigma)
    return g / g.max()


def _mask_stack(specs: list[GaussianMaskSpec]) -> np.ndarray:
    d2 = _squared_distance(specs[0].center, specs[0].grid_h, specs[0].grid_w)
    sig = np.array([s.sigma for s in specs])[:, None, None]
    g = _gaussian(d2[None], sig)
    return g / g.max(axis=(1, 2), keepdims=True)


def layer_map(capture: GradientCapture, weighting: ChannelWeighting,
              specs: dict[int, GaussianMaskSpec] | None) -> np.ndarray:
    """Feature-resolution map: ReLU(gated positive part - gated negative part).

    The negative part carries |alpha| so subtracting it lowers the map where
    score-reducing channels fire. ``specs=None`` means every mask is 1.
    """
    h, w = capture.feature_h, capture.feature_w
    parts = []
    for idx in (weighting.positive, weighting.negative):
        if len(idx) == 0:
            parts.append(np.zeros((h, w)))
            continue
        weighted = np.abs(weighting.alpha[idx])[:, None, None] * capture.activation[idx]
        if specs is not None:
            weighted = weighted * _mask_stack([specs[int(k)] for k in idx])
        parts.append(weighted.sum(axis=0))
    return np.maximum(parts[0] - parts[1], 0.0)


def upsample(grid: np.ndarray, shape) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(grid, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def normalize_map(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo > 0:
        return (values - lo) / (hi - lo)
    return (values > 0).astype(np.float64)


def combine_saliency(captures: list[GradientCapture], weightings: list[ChannelWeighting],
                     mask_specs: list[dict[int, GaussianMaskSpec] | None] | None,
                     output_shape, target: ExplanationTarget | None = None,
                     method_tag: str = "gcame", meta: dict | None = None) -> SaliencyMap:
    """Sum of per-layer gated maps at input resolution, min-max normalised.

    ``mask_specs=None`` (or a ``None`` entry) forces the Gaussian masks to 1,
    which reduces the result to the signed GradCAM map.
    """
    if mask_specs is None:
        mask_specs = [None] * len(captures)
    if not len(captures) == len(weightings) == len(mask_specs):
        raise ValueError("captures, weightings and mask specs must align per layer")
    total = np.zeros(tuple(output_shape), dtype=np.float64)
    used = 0
    for cap, wt, specs in zip(captures, weightings, mask_specs):
        if cap.skippable:
            continue
        if wt.alpha.shape != (cap.channels,):
            raise ValueError(f"weighting for {cap.layer_id} has {wt.alpha.shape[0]} channels, "
                             f"capture has {cap.channels}")
        total += upsample(layer_map(cap, wt, specs), output_shape)
        used += 1
    if used == 0:
        raise EmptyExplanationError("no target layer received gradient from the target score")
    meta = dict(meta or {})
    if not total.max() > 0:
        meta["zero_map"] = True
    return SaliencyMap(normalize_map(total), target, method_tag, meta)


def explain(detector: Detector, image: ImageInput, target: ExplanationTarget,
            session: CaptureSession | None = None, gaussian: bool = True,
            method_tag: str | None = None) -> SaliencyMap:
    """Saliency map for one detection; reuses ``session`` when given."""
    t0 = time.perf_counter()
    with _stage("forward_with_capture"):
        if session is None:
            _, session = forward_with_capture(detector, image)
    with _stage("compute_gradient_maps"):
        captures = compute_gradient_maps(session, target)
        if all(cap.skippable for cap in captures):
            s = float(target_score(session.rows, target))
            hint = f" (score saturated at {s}; no gradient flows back)" if s in (0.0, 1.0) else ""
            raise EmptyExplanationError("no target layer received gradient from the target score"
                                        + hint)
    weightings, all_specs = [], []
    layers_meta = []
    for cap in captures:
        with _stage("weight_feature_maps"):
            wt = weight_feature_maps(cap)
        weightings.append(wt)
        if cap.skippable:
            all_specs.append(None)
            layers_meta.append({"layer_id": cap.layer_id, "skipped": True})
            continue
        with _stage("locate_center"):
            center = locate_center(cap, detector.kind)
            unique = int(np.any(cap.gradient != 0, axis=0).sum()) == 1
        specs = None
        if gaussian:
            with _stage("compute_sigma"):
                specs = {int(k): compute_sigma(cap, int(k), image.shape, center)
                         for k in np.concatenate([wt.positive, wt.negative])}
        all_specs.append(specs)
        layers_meta.append({
            "layer_id": cap.layer_id, "skipped": False, "center": [int(center[0]), int(center[1])],
            "center_rule": "unique_pixel" if unique else "argmax",
            "sigmas": sorted({round(s.sigma, 6) for s in specs.values()}) if specs else [],
            "degenerate_channels": sum(s.degenerate for s in specs.values()) if specs else 0,
        })
    tag = method_tag or ("gcame" if gaussian else "gradcam")
    with _stage("combine_saliency"):
        smap = combine_saliency(captures, weightings, all_specs if gaussian else None, image.shape,
                                target, tag, {"layers": layers_meta})
    smap.meta["runtime_s"] = time.perf_counter() - t0
    return smap


def explain_detections(detector: Detector, image: ImageInput, detections=None,
                       gaussian: bool = True) -> list[SaliencyMap]:
    """Explain several detections of one image from a single forward pass."""
    dets, session = forward_with_capture(detector, image)
    if detections is None:
        detections = dets
    return [explain(detector, image, ExplanationTarget(d), session=session, gaussian=gaussian)
            for d in detections]
