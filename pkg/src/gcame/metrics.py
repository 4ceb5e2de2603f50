"""Localization and faithfulness metrics for saliency maps.

Boxes are ``(x1, y1, x2, y2)`` in pixel coordinates where pixel ``(r, c)``
covers ``[c, c + 1) x [r, r + 1)``; a pixel is inside a box when its center
is, so integer boxes select ``values[y1:y2, x1:x2]``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageFilter

log = logging.getLogger(__name__)

REPORT_SCHEMA = "v1"
TINY_AREA_RATIO = 0.005
WEBP_QUALITY = 50
WEBP_METHOD = 4

# published full-scale results (YOLOX-l, MS-COCO 2017 val, GPU); documentation only
REFERENCE_RESULTS = {
    "gcame": {"pg": 0.98, "pg_tiny": 0.158, "ebpg": 0.671, "ebpg_tiny": 0.261,
              "confidence_drop": 36.8, "information_drop": 29.15, "runtime_s": 0.435},
    "drise": {"pg": 0.86, "pg_tiny": 0.127, "ebpg": 0.184, "ebpg_tiny": 0.009,
              "confidence_drop": 42.3, "information_drop": 31.58, "runtime_s": 252.0},
}


@dataclass
class GroundTruthBox:
    box: tuple[float, float, float, float]
    class_index: int
    image_id: int | str = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate ground-truth box {self.box}")

    def within(self, height, width) -> bool:
        x1, y1, x2, y2 = self.box
        return x1 >= 0 and y1 >= 0 and x2 <= width and y2 <= height


@dataclass
class PerturbationSpec:
    keep_fraction: float = 0.20
    fill_value: np.ndarray | None = None  # per-channel mean of the image when None

    def __post_init__(self):
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must lie in (0, 1]")


def _box_of(obj):
    return tuple(float(v) for v in getattr(obj, "box", obj))


def _values_of(smap):
    return np.asarray(getattr(smap, "values", smap), dtype=np.float64)


def pairwise_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _box_of(a)
    bx1, by1, bx2, by2 = _box_of(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def box_mask(shape, box) -> np.ndarray:
    x1, y1, x2, y2 = _box_of(box)
    h, w = shape
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    return ((rows >= y1) & (rows < y2))[:, None] & ((cols >= x1) & (cols < x2))[None, :]


def pointing_game(smap, gt) -> bool:
    """Hit when any pixel attaining the global maximum lies inside the box."""
    v = _values_of(smap)
    if not v.max() > 0:
        log.warning("pointing game on an all-zero saliency map counted as a miss")
        return False
    return bool(np.any((v == v.max()) & box_mask(v.shape, gt)))


def pointing_game_score(hits) -> float:
    hits = list(hits)
    if not hits:
        raise ValueError("pointing game needs at least one record")
    return sum(bool(h) for h in hits) / len(hits)


def energy_based_pg(smap, gt) -> float:
    """Share of total saliency inside the box; 0 for an all-zero map."""
    v = _values_of(smap)
    if v.min() < 0:
        raise ValueError("energy-based pointing game needs a non-negative map")
    total = v.sum()
    if total == 0:
        log.warning("energy-based pointing game on an all-zero map")
        return 0.0
    return float(v[box_mask(v.shape, gt)].sum() / total)


def top_fraction_mask(values, fraction: float) -> np.ndarray:
    """Boolean mask of the ``fraction`` most salient pixels.

    Exactly ``round(fraction * N)`` pixels; ties at the threshold go to the
    earlier pixel in row-major order.
    """
    v = _values_of(values)
    k = int(round(fraction * v.size))
    order = np.argsort(-v.ravel(), kind="stable")
    mask = np.zeros(v.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(v.shape)


def perturb_image(pixels: np.ndarray, mask: np.ndarray, fill_value=None) -> np.ndarray:
    """Replace the masked (salient) pixels with the fill value, per channel mean by default."""
    px = np.asarray(pixels, dtype=np.float64)
    mu = px.reshape(-1, 3).mean(axis=0) if fill_value is None else np.asarray(fill_value, float)
    m = mask.astype(np.float64)[..., None]
    return (px * (1 - m) + mu * m).astype(np.float32)


def average_drop(p_original: float, p_perturbed: float) -> float:
    return max(p_original - p_perturbed, 0.0) / p_original * 100.0


def matched_confidence(detections, target_box, class_index: int):
    """``max_j IoU(target, L_j) * p_c(L_j)`` and the maximising box (or None)."""
    best, best_box = 0.0, None
    for d in detections:
        val = pairwise_iou(target_box, d.box) * float(d.class_scores[class_index])
        if val > best:
            best, best_box = val, d.box
    return best, best_box


@dataclass
class DropResult:
    value: float
    p_original: float = float("nan")
    p_perturbed: float = float("nan")
    matched_box: tuple | None = None
    flags: list[str] = field(default_factory=list)

    def __float__(self):
        return float(self.value)


def confidence_drop(detector, image, smap, target, spec: PerturbationSpec | None = None,
                    threshold: float | None = None) -> DropResult:
    """Relative drop of the IoU-weighted class score after removing the salient pixels."""
    from .detector import ImageInput

    spec = spec or PerturbationSpec()
    det = getattr(target, "detection", target)
    c = getattr(target, "target_class", None)
    c = det.class_index if c is None else c
    flags = []
    v = _values_of(smap)
    if v.max() == v.min():
        flags.append("degenerate_map")
    mask = top_fraction_mask(v, spec.keep_fraction)
    perturbed = ImageInput(perturb_image(image.pixels, mask, spec.fill_value))
    p_orig = float(det.class_scores[c])
    dets = detector.detect(perturbed, threshold)
    p_pert, matched = matched_confidence(dets, det.box, c)
    if not dets:
        flags.append("no_detection")
        return DropResult(100.0, p_orig, 0.0, None, flags)
    return DropResult(average_drop(p_orig, p_pert), p_orig, p_pert, matched, flags)


def information_keep_mask(values, fraction: float) -> np.ndarray:
    """Pixels at or above the top-``fraction`` threshold value, excluding zero saliency."""
    v = _values_of(values)
    k = max(int(round(fraction * v.size)), 1)
    thresh = np.partition(v.ravel(), v.size - k)[v.size - k]
    return (v >= thresh) & (v > 0)


def to_uint8(pixels) -> np.ndarray:
    return np.round(np.clip(np.asarray(pixels, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def bokeh_image(pixels, keep: np.ndarray, radius: float | None = None) -> np.ndarray:
    img = to_uint8(pixels)
    h, w = img.shape[:2]
    radius = 0.05 * min(h, w) if radius is None else radius
    blurred = np.asarray(Image.fromarray(img).filter(ImageFilter.GaussianBlur(radius)))
    return np.where(keep[..., None], img, blurred)


def webp_size(img_u8: np.ndarray, quality: int = WEBP_QUALITY) -> int:
    buf = io.BytesIO()
    Image.fromarray(img_u8).save(buf, format="WEBP", quality=quality, method=WEBP_METHOD, exact=False)
    return len(buf.getvalue())


def compression_drop(size_bokeh: int, size_original: int) -> float:
    return (1.0 - size_bokeh / size_original) * 100.0


@dataclass
class InformationDropResult:
    value: float
    size_original: int | None = None
    size_bokeh: int | None = None
    available: bool = True
    error: str | None = None

    def __float__(self):
        return float(self.value)


def information_drop(image, smap, keep_fraction: float = 0.20,
                     quality: int = WEBP_QUALITY) -> InformationDropResult:
    """Compressed-size reduction of the background-blurred image, in percent."""
    pixels = getattr(image, "pixels", image)
    keep = information_keep_mask(smap, keep_fraction)
    try:
        original = to_uint8(pixels)
        size_o = webp_size(original, quality)
        size_b = webp_size(bokeh_image(pixels, keep), quality)
    except (OSError, ValueError, KeyError) as exc:
        return InformationDropResult(float("nan"), available=False, error=str(exc))
    return InformationDropResult(compression_drop(size_b, size_o), size_o, size_b)


def is_tiny(detection, image_shape) -> bool:
    """Box area at most 0.5 % of the image area."""
    if hasattr(image_shape, "shape") and not isinstance(image_shape, tuple):
        image_shape = image_shape.shape
    h, w = image_shape[:2]
    x1, y1, x2, y2 = _box_of(detection)
    return (x2 - x1) * (y2 - y1) / (h * w) <= TINY_AREA_RATIO


@dataclass
class EvalRecord:
    image_id: int | str
    target_box: tuple
    matched_box: tuple | None
    pg_hit: bool | None
    ebpg: float | None
    confidence_drop: float | None = None
    information_drop: float | None = None
    tiny: bool = False
    method_tag: str = "gcame"
    runtime_s: float | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.ebpg is not None and not 0 <= self.ebpg <= 1:
            raise ValueError(f"ebpg {self.ebpg} outside [0, 1]")
        for name in ("confidence_drop", "information_drop"):
            val = getattr(self, name)
            if val is not None and not math.isfinite(val):
                raise ValueError(f"{name} must be finite")


_FIELDS = ("pg", "ebpg", "confidence_drop", "information_drop", "runtime_s")


def _means(records):
    cols = {"pg": [r.pg_hit for r in records], "ebpg": [r.ebpg for r in records],
            "confidence_drop": [r.confidence_drop for r in records],
            "information_drop": [r.information_drop for r in records],
            "runtime_s": [r.runtime_s for r in records]}
    out = {"n": len(records)}
    for name in _FIELDS:
        vals = [float(v) for v in cols[name] if v is not None]
        out[name] = sum(vals) / len(vals) if vals else None
    return out


@dataclass
class MetricReport:
    methods: dict
    records: list[EvalRecord]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, "methods": self.methods, "meta": self.meta,
                "reference": REFERENCE_RESULTS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        return records_to_csv(self.records)


def aggregate_report(records: list[EvalRecord], tiny_only: bool = False) -> MetricReport:
    """Overall and tiny-object means per method.

    Means are taken per explained object (not per image).
    """
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    methods = {}
    for tag in sorted({r.method_tag for r in records}):
        rs = [r for r in records if r.method_tag == tag]
        tiny = [r for r in rs if r.tiny]
        methods[tag] = {"overall": None if tiny_only else _means(rs),
                        "tiny": _means(tiny) if tiny else {"n": 0, **{k: None for k in _FIELDS}}}
    return MetricReport(methods, list(records),
                        {"averaging": "per_object", "tiny_area_ratio": TINY_AREA_RATIO,
                         "tiny_only": tiny_only})


CSV_COLUMNS = ["image_id", "method_tag", "target_box", "matched_box", "pg_hit", "ebpg",
               "confidence_drop", "information_drop", "tiny", "runtime_s", "flags"]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        row = asdict(r)
        row["target_box"] = " ".join(f"{v:g}" for v in r.target_box)
        row["matched_box"] = "" if r.matched_box is None else " ".join(f"{v:g}" for v in r.matched_box)
        row["flags"] = ";".join(r.flags)
        writer.writerow({k: row[k] for k in CSV_COLUMNS})
    return buf.getvalue()
