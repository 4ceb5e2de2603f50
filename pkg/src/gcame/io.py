"""COCO ingestion, saliency persistence and overlay rendering."""
from __future__ import annotations

import io as _io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageFont

from .core import SaliencyMap
from .detector import Detection, ExplanationTarget, ImageInput
from .metrics import GroundTruthBox, to_uint8

log = logging.getLogger(__name__)

COLORMAP = "jet"
OVERLAY_ALPHA = 0.5
BOX_COLOR = (255, 255, 255)
SALIENCY_DTYPE = "<f4"
SIDECAR_VERSION = "v1"


# ---------------------------------------------------------------- COCO

@dataclass
class ImageRecord:
    image_id: int
    file_name: str
    height: int
    width: int


@dataclass
class DatasetIndex:
    images: list[ImageRecord]
    annotations: dict[int, list[GroundTruthBox]]
    categories: dict[int, str]
    category_to_class: dict[int, int] = field(default_factory=dict)
    root: Path | None = None
    skipped: int = 0

    @property
    def num_annotations(self) -> int:
        return sum(len(v) for v in self.annotations.values())

    @property
    def class_names(self) -> list[str]:
        inv = {v: k for k, v in self.category_to_class.items()}
        return [self.categories[inv[i]] for i in range(len(inv))]

    def image_path(self, record: ImageRecord) -> Path:
        path = (self.root or Path(".")) / record.file_name
        if not path.exists():
            raise FileNotFoundError(f"image {path} not found (images root {self.root})")
        return path

    def load_image(self, record: ImageRecord) -> ImageInput:
        return read_image(self.image_path(record))


def load_coco(annotation_path, images_root=None) -> DatasetIndex:
    """Index a COCO-format annotation file; boxes become ``(x1, y1, x2, y2)``.

    Malformed annotations are skipped with a warning and counted in
    ``DatasetIndex.skipped``.
    """
    path = Path(annotation_path)
    with open(path) as fh:
        data = json.load(fh)
    categories = {int(c["id"]): str(c.get("name", c["id"])) for c in data.get("categories", [])}
    cat_to_class = {cid: i for i, cid in enumerate(sorted(categories))}
    images = []
    for im in data.get("images", []):
        images.append(ImageRecord(int(im["id"]), str(im["file_name"]),
                                  int(im["height"]), int(im["width"])))
    by_id = {im.image_id: im for im in images}
    annotations: dict[int, list[GroundTruthBox]] = {im.image_id: [] for im in images}
    skipped = 0
    for ann in data.get("annotations", []):
        reason = None
        try:
            image_id = int(ann["image_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
            cat = int(ann["category_id"])
        except (KeyError, TypeError, ValueError):
            image_id, reason = None, "missing or malformed fields"
        if reason is None:
            if image_id not in by_id:
                reason = f"unknown image_id {image_id}"
            elif w <= 0 or h <= 0:
                reason = f"non-positive box size {w}x{h}"
            elif cat not in cat_to_class:
                reason = f"unknown category {cat}"
            else:
                gt = GroundTruthBox((x, y, x + w, y + h), cat_to_class[cat], image_id)
                rec = by_id[image_id]
                if not gt.within(rec.height, rec.width):
                    reason = f"box {gt.box} outside {rec.width}x{rec.height} image"
        if reason is not None:
            log.warning("skipping annotation %s: %s", ann.get("id"), reason)
            skipped += 1
            continue
        annotations[image_id].append(gt)
    root = Path(images_root) if images_root is not None else path.parent
    return DatasetIndex(images, annotations, categories, cat_to_class, root, skipped)


def export_coco(scenes, out_dir, class_names=("circle", "square"), prefix="scene") -> Path:
    """Write scenes as PNG files plus ``annotations.json``; returns the JSON path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, sc in enumerate(scenes):
        name = f"images/{prefix}_{i:04d}.png"
        write_image(sc.pixels, out / name)
        h, w = sc.pixels.shape[:2]
        images.append({"id": i + 1, "file_name": name, "height": h, "width": w})
        for (x1, y1, x2, y2), lab in zip(sc.boxes, sc.labels):
            annotations.append({"id": ann_id, "image_id": i + 1, "category_id": int(lab) + 1,
                                "bbox": [float(x1), float(y1), float(x2 - x1), float(y2 - y1)],
                                "area": float((x2 - x1) * (y2 - y1)), "iscrowd": 0})
            ann_id += 1
    cats = [{"id": i + 1, "name": n} for i, n in enumerate(class_names)]
    path = out / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": cats},
                               indent=1))
    return path


def read_image(path) -> ImageInput:
    with Image.open(path) as im:
        px = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return ImageInput(px, str(path))


def write_image(pixels, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")


# ---------------------------------------------------------------- saliency files

def _sidecar(smap: SaliencyMap) -> dict:
    meta = {k: v for k, v in smap.meta.items() if k != "runtime_s"}
    layers = meta.get("layers", [])
    doc = {
        "version": SIDECAR_VERSION,
        "shape": list(smap.values.shape),
        "dtype": "float32",
        "byte_order": "little",
        "order": "row-major",
        "method_tag": smap.method_tag,
        "target": None,
        "layer_ids": [l["layer_id"] if isinstance(l, dict) else l for l in layers],
        "sigmas": [l.get("sigmas", []) for l in layers if isinstance(l, dict)],
        "meta": meta,
    }
    if smap.target is not None:
        doc["target"] = {"detection": smap.target.detection.to_dict(),
                         "target_class": int(smap.target.target_class),
                         "score_kind": smap.target.score_kind.value}
    return doc


def write_saliency(smap: SaliencyMap, path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (float32, row-major) and ``<path>.json``."""
    stem = Path(path)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(np.ascontiguousarray(smap.values, dtype=SALIENCY_DTYPE).tobytes())
    json_path.write_text(json.dumps(_sidecar(smap), indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def read_saliency(path) -> SaliencyMap:
    stem = Path(path)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    doc = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    values = np.frombuffer(raw, dtype=SALIENCY_DTYPE).reshape(doc["shape"]).astype(np.float32)
    target = None
    if doc.get("target"):
        t = doc["target"]
        d = t["detection"]
        det = Detection(tuple(d["box"]), d["objectness"], np.asarray(d["class_scores"]),
                        d["class_index"], d["box_index"])
        target = ExplanationTarget(det, t["score_kind"], t["target_class"])
    return SaliencyMap(values, target, doc["method_tag"], doc.get("meta", {}))


# ---------------------------------------------------------------- rendering

def colorize(values) -> np.ndarray:
    """``H x W x 3`` uint8 colors from the fixed colormap; 1.0 maps to its top color."""
    lut = (colormaps[COLORMAP](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)
    idx = np.round(np.clip(np.asarray(values, dtype=np.float64), 0, 1) * 255).astype(np.intp)
    return lut[idx]


def _label_text(det: Detection, class_names=None) -> str:
    name = class_names[det.class_index] if class_names else f"class {det.class_index}"
    return f"{name} {det.score:.2f}"


def draw_detection(img: Image.Image, detection: Detection | None, class_names=None) -> Image.Image:
    if detection is None:
        return img
    draw = ImageDraw.Draw(img)
    draw.fontmode = "1"  # no antialiasing: label pixels are exactly the box color
    x1, y1, x2, y2 = detection.box
    draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=BOX_COLOR, width=1)
    font = ImageFont.load_default()
    draw.text((x1 + 1, max(y1 - 11, 0)), _label_text(detection, class_names), fill=BOX_COLOR,
              font=font)
    return img


def blend(pixels, values) -> np.ndarray:
    """Per-pixel alpha of ``0.5 * saliency`` over the image, as uint8."""
    base = to_uint8(pixels).astype(np.float64)
    v = np.clip(np.asarray(values, dtype=np.float64), 0, 1)
    alpha = OVERLAY_ALPHA * v[..., None]
    out = (1 - alpha) * base + alpha * colorize(v).astype(np.float64)
    return np.round(out).astype(np.uint8)


def render_overlay(image: ImageInput, smap: SaliencyMap, detection: Detection | None = None,
                   class_names=None) -> bytes:
    """PNG bytes of the colorized saliency blended over the image, box outlined."""
    values = getattr(smap, "values", smap)
    if tuple(np.shape(values)) != tuple(image.shape):
        raise ValueError(f"saliency shape {np.shape(values)} does not match image {image.shape}")
    img = Image.fromarray(blend(image.pixels, values))
    img = draw_detection(img, detection, class_names)
    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def contact_sheet(panels: list[tuple[str, bytes]], columns: int = 4) -> bytes:
    """Grid of PNG panels with captions, as PNG bytes."""
    if not panels:
        raise ValueError("no panels to lay out")
    imgs = [Image.open(_io.BytesIO(b)).convert("RGB") for _, b in panels]
    w = max(i.width for i in imgs)
    h = max(i.height for i in imgs)
    cap = 14
    cols = min(columns, len(imgs))
    rows = (len(imgs) + cols - 1) // cols
    sheet = Image.new("RGB", (cols * w, rows * (h + cap)), (0, 0, 0))
    draw = ImageDraw.Draw(sheet)
    font = ImageFont.load_default()
    for n, ((caption, _), im) in enumerate(zip(panels, imgs)):
        r, c = divmod(n, cols)
        sheet.paste(im, (c * w, r * (h + cap) + cap))
        draw.text((c * w + 2, r * (h + cap) + 1), caption[:40], fill=(255, 255, 255), font=font)
    buf = _io.BytesIO()
    sheet.save(buf, format="PNG")
    return buf.getvalue()
