"""Small anchor-free detector and synthetic circle/square scenes.

The bundled checkpoint was produced by :func:`train_toy_detector` with the
default :class:`ToySpec`; regenerate it with ``demos/train_toy_detector.py``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .detector import ConfigurationError, Detector, ImageInput, ModelKind

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
BUNDLED_CHECKPOINT = "toy_detector_v1.pt"
CLASS_NAMES = ("circle", "square")

# measured once on 200 held-out scenes (seed 1234) with the bundled checkpoint
BUNDLED_RECALL = 1.0


@dataclass(frozen=True)
class ToySpec:
    input_size: int = 128
    num_classes: int = 2
    stride: int = 2
    width: int = 32
    seed: int = 0


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, k=3, stride=1, dilation=1):
        pad = dilation * (k - 1) // 2
        super().__init__(nn.Conv2d(c_in, c_out, k, stride, pad, dilation=dilation), nn.ReLU())


class ToyBackbone(nn.Module):
    """Output stride 2 or 4; dilations scale so the receptive field stays ~70 px."""

    def __init__(self, width, stride=2):
        super().__init__()
        if stride not in (2, 4):
            raise ValueError(f"toy backbone supports stride 2 or 4, got {stride}")
        d = 4 // stride
        # 4x4 kernels keep each stride-2 cell's receptive field centred on the cell
        self.stem = ConvBlock(3, 16, k=4, stride=2)
        self.dark2 = ConvBlock(16, 24, k=4, stride=2) if stride == 4 else ConvBlock(16, 24)
        self.dark3 = ConvBlock(24, 32, dilation=d)
        self.dark4 = ConvBlock(32, width, dilation=2 * d)
        self.dark5 = ConvBlock(width, width, dilation=4 * d)

    def forward(self, x):
        for m in (self.stem, self.dark2, self.dark3, self.dark4, self.dark5):
            x = m(x)
        return x


class ToyHead(nn.Module):
    def __init__(self, width, num_classes):
        super().__init__()
        self.cls_conv = ConvBlock(width, width)
        self.cls_pred = nn.Conv2d(width, num_classes, 1)
        self.reg_conv = ConvBlock(width, width)
        self.reg_pred = nn.Conv2d(width, 4, 1)
        self.obj_pred = nn.Conv2d(width, 1, 1)

    def forward(self, feat):
        c = self.cls_conv(feat)
        r = self.reg_conv(feat)
        return self.cls_pred(c), self.reg_pred(r), self.obj_pred(r)


class ToyDetectorNet(nn.Module):
    """One-head dense detector: every feature cell predicts one box."""

    target_layer_ids = ("head.cls_conv",)

    def __init__(self, spec: ToySpec = ToySpec()):
        super().__init__()
        self.spec = spec
        self.target_strides = (spec.stride,)
        self.backbone = ToyBackbone(spec.width, spec.stride)
        self.head = ToyHead(spec.width, spec.num_classes)

    def logits(self, x):
        return self.head(self.backbone(x))

    def decode(self, cls, reg, obj):
        b, _, h, w = cls.shape
        s = self.spec.stride
        ys, xs = torch.meshgrid(torch.arange(h, dtype=cls.dtype), torch.arange(w, dtype=cls.dtype),
                                indexing="ij")
        cx = ((xs + 0.5) * s).reshape(1, -1)
        cy = ((ys + 0.5) * s).reshape(1, -1)
        ltrb = torch.exp(reg.clamp(max=6.0)).flatten(2) * s
        boxes = torch.stack([cx - ltrb[:, 0], cy - ltrb[:, 1], cx + ltrb[:, 2], cy + ltrb[:, 3]], -1)
        objectness = torch.sigmoid(obj).flatten(2).transpose(1, 2)
        scores = torch.sigmoid(cls).flatten(2).transpose(1, 2)
        return torch.cat([boxes, objectness, scores], dim=-1)

    def forward(self, x):
        return self.decode(*self.logits(x))


class ToyDetector(Detector):
    kind = ModelKind.TOY
    key = "toy"

    def __init__(self, model: ToyDetectorNet, **kwargs):
        super().__init__(model, model.spec.num_classes, **kwargs)
        self.spec = model.spec

    def raw_output(self, batch):
        return self.model(batch.to(next(self.model.parameters()).dtype))

    def randomizable_layers(self):
        return ["head.cls_pred", "head.cls_conv", "backbone.dark5", "backbone.dark4",
                "backbone.dark3", "backbone.dark2", "backbone.stem"]


def _init_weights(model: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    with torch.no_grad():
        # rare positives: start objectness and class logits low
        model.head.obj_pred.bias.fill_(-4.0)
        model.head.cls_pred.bias.fill_(-2.0)


def build_toy_detector(spec: ToySpec | dict | None = None, checkpoint: str | Path | None = "bundled",
                       **kwargs) -> ToyDetector:
    """Deterministic toy detector.

    ``checkpoint="bundled"`` loads the shipped weights, a path loads a saved
    checkpoint, ``None`` gives a random initialisation from ``spec.seed``.
    """
    if isinstance(spec, dict):
        spec = ToySpec(**spec)
    if checkpoint is None:
        spec = spec or ToySpec()
        model = ToyDetectorNet(spec)
        _init_weights(model, spec.seed)
        return ToyDetector(model, **kwargs)
    if checkpoint == "bundled":
        ref = resources.files("gcame") / "data" / BUNDLED_CHECKPOINT
        with resources.as_file(ref) as p:
            state = torch.load(p, map_location="cpu", weights_only=True)
    else:
        state = torch.load(Path(checkpoint), map_location="cpu", weights_only=True)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported toy checkpoint version {state.get('version')}")
    saved = ToySpec(**state["spec"])
    if spec is not None and spec != saved:
        raise ConfigurationError(f"requested spec {spec} does not match checkpoint spec {saved}")
    model = ToyDetectorNet(saved)
    model.load_state_dict(state["state_dict"])
    return ToyDetector(model, **kwargs)


def save_checkpoint(detector: ToyDetector, path, extra: dict | None = None):
    torch.save({"version": CHECKPOINT_VERSION, "spec": asdict(detector.spec),
                "state_dict": detector.model.state_dict(), **(extra or {})}, path)


# ---------------------------------------------------------------- scenes

@dataclass
class Scene:
    pixels: np.ndarray
    boxes: np.ndarray  # (n, 4) x1, y1, x2, y2 in pixels, x2/y2 exclusive
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def image(self) -> ImageInput:
        return ImageInput(self.pixels)


def _background(rng, size):
    base = rng.uniform(0.15, 0.85, size=3)
    gy, gx = np.mgrid[0:size, 0:size] / size
    tilt = rng.uniform(-0.1, 0.1, size=2)
    img = base[None, None, :] + (tilt[0] * gy + tilt[1] * gx)[..., None]
    img = img + rng.normal(0.0, 0.02, size=(size, size, 3))
    return img, base


def _object_color(rng, bg):
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if np.abs(c - bg).mean() > 0.3:
            return c


def draw_object(img, label, x, y, s, color):
    """Paint a circle (0) or square (1) of side ``s`` with top-left (x, y)."""
    if label == 1:
        img[y:y + s, x:x + s] = color
    else:
        yy, xx = np.mgrid[y:y + s, x:x + s]
        r = s / 2.0
        inside = (xx + 0.5 - (x + r)) ** 2 + (yy + 0.5 - (y + r)) ** 2 <= r * r
        patch = img[y:y + s, x:x + s]
        patch[inside] = color
    return (x, y, x + s, y + s)


def compose_scene(objects, size=128, rng=None, bg=None) -> Scene:
    """Scene from explicit ``(label, x, y, side)`` tuples."""
    rng = rng if rng is not None else np.random.default_rng(0)
    img, base = _background(rng, size)
    if bg is not None:
        img = img - base + np.asarray(bg)
        base = np.asarray(bg)
    boxes, labels = [], []
    for label, x, y, s in objects:
        boxes.append(draw_object(img, int(label), int(x), int(y), int(s), _object_color(rng, base)))
        labels.append(int(label))
    return Scene(np.clip(img, 0, 1).astype(np.float32),
                 np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                 np.asarray(labels, dtype=np.int64))


def _overlaps(box, others, gap):
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in others:
        if x1 < a2 + gap and a1 < x2 + gap and y1 < b2 + gap and b1 < y2 + gap:
            return True
    return False


def random_scene(rng, size=128, n_objects=(1, 4), tiny_prob=0.3, sizes=(10, 36),
                 tiny_sizes=(7, 9), gap=4, labels=None) -> Scene:
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    placed = []
    for _ in range(n):
        for _attempt in range(50):
            lo, hi = tiny_sizes if rng.random() < tiny_prob else sizes
            s = int(rng.integers(lo, hi + 1))
            x = int(rng.integers(1, size - s - 1))
            y = int(rng.integers(1, size - s - 1))
            if not _overlaps((x, y, x + s, y + s), [p[1:] for p in placed], gap):
                label = int(rng.integers(0, 2)) if labels is None else int(labels[len(placed)])
                placed.append((label, x, y, x + s, y + s))
                break
    objects = [(lab, x1, y1, x2 - x1) for lab, x1, y1, x2, _ in placed]
    return compose_scene(objects, size, rng)


def tiny_pair_scene(rng, size=128, distance=(14, 30), label=None, same_class=True) -> Scene:
    """Two tiny objects lying close together, of one class unless ``same_class`` is off."""
    label = int(rng.integers(0, 2)) if label is None else label
    label2 = label if same_class else int(rng.integers(0, 2))
    s1, s2 = (int(v) for v in rng.integers(7, 10, size=2))
    while True:
        x1, y1 = (int(v) for v in rng.integers(20, size - 40, size=2))
        d = rng.uniform(*distance)
        ang = rng.uniform(0, 2 * np.pi)
        x2, y2 = int(round(x1 + d * np.cos(ang))), int(round(y1 + d * np.sin(ang)))
        if 2 <= x2 <= size - s2 - 2 and 2 <= y2 <= size - s2 - 2 and \
                not _overlaps((x1, y1, x1 + s1, y1 + s1), [(x2, y2, x2 + s2, y2 + s2)], 4):
            break
    return compose_scene([(label, x1, y1, s1), (label2, x2, y2, s2)], size, rng)


# ---------------------------------------------------------------- training

# cells whose centre lies within this many pixels of an object's centre are positives
CENTER_RADIUS_PX = 2.0


def _targets(scenes, grid, stride, num_classes):
    b = len(scenes)
    centres = (np.arange(grid) + 0.5) * stride
    obj = torch.zeros(b, grid, grid)
    cls = torch.zeros(b, num_classes, grid, grid)
    reg = torch.zeros(b, 4, grid, grid)
    pos = torch.zeros(b, grid, grid, dtype=torch.bool)
    for i, sc in enumerate(scenes):
        for (x1, y1, x2, y2), lab in zip(sc.boxes, sc.labels):
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            own_i, own_j = min(int(cy // stride), grid - 1), min(int(cx // stride), grid - 1)
            rows = set(np.flatnonzero(np.abs(centres - cy) <= CENTER_RADIUS_PX)) | {own_i}
            cols = set(np.flatnonzero(np.abs(centres - cx) <= CENTER_RADIUS_PX)) | {own_j}
            for gi in rows:
                for gj in cols:
                    ccx, ccy = centres[gj], centres[gi]
                    ltrb = np.array([ccx - x1, ccy - y1, x2 - ccx, y2 - ccy]) / stride
                    obj[i, gi, gj] = 1
                    cls[i, :, gi, gj] = 0
                    cls[i, lab, gi, gj] = 1
                    reg[i, :, gi, gj] = torch.from_numpy(np.log(np.maximum(ltrb, 1e-3)))
                    pos[i, gi, gj] = True
    return obj, cls, reg, pos


# Smoothed class targets keep the logits within a few units of zero. With hard
# 0/1 targets they grow past ~17, where float32 sigmoid rounds to exactly 1
# and the class score has no gradient left to explain.
CLASS_SMOOTHING = 0.05


def toy_loss(model: ToyDetectorNet, batch, scenes):
    cls, reg, obj = model.logits(batch)
    grid = cls.shape[-1]
    t_obj, t_cls, t_reg, pos = _targets(scenes, grid, model.spec.stride, model.spec.num_classes)
    n_pos = max(int(pos.sum()), 1)
    l_obj = F.binary_cross_entropy_with_logits(obj[:, 0], t_obj, reduction="sum") / n_pos
    pos_c = pos[:, None].expand_as(cls)
    t_cls = t_cls * (1 - 2 * CLASS_SMOOTHING) + CLASS_SMOOTHING
    l_cls = F.binary_cross_entropy_with_logits(cls[pos_c], t_cls[pos_c], reduction="sum") / n_pos
    pos_r = pos[:, None].expand_as(reg)
    l_reg = F.l1_loss(reg[pos_r], t_reg[pos_r], reduction="sum") / n_pos
    return l_obj + l_cls + 2.0 * l_reg


def scenes_to_batch(scenes) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.pixels.transpose(2, 0, 1) for s in scenes]))


def train_toy_detector(spec: ToySpec = ToySpec(), steps=1500, batch_size=24, lr=2e-3,
                       data_seed=7, log_every=100, tiny_pair_fraction=0.25) -> ToyDetector:
    torch.manual_seed(spec.seed)
    model = ToyDetectorNet(spec)
    _init_weights(model, spec.seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.1)
    rng = np.random.default_rng(data_seed)
    model.train()
    for step in range(steps):
        n_pairs = int(round(tiny_pair_fraction * batch_size))
        scenes = [random_scene(rng, spec.input_size) for _ in range(batch_size - n_pairs)]
        # independent labels, so a neighbour says nothing about an object's class
        scenes += [tiny_pair_scene(rng, spec.input_size, same_class=False)
                   for _ in range(n_pairs)]
        loss = toy_loss(model, scenes_to_batch(scenes), scenes)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss.item())
    model.eval()
    return ToyDetector(model)


def detection_recall(detector: Detector, scenes, iou_threshold=0.5) -> float:
    """Fraction of ground-truth objects matched by a same-class detection."""
    from .metrics import pairwise_iou
    hit = total = 0
    for sc in scenes:
        dets = detector.detect(sc.image)
        used = set()
        for box, lab in zip(sc.boxes, sc.labels):
            total += 1
            best, best_i = 0.0, None
            for i, d in enumerate(dets):
                if i in used or d.class_index != lab:
                    continue
                iou = pairwise_iou(box, d.box)
                if iou > best:
                    best, best_i = iou, i
            if best >= iou_threshold:
                used.add(best_i)
                hit += 1
    return hit / max(total, 1)


def evaluation_scenes(n=200, seed=1234, size=128):
    rng = np.random.default_rng(seed)
    return [random_scene(rng, size) for _ in range(n)]
