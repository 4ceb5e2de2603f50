"""Adapters for multi-branch one-stage (YOLOX layout) and two-stage FPN detectors."""
from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .detector import ConfigurationError, Detector, ModelKind
from .toy import ConvBlock


class MiniYolox(nn.Module):
    """Randomly initialised network with the YOLOX head layout.

    Three decoupled head branches at strides 8, 16 and 32; each has
    ``stems[i]``, ``cls_convs[i]`` / ``reg_convs[i]`` (two 3x3 blocks), and 1x1
    ``cls_preds`` / ``reg_preds`` / ``obj_preds``. Output rows are
    ``(cx, cy, w, h, obj, p_1..p_C)`` like YOLOX inference output.
    """

    def __init__(self, num_classes=2, width=16, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.backbone = nn.ModuleList([
            nn.Sequential(ConvBlock(3, width, stride=2), ConvBlock(width, width, stride=2),
                          ConvBlock(width, width, stride=2)),
            ConvBlock(width, width, stride=2),
            ConvBlock(width, width, stride=2),
        ])
        self.head = MiniYoloxHead(num_classes, width)

    def forward(self, x):
        feats = []
        for stage in self.backbone:
            x = stage(x)
            feats.append(x)
        return self.head(feats)


class MiniYoloxHead(nn.Module):
    def __init__(self, num_classes, width, strides=(8, 16, 32)):
        super().__init__()
        self.strides = tuple(strides)
        n = len(strides)
        self.stems = nn.ModuleList([ConvBlock(width, width, k=1) for _ in range(n)])
        self.cls_convs = nn.ModuleList([nn.Sequential(ConvBlock(width, width), ConvBlock(width, width))
                                        for _ in range(n)])
        self.reg_convs = nn.ModuleList([nn.Sequential(ConvBlock(width, width), ConvBlock(width, width))
                                        for _ in range(n)])
        self.cls_preds = nn.ModuleList([nn.Conv2d(width, num_classes, 1) for _ in range(n)])
        self.reg_preds = nn.ModuleList([nn.Conv2d(width, 4, 1) for _ in range(n)])
        self.obj_preds = nn.ModuleList([nn.Conv2d(width, 1, 1) for _ in range(n)])

    def forward(self, feats):
        outs = []
        for i, (x, s) in enumerate(zip(feats, self.strides)):
            x = self.stems[i](x)
            c = self.cls_convs[i](x)
            r = self.reg_convs[i](x)
            reg, obj, cls = self.reg_preds[i](r), self.obj_preds[i](r), self.cls_preds[i](c)
            b, _, h, w = cls.shape
            ys, xs = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype),
                                    indexing="ij")
            grid = torch.stack([xs, ys], 0).reshape(1, 2, -1)
            reg = reg.flatten(2)
            xy = (reg[:, :2] + grid) * s
            wh = torch.exp(reg[:, 2:].clamp(max=6)) * s
            outs.append(torch.cat([xy, wh, torch.sigmoid(obj).flatten(2),
                                   torch.sigmoid(cls).flatten(2)], 1))
        return torch.cat(outs, 2).transpose(1, 2)


def cxcywh_to_xyxy(rows: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = rows[..., 0], rows[..., 1], rows[..., 2], rows[..., 3]
    boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)
    return torch.cat([boxes, rows[..., 4:]], -1)


class YoloxDetector(Detector):
    """Any module with a YOLOX-style ``head`` returning ``cxcywh`` rows."""

    kind = ModelKind.ONE_STAGE
    key = "yolox"

    def __init__(self, model: nn.Module, num_classes: int | None = None, branch: str = "cls", **kw):
        if num_classes is None:
            num_classes = model.head.cls_preds[0].out_channels
        super().__init__(model, num_classes, **kw)
        self.branch = branch

    @classmethod
    def from_path(cls, weights_path=None, **kw):
        """Load a pickled YOLOX module; without a path build :class:`MiniYolox`."""
        if weights_path is None:
            return cls(MiniYolox(seed=kw.pop("seed", 0)), **kw)
        obj = torch.load(Path(weights_path), map_location="cpu", weights_only=False)
        model = obj.get("model") if isinstance(obj, dict) else obj
        if not isinstance(model, nn.Module):
            raise ConfigurationError("yolox weights must be a pickled nn.Module "
                                     "(or a dict with a 'model' module)")
        return cls(model, **kw)

    def raw_output(self, batch):
        return cxcywh_to_xyxy(self.model(batch))

    def target_layers(self):
        from .detector import select_target_layers
        return select_target_layers(self.model, self.kind, branch=self.branch)

    def randomizable_layers(self):
        n = len(self.model.head.cls_convs)
        top = [f"head.cls_preds.{i}" for i in range(n)]
        mid = [f"head.cls_convs.{i}.{j}" for j in (1, 0) for i in range(n)]
        stems = [f"head.stems.{i}" for i in range(n)]
        back = [name for name, m in self.model.named_modules()
                if name.startswith("backbone") and isinstance(m, ConvBlock)]
        return top + mid + stems + back[::-1]


class FasterRCNNDetector(Detector):
    """torchvision Faster R-CNN with FPN.

    Rows come after the model's own post-processing, so ``box_index`` is the
    position in its detection list. The model reports only the winning class
    probability per box; other class entries are zero and objectness equals
    that probability.
    """

    kind = ModelKind.TWO_STAGE
    key = "fasterrcnn"

    def __init__(self, model: nn.Module, num_classes: int = 91, **kw):
        kw.setdefault("score_threshold", 0.05)
        super().__init__(model, num_classes, **kw)

    @classmethod
    def from_path(cls, weights_path=None, num_classes=91, min_size=128, max_size=1333,
                  box_score_thresh=0.05, **kw):
        from torchvision.models.detection import fasterrcnn_resnet50_fpn
        model = fasterrcnn_resnet50_fpn(weights=None, weights_backbone=None, num_classes=num_classes,
                                        min_size=min_size, max_size=max_size,
                                        box_score_thresh=box_score_thresh)
        if weights_path is not None:
            model.load_state_dict(torch.load(Path(weights_path), map_location="cpu",
                                             weights_only=True))
        return cls(model, num_classes, **kw)

    def raw_output(self, batch):
        outs = self.model(list(batch))
        n = max((len(o["scores"]) for o in outs), default=0)
        rows = batch.new_zeros(len(outs), n, 5 + self.num_classes)
        for b, o in enumerate(outs):
            k = len(o["scores"])
            if k == 0:
                continue
            onehot = nn.functional.one_hot(o["labels"], self.num_classes).to(batch.dtype)
            r = torch.cat([o["boxes"], o["scores"][:, None], onehot * o["scores"][:, None]], 1)
            rows = torch.cat([rows[:b], torch.cat([r, rows.new_zeros(n - k, r.shape[1])])[None],
                              rows[b + 1:]], 0)
        return rows

    def postprocess(self, rows, threshold=None):
        from .detector import parse_detections
        thr = self.score_threshold if threshold is None else threshold
        return parse_detections(rows, thr, self.num_classes)

    def randomizable_layers(self):
        fpn = [f"backbone.fpn.layer_blocks.{i}" for i in (3, 2, 1, 0)]
        body = [f"backbone.body.layer{i}" for i in (4, 3, 2, 1)]
        return ["roi_heads.box_predictor.cls_score", "roi_heads.box_head.fc7",
                "roi_heads.box_head.fc6"] + fpn + body + ["backbone.body.conv1"]
