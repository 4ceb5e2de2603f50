"""Command line: ``gcame {explain,evaluate,sanity,compare}``.

Options resolve as explicit flags > ``GCAME_<OPTION>`` environment variables
> ``--config`` JSON file > built-in defaults. Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("gcame")

ENV_PREFIX = "GCAME_"
METHODS = ("gcame", "gradcam", "drise")
METRICS = ("pg", "ebpg", "confidence_drop", "information_drop")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _csv(s):
    return [p.strip() for p in str(s).split(",") if p.strip()]


def _bool(s):
    if isinstance(s, bool):
        return s
    return str(s).lower() in ("1", "true", "yes", "on")


# dest -> (type, default); shared by flags, environment and config file
OPTIONS = {
    "model": (str, "toy"),
    "weights": (str, None),
    "method": (str, "gcame"),
    "methods": (_csv, ["gcame", "drise"]),
    "output_dir": (str, "out"),
    "seed": (int, 0),
    "threshold": (float, None),
    "num_masks": (int, 4000),
    "grid_size": (int, 16),
    "batch_size": (int, 100),
    "image": (str, None),
    "box": (int, 0),
    "all_boxes": (_bool, False),
    "annotations": (str, None),
    "images_dir": (str, None),
    "metrics": (_csv, ["pg", "ebpg"]),
    "tiny_only": (_bool, False),
    "limit": (int, None),
    "workers": (int, 1),
    "layers": (_csv, None),
    "modes": (_csv, ["cascading", "independent"]),
    "std": (float, 0.05),
    "keep_fraction": (float, 0.2),
}


@dataclass
class RunConfig:
    command: str
    model: str = "toy"
    weights: str | None = None
    method: str = "gcame"
    methods: list = field(default_factory=lambda: ["gcame", "drise"])
    output_dir: str = "out"
    seed: int = 0
    threshold: float | None = None
    num_masks: int = 4000
    grid_size: int = 16
    batch_size: int = 100
    image: str | None = None
    box: int = 0
    all_boxes: bool = False
    annotations: str | None = None
    images_dir: str | None = None
    metrics: list = field(default_factory=lambda: ["pg", "ebpg"])
    tiny_only: bool = False
    limit: int | None = None
    workers: int = 1
    layers: list | None = None
    modes: list = field(default_factory=lambda: ["cascading", "independent"])
    std: float = 0.05
    keep_fraction: float = 0.2

    def validate(self):
        for m in [self.method, *self.methods]:
            if m not in METHODS:
                raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.command == "evaluate":
            if not self.metrics:
                raise UsageError("evaluate needs at least one metric (--metrics)")
            bad = [m for m in self.metrics if m not in METRICS]
            if bad:
                raise UsageError(f"unknown metrics {bad}; choose from {', '.join(METRICS)}")
            if not self.annotations:
                raise UsageError("evaluate needs --annotations")
        if self.command in ("explain", "sanity", "compare") and not self.image:
            raise UsageError(f"{self.command} needs --image")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")


def _add(p, *flags, dest, help=None, action=None):
    typ, _ = OPTIONS[dest]
    if action:
        p.add_argument(*flags, dest=dest, action=action, default=argparse.SUPPRESS, help=help)
    else:
        p.add_argument(*flags, dest=dest, type=typ, default=argparse.SUPPRESS, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcame", description="Explain object detector predictions.")
    parser.add_argument("--config", default=None, help="JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        _add(p, "--model", dest="model", help="toy | yolox | fasterrcnn")
        _add(p, "--weights", dest="weights", help="weights file for the detector")
        _add(p, "--output-dir", dest="output_dir")
        _add(p, "--seed", dest="seed")
        _add(p, "--threshold", dest="threshold", help="objectness threshold for detections")
        _add(p, "--num-masks", dest="num_masks", help="D-RISE mask count")
        _add(p, "--grid-size", dest="grid_size", help="D-RISE grid cells per side")
        _add(p, "--batch-size", dest="batch_size")
        _add(p, "--layers", dest="layers", help="comma-separated layer ids")

    p = sub.add_parser("explain", help="saliency maps for one image")
    common(p)
    _add(p, "--image", dest="image")
    _add(p, "--method", dest="method")
    _add(p, "--box", dest="box", help="rank of the detection to explain (0 = most confident)")
    _add(p, "--all", dest="all_boxes", action="store_true", help="explain every detection")

    p = sub.add_parser("evaluate", help="metric sweep over a COCO-format dataset")
    common(p)
    _add(p, "--annotations", dest="annotations")
    _add(p, "--images-dir", dest="images_dir")
    _add(p, "--methods", dest="methods")
    _add(p, "--metrics", dest="metrics", help="comma list of pg,ebpg,confidence_drop,information_drop")
    _add(p, "--tiny-only", dest="tiny_only", action="store_true")
    _add(p, "--limit", dest="limit")
    _add(p, "--workers", dest="workers")
    _add(p, "--keep-fraction", dest="keep_fraction")

    p = sub.add_parser("sanity", help="model randomization checks")
    common(p)
    _add(p, "--image", dest="image")
    _add(p, "--box", dest="box")
    _add(p, "--modes", dest="modes")
    _add(p, "--std", dest="std")

    p = sub.add_parser("compare", help="gcame, gradcam and drise side by side with timings")
    common(p)
    _add(p, "--image", dest="image")
    _add(p, "--box", dest="box")
    _add(p, "--methods", dest="methods")
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {k: v for k, (_, v) in OPTIONS.items()}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for k, v in data.items():
            if k not in OPTIONS:
                raise UsageError(f"unknown config key {k!r}")
            typ = OPTIONS[k][0]
            values[k] = typ(v) if typ in (_csv, _bool) and not isinstance(v, list) else v
    for k, (typ, _) in OPTIONS.items():
        env = environ.get(ENV_PREFIX + k.upper())
        if env is not None:
            try:
                values[k] = typ(env)
            except ValueError as exc:
                raise UsageError(f"bad value for {ENV_PREFIX}{k.upper()}: {env!r}") from exc
    for k in OPTIONS:
        if hasattr(args, k):
            values[k] = getattr(args, k)
    cfg = RunConfig(command=args.command, **values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers

def _detector(cfg: RunConfig):
    from .detector import load_detector
    kw = {}
    if cfg.threshold is not None:
        kw["score_threshold"] = cfg.threshold
    return load_detector(cfg.model, cfg.weights, **kw)


def _drise_config(cfg: RunConfig):
    from .baselines import DRiseConfig
    return DRiseConfig(grid_size=(cfg.grid_size, cfg.grid_size), num_masks=cfg.num_masks,
                       seed=cfg.seed, batch_size=cfg.batch_size)


def _explain(method, detector, image, target, cfg, session=None):
    from .baselines import drise_explain, gradcam_explain
    from .core import explain
    if method == "gcame":
        return explain(detector, image, target, session=session)
    if method == "gradcam":
        return gradcam_explain(detector, image, target, session=session)
    return drise_explain(detector, image, target, _drise_config(cfg))


def _class_names(detector):
    from .toy import CLASS_NAMES
    return list(CLASS_NAMES) if detector.key == "toy" else None


def _pick(detections, cfg):
    if cfg.all_boxes:
        return list(enumerate(detections))
    if not 0 <= cfg.box < len(detections):
        raise RuntimeError(f"box {cfg.box} requested but only {len(detections)} detections found")
    return [(cfg.box, detections[cfg.box])]


def _seed(cfg):
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)


# ---------------------------------------------------------------- commands

def cmd_explain(cfg: RunConfig) -> int:
    from .core import ExplanationTarget
    from .detector import forward_with_capture
    from .io import read_image, render_overlay, write_saliency

    detector = _detector(cfg)
    image = read_image(cfg.image)
    dets, session = forward_with_capture(detector, image)
    out = Path(cfg.output_dir)
    stem = Path(cfg.image).stem
    if not dets:
        log.warning("no detections in %s", cfg.image)
        return 0
    for rank, det in _pick(dets, cfg):
        smap = _explain(cfg.method, detector, image, ExplanationTarget(det), cfg, session)
        name = f"{stem}_{cfg.method}_{rank}"
        write_saliency(smap, out / "saliency" / name)
        png = out / "overlays" / f"{name}.png"
        png.parent.mkdir(parents=True, exist_ok=True)
        png.write_bytes(render_overlay(image, smap, det, _class_names(detector)))
        print(f"{name}: box {tuple(round(v, 1) for v in det.box)} class {det.class_index} "
              f"score {det.score:.3f}")
    return 0


def _match_detection(dets, gt, min_iou=0.5):
    from .metrics import pairwise_iou
    best, best_d = 0.0, None
    for d in dets:
        if d.class_index != gt.class_index:
            continue
        iou = pairwise_iou(d.box, gt.box)
        if iou > best:
            best, best_d = iou, d
    return best_d if best >= min_iou else None


def evaluate_image(detector, image, gts, image_id, methods, metrics, cfg) -> tuple[list, int]:
    """EvalRecords for every ground-truth box matched by a detection."""
    from .core import ExplanationTarget
    from .detector import forward_with_capture
    from .metrics import (EvalRecord, PerturbationSpec, confidence_drop, energy_based_pg,
                          information_drop, is_tiny, pointing_game)

    dets, session = forward_with_capture(detector, image)
    records, unmatched = [], 0
    for gt in gts:
        det = _match_detection(dets, gt)
        if det is None:
            unmatched += 1
            continue
        tiny = is_tiny(det, image.shape)
        if cfg.tiny_only and not tiny:
            continue
        target = ExplanationTarget(det)
        for method in methods:
            t0 = time.perf_counter()
            smap = _explain(method, detector, image, target, cfg, session)
            runtime = time.perf_counter() - t0
            flags = [k for k in ("zero_map", "degenerate") if smap.meta.get(k)]
            cd = idrop = None
            if "confidence_drop" in metrics:
                res = confidence_drop(detector, image, smap, target,
                                      PerturbationSpec(cfg.keep_fraction))
                cd, flags = res.value, flags + res.flags
            if "information_drop" in metrics:
                res = information_drop(image, smap, cfg.keep_fraction)
                if res.available:
                    idrop = res.value
                else:
                    flags.append("information_drop_unavailable")
            records.append(EvalRecord(
                image_id=image_id, target_box=tuple(float(v) for v in gt.box),
                matched_box=tuple(float(v) for v in det.box),
                pg_hit=pointing_game(smap, gt) if "pg" in metrics else None,
                ebpg=energy_based_pg(smap, gt) if "ebpg" in metrics else None,
                confidence_drop=cd, information_drop=idrop, tiny=tiny, method_tag=method,
                runtime_s=runtime, flags=flags))
    return records, unmatched


def cmd_evaluate(cfg: RunConfig) -> int:
    from .io import load_coco
    from .metrics import aggregate_report

    index = load_coco(cfg.annotations, cfg.images_dir)
    images = index.images[:cfg.limit] if cfg.limit else index.images
    base = _detector(cfg)
    workers = [base] + [copy.deepcopy(base) for _ in range(cfg.workers - 1)]

    def run(job):
        slot, rec = job
        det = workers[slot]
        return evaluate_image(det, index.load_image(rec), index.annotations[rec.image_id],
                              rec.image_id, cfg.methods, cfg.metrics, cfg)

    # one detector copy per worker; image i always runs on worker i % workers
    chunks = [[(w, rec) for i, rec in enumerate(images) if i % cfg.workers == w]
              for w in range(cfg.workers)]
    with ThreadPoolExecutor(cfg.workers) as pool:
        parts = list(pool.map(lambda chunk: [run(j) for j in chunk], chunks))
    by_image = {}
    for chunk, res in zip(chunks, parts):
        for (_, rec), r in zip(chunk, res):
            by_image[rec.image_id] = r
    records, unmatched = [], 0
    for rec in images:
        rs, u = by_image[rec.image_id]
        records += rs
        unmatched += u
    if not records:
        raise RuntimeError("no ground-truth object was matched by a detection")
    report = aggregate_report(records, tiny_only=cfg.tiny_only)
    report.meta.update({"images": len(images), "unmatched_ground_truth": unmatched,
                        "skipped_annotations": index.skipped, "metrics": cfg.metrics,
                        "model": cfg.model, "seed": cfg.seed})
    out = Path(cfg.output_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "records.csv").write_text(report.to_csv())
    print(report.to_json())
    return 0


def cmd_sanity(cfg: RunConfig) -> int:
    from .core import ExplanationTarget, explain
    from .io import contact_sheet, read_image, render_overlay
    from .sanity import default_plans, sanity_suite, similarity_table

    detector = _detector(cfg)
    image = read_image(cfg.image)
    dets = detector.detect(image)
    (_, det), = _pick(dets, RunConfig("sanity", box=cfg.box))
    target = ExplanationTarget(det)
    baseline = explain(detector, image, target)
    plans = default_plans(detector, cfg.modes, cfg.std, cfg.seed, cfg.layers)
    results = sanity_suite(detector, image, target, plans, baseline)
    out = Path(cfg.output_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sanity.json").write_text(similarity_table(results) + "\n")
    names = _class_names(detector)
    panels = [("original", render_overlay(image, baseline, det, names))]
    for r in results[1:]:
        values = r.saliency if r.saliency is not None else np.zeros(image.shape)
        panels.append((r.plan.label(), render_overlay(image, values, det, names)))
    (out / "sanity_sheet.png").write_bytes(contact_sheet(panels, columns=len(plans) // 2 or 1))
    for r in results:
        print(f"{r.plan.label():40s} rank_corr {r.rank_correlation:+.3f} ssim {r.ssim:+.3f} "
              f"{','.join(r.flags)}")
    return 0


def compare_table(rows: dict) -> str:
    """Metric-by-method table laid out like the reference comparison."""
    methods = list(rows)
    lines = ["| Metric | " + " | ".join(methods) + " |",
             "|---|" + "---|" * len(methods)]
    for key, label in (("pg", "PG"), ("ebpg", "EBPG"), ("confidence_drop", "Confidence Drop %"),
                       ("information_drop", "Information Drop %"), ("runtime_s", "Running time (s)")):
        cells = []
        for m in methods:
            v = rows[m].get(key)
            cells.append("-" if v is None else (f"{v:.4f}" if key == "runtime_s" else f"{v:.3f}"))
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def cmd_compare(cfg: RunConfig) -> int:
    from .core import ExplanationTarget
    from .detector import forward_with_capture
    from .io import read_image, render_overlay, write_saliency
    from .metrics import confidence_drop, energy_based_pg, information_drop, pointing_game

    detector = _detector(cfg)
    image = read_image(cfg.image)
    dets, session = forward_with_capture(detector, image)
    (rank, det), = _pick(dets, RunConfig("compare", box=cfg.box))
    target = ExplanationTarget(det)
    out = Path(cfg.output_dir)
    rows = {}
    methods = [m for m in ("gradcam", "drise", "gcame") if m in set(cfg.methods) | {"gcame"}]
    for method in methods:
        t0 = time.perf_counter()
        smap = _explain(method, detector, image, target, cfg, session)
        runtime = time.perf_counter() - t0
        rows[method] = {"pg": float(pointing_game(smap, det)), "ebpg": energy_based_pg(smap, det),
                        "confidence_drop": confidence_drop(detector, image, smap, target).value,
                        "information_drop": information_drop(image, smap).value,
                        "runtime_s": runtime}
        name = f"{Path(cfg.image).stem}_{method}_{rank}"
        write_saliency(smap, out / "saliency" / name)
        (out / "overlays").mkdir(parents=True, exist_ok=True)
        (out / "overlays" / f"{name}.png").write_bytes(
            render_overlay(image, smap, det, _class_names(detector)))
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "compare.json").write_text(
        json.dumps({"schema": "v1", "num_masks": cfg.num_masks, "methods": rows}, indent=2) + "\n")
    table = compare_table(rows)
    (out / "reports" / "compare.md").write_text(table + "\n")
    print(table)
    return 0


COMMANDS = {"explain": cmd_explain, "evaluate": cmd_evaluate, "sanity": cmd_sanity,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        cfg = resolve_config(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _seed(cfg)
    try:
        return COMMANDS[cfg.command](cfg)
    except Exception as exc:  # reported, not raised, so scripts see exit code 2
        if args.verbose:
            log.exception("%s failed", cfg.command)
        else:
            log.error("%s failed: %s", cfg.command, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
