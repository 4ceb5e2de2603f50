"""
G-CAME, GradCAM and D-RISE side by side
=======================================

Two circles sit in the same scene. A classification-style GradCAM for the
class "circle" lights up both; G-CAME and D-RISE should each focus on the one
box we ask about. D-RISE gets there by running the detector on a thousand
masked copies of the image, which is where the time goes.

Run:  python demos/compare_explainers.py [contact_sheet.png]
"""
import sys
import time

import numpy as np

from gcame import ExplanationTarget, build_toy_detector, explain, forward_with_capture
from gcame.baselines import DRiseConfig, drise_explain, gradcam_explain
from gcame.io import contact_sheet, render_overlay
from gcame.metrics import energy_based_pg
from gcame.toy import CLASS_NAMES, compose_scene

detector = build_toy_detector()
scene = compose_scene([(0, 14, 18, 24), (0, 82, 78, 26)], rng=np.random.default_rng(1))
detections, session = forward_with_capture(detector, scene.image)
left = min(detections, key=lambda d: d.box[0])
target = ExplanationTarget(left)
own, other = scene.boxes


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


maps = {
    "gradcam (class)": timed(lambda: gradcam_explain(detector, scene.image, 0, session)),
    "drise": timed(lambda: drise_explain(detector, scene.image, target, DRiseConfig(num_masks=1000))),
    "gcame": timed(lambda: explain(detector, scene.image, target, session=session)),
}

print(f"{'method':16s} {'EBPG target':>12s} {'EBPG other':>11s} {'seconds':>9s}")
for name, (smap, secs) in maps.items():
    print(f"{name:16s} {energy_based_pg(smap, own):12.3f} {energy_based_pg(smap, other):11.3f} "
          f"{secs:9.3f}")

g, d = maps["gcame"][1], maps["drise"][1]
print(f"\nD-RISE took {d / g:.0f}x longer than G-CAME for the same box")

if len(sys.argv) > 1:
    panels = [(name, render_overlay(scene.image, smap, left, CLASS_NAMES))
              for name, (smap, _) in maps.items()]
    with open(sys.argv[1], "wb") as fh:
        fh.write(contact_sheet(panels, columns=3))
    print(f"contact sheet written to {sys.argv[1]}")
