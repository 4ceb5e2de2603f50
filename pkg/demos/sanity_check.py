"""
Does the explanation depend on the weights?
===========================================

An explanation that survives re-initialising the network is explaining the
image, not the model. Here we re-draw weights layer by layer, from the top of
the classification branch downwards, and compare each new explanation with
the original. The regression branch is left alone.

Two views are printed. The suite asks the randomized model to find the object
again and explains its own detection; a model that no longer detects it
scores 0. The last column explains the original output row regardless, which
isolates how much of the map is fixed by the detector's geometry: the
Gaussian is always centered on the grid cell that owns that row.

Run:  python demos/sanity_check.py
"""
import numpy as np

from gcame import ExplanationTarget, build_toy_detector, explain, forward_with_capture
from gcame.sanity import default_plans, randomize, rank_correlation, sanity_suite
from gcame.toy import compose_scene

detector = build_toy_detector()
scene = compose_scene([(1, 52, 52, 24)], rng=np.random.default_rng(3))
detections, _ = forward_with_capture(detector, scene.image)
target = ExplanationTarget(detections[0])
baseline = explain(detector, scene.image, target)

plans = default_plans(detector)
results = sanity_suite(detector, scene.image, target, plans, baseline)
print(f"{'plan':32s} {'rank corr':>9s} {'SSIM':>6s}  {'flags':12s} {'same row':>8s}")
for plan, r in zip(plans, results):
    same_row = explain(randomize(detector, plan), scene.image, target)
    print(f"{plan.label():32s} {r.rank_correlation:9.3f} {r.ssim:6.3f}  {' '.join(r.flags):12s} "
          f"{rank_correlation(baseline, same_row):8.3f}")
