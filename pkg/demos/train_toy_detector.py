"""
Training the bundled toy detector
=================================

The toy detector is the test workhorse: a ~50k-parameter anchor-free CNN
that finds circles and squares in 128x128 synthetic scenes, predicting one box
per cell of a 64x64 grid. This script
regenerates ``src/gcame/data/toy_detector_v1.pt`` from scratch and reports
recall on 200 held-out scenes and on 200 held-out pairs of tiny neighbours.

Takes roughly 70 minutes on one CPU core.
"""
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from gcame.toy import (ToySpec, detection_recall, evaluation_scenes, save_checkpoint,
                       tiny_pair_scene, train_toy_detector)

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.manual_seed(0)
torch.set_num_threads(1)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
out = Path(sys.argv[2]) if len(sys.argv) > 2 else \
    Path(__file__).resolve().parents[1] / "src" / "gcame" / "data" / "toy_detector_v1.pt"

detector = train_toy_detector(ToySpec(), steps=steps)

# %%
# Recall is measured with a same-class IoU >= 0.5 match per ground-truth box.
recall = detection_recall(detector, evaluation_scenes())
print(f"recall on 200 held-out scenes: {recall:.4f}")
pairs = [tiny_pair_scene(np.random.default_rng(1000 + i)) for i in range(200)]
tiny_recall = detection_recall(detector, pairs)
print(f"recall on 200 held-out tiny pairs: {tiny_recall:.4f}")

save_checkpoint(detector, out,
                extra={"recall": recall, "tiny_pair_recall": tiny_recall, "steps": steps})
print(f"saved {out}")
