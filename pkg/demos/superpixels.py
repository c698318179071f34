"""Ground-truth instance masks versus SLIC superpixels on rendered frames.

Prints per-image segment counts and writes both label maps as colour PPMs
into the directory given on the command line (default ./superpixels_out).
"""
import sys
from pathlib import Path

import numpy as np

from seal import pipeline, synth
from seal.partition import slic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "superpixels_out")
out.mkdir(parents=True, exist_ok=True)

cfg = pipeline.PretrainConfig()
world = pipeline.make_world(cfg)
rng = np.random.default_rng(0)
colours = rng.integers(0, 256, (65536, 3)).astype(np.uint8)

counts = []
for s in range(3):
    view = world.view(s, 0, 0)
    sp = slic(view.image, 150, 0.2)
    counts.append((view.labelmap.num_segments, sp.num_segments))
    synth.save_ppm(view.image, out / f"scene{s}_image.ppm")
    synth.save_ppm(colours[view.labelmap.ids], out / f"scene{s}_masks.ppm")
    synth.save_ppm(colours[sp.ids], out / f"scene{s}_slic.ppm")
    print(f"scene {s}: {counts[-1][0]:3d} mask segments, {counts[-1][1]:3d} SLIC superpixels")
print("mean", np.mean(counts, axis=0))
