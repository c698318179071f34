"""Pretrain on a small synthetic world and compare the linear probe
against a randomly initialised encoder with the same seed.

    python3 demos/pretrain_and_probe.py [seed]
"""
import sys
import time
from dataclasses import replace

from seal import pipeline

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

cfg = pipeline.PretrainConfig(epochs=10, seed=seed)
cfg = replace(cfg, data=replace(cfg.data, n_scenes=8, ticks=6, width=160, height=96,
                                azimuth_steps=180, probe_scenes=10, probe_points=40000))

t0 = time.time()
res = pipeline.pretrain(cfg)
first, last = res.log.records[0]["loss"], res.log.records[-1]["loss"]
print(f"pretrained {res.steps} steps in {time.time() - t0:.0f}s, loss {first:.3f} -> {last:.3f}")

data = pipeline.probe_data(cfg)
pre = pipeline.probe(res.model, cfg, data)
rnd = pipeline.probe(pipeline.SealModel(1, cfg.model, seed), cfg, data)
print("class      pretrained  random")
for name, a, b in zip(("ground", "vehicle", "pole", "wall"), pre.iou, rnd.iou):
    print(f"{name:10s} {a:10.3f}  {b:6.3f}")
print(f"mIoU       {pre.miou:10.3f}  {rnd.miou:6.3f}")
