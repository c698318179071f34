"""Corruption robustness (CE / RR) of a briefly pretrained encoder,
with the random-init encoder as the baseline."""
from dataclasses import replace

from seal import pipeline

cfg = pipeline.PretrainConfig(epochs=4, seed=0)
cfg = replace(cfg, data=replace(cfg.data, n_scenes=4, ticks=4, width=160, height=96,
                                azimuth_steps=180, probe_scenes=6, probe_points=12000))

model = pipeline.pretrain(cfg).model
data = pipeline.probe_data(cfg)
corruptions = pipeline.default_corruptions()
_, baseline = pipeline.corrupted_mious(pipeline.SealModel(1, cfg.model, cfg.seed), cfg, corruptions, data)
rep = pipeline.evaluate_robustness(model, cfg, corruptions, baseline, data)

print(f"clean mIoU {rep.clean_miou:.3f}")
for name, m, ce, rr in zip(rep.corruptions, rep.miou, rep.ce, rep.rr):
    print(f"{name:13s} mIoU {m:.3f}  CE {100 * ce:6.1f}%  RR {100 * rr:6.1f}%")
print(f"mCE {100 * rep.mce:.1f}%  mRR {100 * rep.mrr:.1f}%")
