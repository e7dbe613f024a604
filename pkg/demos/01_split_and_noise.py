"""Split a small classifier, ship features over the wire, and watch the channel hurt them.

    python3 demos/01_split_and_noise.py
"""

from dataclasses import replace

import numpy as np

from splitguard import ScenarioConfig, Workbench, preset, sample_sas
from splitguard.eval_harness import downstream_robustness
from splitguard.split_runtime import deserialize_features, partition, run_head, run_tail, serialize_features

cfg = ScenarioConfig(n_train=1500, n_observe=800, n_benign=350, n_adversarial=150, classifier_epochs=5)
bench = Workbench()
model, _ = bench.classifier(cfg)
for cut in model.cut_points:
    print(f"cut {cut.label:5s} after layer {cut.layer_index}: shape {cut.shape}, d={cut.d}")

# one image crosses the device/edge boundary as a binary frame
head, tail = partition(model, model.cut("deep"))
image = bench.images(cfg, "evaluate")[0]
frame = serialize_features(run_head(head, image))
_, cls, conf = run_tail(tail, deserialize_features(frame))
print(f"\nframe is {len(frame)} bytes; tail predicts class {cls} with confidence {conf:.3f}")

# heavier tails as alpha drops
rng = np.random.default_rng(0)
print("\npreset     alpha  99.9th pct |noise|")
for level in ("light", "moderate", "severe", "extreme"):
    spec = preset(level)
    x = np.abs(sample_sas(spec, rng, 100_000))
    print(f"{level:9s}  {spec.alpha:.1f}    {np.percentile(x, 99.9):10.3f}")

print("\ntail accuracy, clean vs corrupted features (deep cut)")
for level in ("moderate", "extreme"):
    r = downstream_robustness(replace(cfg, noise=level), bench)
    print(f"{level:9s}  {r['accuracy_clean']:.4f} -> {r['accuracy_noisy']:.4f}  (delta {r['delta_acc']:+.4f})")
