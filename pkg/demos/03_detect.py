"""Score a mixed benign/adversarial stream with both detector variants and the radius baseline.

    python3 demos/03_detect.py
"""

from splitguard import ScenarioConfig, Workbench, sweep

# default budgets; cutting them shrinks the gap between the variants and can reverse it
base = ScenarioConfig(nu=0.8)
reports = sweep(base, presets=["none", "moderate", "extreme"], variants=["NA", "NU", "radius"],
                bench=Workbench())

print("noise     variant  AUROC   DR     FAR    ASR")
for r in reports:
    c = r.config
    print(f"{c.noise:9s} {c.variant:7s}  {r.auroc:.3f}  {r.dr:.3f}  {r.far:.3f}  {r.asr:.3f}")
