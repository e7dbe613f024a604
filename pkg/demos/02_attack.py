"""An eavesdropper learns a VAE over intercepted features and walks them toward random latents.

    python3 demos/02_attack.py
"""

from dataclasses import replace

from splitguard import ScenarioConfig, Workbench
from splitguard.attack_vae import evaluate_attack
from splitguard.split_runtime import partition

NUS = (0.0, 0.25, 0.5, 0.75, 1.0)

# nu=0 is a plain reconstruction, so its success rate says how badly the attacker reconstructs.
# With the default budgets only the deep cut reconstructs well; shallower, wider features
# (and any reduced budget) already flip most labels at nu=0.
base = ScenarioConfig(noise="none")
bench = Workbench()
print("cut    " + "  ".join(f"nu={nu:<4}" for nu in NUS))
for cut in ("early", "mid", "deep"):
    cfg = replace(base, cut=cut)
    model, _ = bench.classifier(cfg)
    _, tail = partition(model, model.cut(cut))
    report = evaluate_attack(tail, bench.attack(cfg), bench.clean_features(cfg, "evaluate"), NUS)
    print(f"{cut:5s}  " + "  ".join(f"{a:7.3f}" for a in report.asr.values()))
