"""Command-line entry point: ``splitguard <command> [--config FILE] [flags]``.

Config files are JSON with a strict schema (unknown keys are errors)::

    {
      "seed": 0,
      "out": "runs/example",
      "dataset":  {"kind": "synthetic", "classes": 10, "n_train": 2000, "n_observe": 1000},
      "model":    {"name": "tiny_convnet", "epochs": 6, "cut": "deep"},
      "noise":    {"preset": "moderate"},
      "attack":   {"latent_dim": 16, "epochs": 30, "view": "post_channel"},
      "detector": {"latent_dim": 16, "kl_weight": 1.0, "epochs": 30, "nu_svm": 0.05, "variant": "NA"},
      "sweep":    {"name": "table", "nus": [0.8], "presets": ["moderate"], "cuts": ["deep"],
                   "variants": ["NA", "NU"], "n_benign": 700, "n_adversarial": 300,
                   "measure_latency": false}
    }

Exit codes: 0 success, 2 configuration error, 3 training failure, 4 every sweep row failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack_vae import AttackVae
from .checkpoint import load_network, save_network
from .detector import VARIANTS, Detector
from .errors import ConfigurationError, FrameError, TrainingError, UsageError
from .eval_harness import (ScenarioConfig, Workbench, execute, reports_to_csv, sweep,
                           write_reports)
from .noise_channel import LEVELS
from .split_runtime import MODEL_SPECS, Model, partition

log = logging.getLogger("splitguard")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_SWEEP = 0, 2, 3, 4

# section -> {key: (type(s), ScenarioConfig field or None)}
SCHEMA = {
    "dataset": {"kind": (str, "dataset"), "images": (str, "images"), "labels": (str, "labels"),
                "classes": (int, "classes"), "n_train": (int, "n_train"), "n_observe": (int, "n_observe")},
    "model": {"name": (str, "model"), "epochs": (int, "classifier_epochs"), "cut": (str, "cut")},
    "noise": {"preset": (str, "noise")},
    "attack": {"latent_dim": (int, "attack_latent_dim"), "epochs": (int, "attack_epochs"),
               "view": (str, "attacker_view"), "nu": ((int, float), "nu")},
    "detector": {"latent_dim": (int, "latent_dim"), "kl_weight": ((int, float), "kl_weight"),
                 "epochs": (int, "detector_epochs"), "nu_svm": ((int, float), "nu_svm"),
                 "variant": (str, "variant")},
    "sweep": {"name": (str, None), "nus": (list, None), "presets": (list, None), "cuts": (list, None),
              "variants": (list, None), "n_benign": (int, "n_benign"),
              "n_adversarial": (int, "n_adversarial"), "measure_latency": (bool, "measure_latency")},
}
TOP_LEVEL = {"seed", "out"} | set(SCHEMA)


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    out: Path
    name: str = "sweep"
    axes: dict = field(default_factory=dict)


def _type_ok(value, kind) -> bool:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if isinstance(value, bool) and bool not in kinds:
        return False
    return isinstance(value, kinds)


def parse_config(raw: dict, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Validate a config dict completely before any work is done."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    overrides, axes = {}, {}
    for section, keys in SCHEMA.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigurationError(f"section '{section}' must be an object")
        for key, value in body.items():
            if key not in keys:
                raise ConfigurationError(f"unknown key '{section}.{key}'")
            kind, target = keys[key]
            if not _type_ok(value, kind):
                raise ConfigurationError(f"'{section}.{key}' has the wrong type: {value!r}")
            if target:
                overrides[target] = value
            elif key != "name":
                if not value:
                    raise ConfigurationError(f"'{section}.{key}' must be a non-empty list")
                axes[key] = value
    if overrides.get("dataset") == "idx":
        for key in ("images", "labels"):
            if key not in overrides:
                raise ConfigurationError(f"missing dataset path 'dataset.{key}'")
    for key in ("images", "labels"):
        if key in overrides and not Path(overrides[key]).is_file():
            raise ConfigurationError(f"dataset path 'dataset.{key}' does not exist: {overrides[key]}")
    for value in axes.get("nus", []):
        if not _type_ok(value, (int, float)) or not 0 <= value <= 1:
            raise ConfigurationError(f"'sweep.nus' entries must be numbers in [0, 1], got {value!r}")
    for key, allowed in (("presets", LEVELS), ("variants", VARIANTS), ("cuts", None)):
        for value in axes.get(key, []):
            if not isinstance(value, str) or (allowed and value not in allowed):
                raise ConfigurationError(f"invalid 'sweep.{key}' entry {value!r}")
    if "seed" in raw and (not _type_ok(raw["seed"], int) or raw["seed"] < 0):
        raise ConfigurationError(f"'seed' must be a non-negative integer, got {raw['seed']!r}")
    if "out" in raw and not isinstance(raw["out"], str):
        raise ConfigurationError("'out' must be a string")
    overrides["seed"] = seed if seed is not None else raw.get("seed", 0)
    if "nus" in axes:
        overrides.setdefault("nu", float(axes["nus"][0]))
    try:
        scenario = ScenarioConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    if scenario.model in MODEL_SPECS:
        cuts = {c for c, _ in MODEL_SPECS[scenario.model]().cuts}
        for cut in axes.get("cuts", [scenario.cut]):
            if cut not in cuts:
                raise ConfigurationError(f"unknown cut {cut!r}; available: {sorted(cuts)}")
    out = Path(out if out is not None else raw.get("out", "."))
    name = raw.get("sweep", {}).get("name", "sweep")
    return RunConfig(scenario, out, name, axes)


def load_config(path: str | None, seed=None, out=None) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, seed, out)


# -- checkpoint layout ---------------------------------------------------------

def ckpt_dir(run: RunConfig) -> Path:
    return run.out / "checkpoints"


def classifier_path(run: RunConfig) -> Path:
    return ckpt_dir(run) / "classifier.ssnn"


def attack_path(run: RunConfig, cut: str, noise: str) -> Path:
    return ckpt_dir(run) / f"attack-{cut}-{noise}.ssav"


def detector_path(run: RunConfig, cut: str, noise: str, variant: str) -> Path:
    return ckpt_dir(run) / f"detector-{cut}-{noise}-{variant}.ssdt"


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _load_classifier(run: RunConfig, bench: Workbench) -> None:
    path = classifier_path(run)
    if not path.is_file():
        raise ConfigurationError(f"classifier checkpoint {path} not found (run train-classifier or pass --auto)")
    cfg = run.scenario
    spec_fn = MODEL_SPECS[cfg.model]
    net = load_network(path)
    in_shape = net.input_shape
    spec = spec_fn(num_classes=net.shapes[-1][0], in_channels=in_shape[0], image_size=in_shape[1])
    bench.preloaded[("classifier",)] = Model(spec, net)


def _attack_view(cfg: ScenarioConfig) -> str:
    return cfg.noise if cfg.attacker_view == "post_channel" else "none"


# -- commands ----------------------------------------------------------------

def cmd_train_classifier(run: RunConfig, auto: bool = False) -> Path:
    bench = Workbench()
    model, trace = bench.classifier(run.scenario)
    _, _, ev = bench.data(run.scenario)
    _, classes, _ = model.predict(ev.images)
    path = classifier_path(run)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_network(model.net, path)
    _write_json(ckpt_dir(run) / "classifier-log.json",
                {"epochs": trace, "test_accuracy": float(np.mean(classes == ev.labels))})
    print(f"classifier: test accuracy {np.mean(classes == ev.labels):.4f} -> {path}")
    return path


def _ensure_classifier(run: RunConfig, bench: Workbench, auto: bool) -> None:
    if not classifier_path(run).is_file() and auto:
        cmd_train_classifier(run)
    _load_classifier(run, bench)


def cmd_train_attack(run: RunConfig, auto: bool = False, bench: Workbench | None = None) -> Path:
    """Train the attacker's VAE from unlabelled observed features only."""
    bench = bench or Workbench()
    _ensure_classifier(run, bench, auto)
    cfg = run.scenario
    attack = bench.attack(cfg)
    path = attack_path(run, cfg.cut, _attack_view(cfg))
    path.write_bytes(attack.to_bytes())
    _write_json(path.with_suffix(".log.json"), attack.trace)
    print(f"attack VAE ({cfg.cut}, observed under {_attack_view(cfg)}) -> {path}")
    return path


def cmd_train_detector(run: RunConfig, auto: bool = False, bench: Workbench | None = None,
                       variants=None) -> list[Path]:
    bench = bench or Workbench()
    _ensure_classifier(run, bench, auto)
    cfg = run.scenario
    paths = []
    for variant in variants or [cfg.variant]:
        det = bench.detector(replace(cfg, variant=variant))
        path = detector_path(run, cfg.cut, cfg.noise, variant)
        path.write_bytes(det.to_bytes())
        paths.append(path)
        print(f"detector {variant} ({cfg.cut}, {cfg.noise}) -> {path}")
    advae, _ = bench.advae(cfg)
    _write_json(ckpt_dir(run) / f"detector-{cfg.cut}-{cfg.noise}.log.json", advae.trace)
    return paths


def _axes(run: RunConfig) -> dict:
    cfg = run.scenario
    return {"nus": [float(v) for v in run.axes.get("nus", [cfg.nu])],
            "presets": run.axes.get("presets", [cfg.noise]),
            "cuts": run.axes.get("cuts", [cfg.cut]),
            "variants": run.axes.get("variants", [cfg.variant])}


def _preload(run: RunConfig, bench: Workbench, axes: dict, auto: bool) -> None:
    """Load every artifact the sweep needs; train (and save) missing ones under ``auto``."""
    _ensure_classifier(run, bench, auto)
    missing = []
    for cut in axes["cuts"]:
        for noise in axes["presets"]:
            cfg = replace(run.scenario, cut=cut, noise=noise)
            view = _attack_view(cfg)
            path = attack_path(run, cut, view)
            if path.is_file():
                bench.preloaded[("attack", cut, view)] = AttackVae.from_bytes(path.read_bytes())
            elif auto:
                cmd_train_attack(RunConfig(cfg, run.out, run.name), bench=bench)
            else:
                missing.append(path)
            for variant in axes["variants"]:
                path = detector_path(run, cut, noise, variant)
                if path.is_file():
                    bench.preloaded[("detector", cut, noise, variant)] = Detector.from_bytes(path.read_bytes())
                elif auto:
                    cmd_train_detector(RunConfig(cfg, run.out, run.name), bench=bench, variants=[variant])
                else:
                    missing.append(path)
    if missing:
        raise ConfigurationError("missing checkpoints (pass --auto to train them): "
                                 + ", ".join(str(p) for p in missing))


def cmd_sweep(run: RunConfig, auto: bool = False, stamp: str | None = None) -> int:
    bench = Workbench()
    axes = _axes(run)
    _preload(run, bench, axes, auto)
    reports = sweep(run.scenario, nus=axes["nus"], presets=axes["presets"], cuts=axes["cuts"],
                    variants=axes["variants"], bench=bench)
    out = write_reports(reports, run.out / "reports", run.name, stamp)
    ok = sum(r.error is None for r in reports)
    print(f"{ok}/{len(reports)} rows succeeded -> {out}")
    sys.stdout.write(reports_to_csv(reports))
    return EXIT_OK if ok else EXIT_SWEEP


DEMO_CONFIG = dict(noise="moderate", nu=0.8, variant="NA", cut="deep", n_train=1500, n_observe=800,
                   n_benign=350, n_adversarial=150, classifier_epochs=5, attack_epochs=20,
                   detector_epochs=20, measure_latency=True)


def cmd_demo(run: RunConfig) -> int:
    """Train everything small, run one mixed stream through the guarded pipeline."""
    cfg = replace(run.scenario, **DEMO_CONFIG)
    bench = Workbench()
    result = execute(cfg, bench)
    report = result.report
    model, _ = bench.classifier(cfg)
    _, tail = partition(model, model.cut(cfg.cut))
    # flagged samples never reach the tail
    passed = result.stream.subset(~result.flags)
    _, classes, _ = tail.predict(passed.values)
    adv_passed = int(passed.adversarial.sum())
    out = write_reports([replace(report, latency_ms=None)], run.out / "reports", "demo", stamp="")
    _write_json(out / "timing.json", {"latency_ms": report.latency_ms})
    print(f"stream: {len(result.stream)} samples ({int(result.stream.adversarial.sum())} adversarial, "
          f"{int(result.stream.noisy.sum())} through the noisy channel)")
    print(f"blocked before tail: {report.blocked}; adversarial that reached the tail: {adv_passed}")
    benign_passed = ~passed.adversarial
    if benign_passed.any():
        acc = float(np.mean(classes[benign_passed] == passed.labels[benign_passed]))
        print(f"tail accuracy on delivered benign samples: {acc:.4f}")
    print(f"AUROC(NA) {report.auroc:.4f}  accuracy {report.accuracy:.4f}  FAR {report.far:.4f}  "
          f"DR {report.dr:.4f}  ASR {report.asr:.4f}")
    print(f"detection latency (median, single sample): {report.latency_ms:.3f} ms")
    print(f"report -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitguard", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-classifier", "train-attack", "train-detector", "sweep", "demo"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (checkpoints/ and reports/)")
        p.add_argument("--auto", action="store_true", help="train missing checkpoints")
        p.add_argument("--noise", choices=LEVELS, help="restrict to one noise preset")
        p.add_argument("--variant", choices=VARIANTS, help="restrict to one detector variant")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be non-negative")
        run = load_config(args.config, args.seed, args.out)
        if args.noise:
            run.scenario = replace(run.scenario, noise=args.noise)
            run.axes["presets"] = [args.noise]
        if args.variant:
            run.scenario = replace(run.scenario, variant=args.variant)
            run.axes["variants"] = [args.variant]
        if args.command == "train-classifier":
            cmd_train_classifier(run)
        elif args.command == "train-attack":
            cmd_train_attack(run, args.auto)
        elif args.command == "train-detector":
            cmd_train_detector(run, args.auto)
        elif args.command == "sweep":
            return cmd_sweep(run, args.auto)
        else:
            return cmd_demo(run)
    except (ConfigurationError, UsageError, FrameError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
