"""Scenario runner: classifier -> attack -> noisy channel -> detector -> metrics.

A :class:`Workbench` owns every trained artifact for one set of base settings
and caches them by the config fields they depend on, so a sweep trains each
classifier, attack VAE and detector at most once. Every random stream is
derived from the seed plus a descriptive key, which makes a report a pure
function of its :class:`ScenarioConfig`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from .attack_vae import AttackVae, attack_success, craft_batch, observe, train_attack_vae
from .datasets import ImageDataset, gen_synthetic, load_idx, load_idx_images
from .detector import VARIANTS, AdVae, Detector, feature_matrix, fit_detector, train_advae
from .errors import ConfigurationError, SplitGuardError
from .metrics import ConfusionCounts, auroc, metrics, rwcg
from .noise_channel import LEVELS, corrupt_batch, preset
from .split_runtime import (MODEL_SPECS, FeatureDataset, Model, build_model, partition,
                            train_classifier)

log = logging.getLogger(__name__)

CSV_FIELDS = ("model", "cut", "nu", "noise", "variant", "accuracy", "precision", "recall", "f1_anom",
              "balanced_acc", "auroc", "far", "dr", "asr", "mean_conf", "rwcg", "delta_acc",
              "latency_ms", "degenerate_flags")


def derive_rng(*keys) -> np.random.Generator:
    """Independent generator keyed by a tuple of seeds/labels (stable across runs)."""
    entropy = [zlib.crc32(repr(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class ScenarioConfig:
    model: str = "tiny_convnet"
    cut: str = "deep"
    nu: float = 0.8
    noise: str = "moderate"
    variant: str = "NA"
    seed: int = 0
    n_benign: int = 700
    n_adversarial: int = 300
    # data and training budget
    dataset: str = "synthetic"
    images: str | None = None
    labels: str | None = None
    classes: int = 10
    n_train: int = 2000
    n_observe: int = 1000
    classifier_epochs: int = 6
    attack_latent_dim: int = 16
    attack_epochs: int = 30
    attacker_view: str = "post_channel"
    latent_dim: int = 16
    kl_weight: float = 1.0
    detector_epochs: int = 30
    nu_svm: float = 0.05
    measure_latency: bool = False

    def __post_init__(self):
        if self.model not in MODEL_SPECS:
            raise ConfigurationError(f"unknown model {self.model!r}")
        if not 0.0 <= self.nu <= 1.0:
            raise ConfigurationError(f"nu must lie in [0, 1], got {self.nu}")
        if self.noise not in LEVELS:
            raise ConfigurationError(f"unknown noise preset {self.noise!r}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown detector variant {self.variant!r}")
        if self.attacker_view not in ("post_channel", "pre_channel"):
            raise ConfigurationError("attacker_view must be post_channel or pre_channel")
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigurationError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.images and self.labels):
            raise ConfigurationError("dataset 'idx' needs both 'images' and 'labels' paths")
        for name in ("n_benign", "n_adversarial", "n_train", "n_observe"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    accuracy: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1_anom: float = float("nan")
    balanced_accuracy: float = float("nan")
    auroc: float = float("nan")
    far: float = float("nan")
    dr: float = float("nan")
    asr: float = float("nan")
    mean_confidence: float = float("nan")
    rwcg_delta: float = float("nan")
    delta_acc: float = float("nan")
    latency_ms: float | None = None
    degenerate: list = field(default_factory=list)
    blocked: int = 0
    error: str | None = None

    def row(self) -> dict:
        c = self.config
        num = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))
        flags = list(self.degenerate) + ([f"error: {self.error}"] if self.error else [])
        return {"model": c.model, "cut": c.cut, "nu": repr(float(c.nu)), "noise": c.noise,
                "variant": c.variant, "accuracy": num(self.accuracy), "precision": num(self.precision),
                "recall": num(self.recall), "f1_anom": num(self.f1_anom),
                "balanced_acc": num(self.balanced_accuracy), "auroc": num(self.auroc),
                "far": num(self.far), "dr": num(self.dr), "asr": num(self.asr),
                "mean_conf": num(self.mean_confidence), "rwcg": num(self.rwcg_delta),
                "delta_acc": num(self.delta_acc), "latency_ms": num(self.latency_ms),
                "degenerate_flags": "|".join(flags)}


def _key(cfg: ScenarioConfig, *names) -> tuple:
    return tuple(getattr(cfg, n) for n in names)


_DATA_KEYS = ("dataset", "images", "labels", "classes", "seed", "n_train", "n_observe",
              "n_benign", "n_adversarial")
_CLF_KEYS = _DATA_KEYS + ("model", "classifier_epochs")


class Workbench:
    """Lazily trained, cached artifacts shared between scenario cells."""

    def __init__(self):
        self._cache = {}
        self.preloaded = {}  # (kind, cut, noise[, variant]) -> artifact supplied from checkpoints

    def _get(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def _full(self, cfg: ScenarioConfig) -> ImageDataset:
        n_eval = cfg.n_benign + cfg.n_adversarial
        return gen_synthetic(cfg.classes, cfg.n_train + cfg.n_observe + n_eval, cfg.seed)

    def _order(self, cfg: ScenarioConfig, n: int) -> np.ndarray:
        return derive_rng(cfg.seed, "idx-order").permutation(n)

    def images(self, cfg: ScenarioConfig, pool: str) -> np.ndarray:
        """Images of one pool (``train``, ``observe`` or ``evaluate``); never reads labels."""
        def build():
            if cfg.dataset == "idx":
                raw = load_idx_images(cfg.images)
                raw = raw[self._order(cfg, len(raw))]
            else:
                raw = self._full(cfg).images
            n_eval = cfg.n_benign + cfg.n_adversarial
            if cfg.n_train + cfg.n_observe + n_eval > len(raw):
                raise ConfigurationError(
                    f"requested {cfg.n_train + cfg.n_observe + n_eval} images from a dataset of {len(raw)}")
            bounds = {"train": (0, cfg.n_train), "observe": (cfg.n_train, cfg.n_train + cfg.n_observe),
                      "evaluate": (cfg.n_train + cfg.n_observe, cfg.n_train + cfg.n_observe + n_eval)}
            return {k: raw[a:b] for k, (a, b) in bounds.items()}
        return self._get(("images",) + _key(cfg, *_DATA_KEYS), build)[pool]

    def data(self, cfg: ScenarioConfig) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
        """Labelled ``(train, observe, evaluate)`` pools."""
        def build():
            n_eval = cfg.n_benign + cfg.n_adversarial
            if cfg.dataset == "idx":
                full = load_idx(cfg.images, cfg.labels)
                full = full.subset(self._order(cfg, len(full)))
            else:
                full = self._full(cfg)
            return tuple(full.split(cfg.n_train, cfg.n_observe, n_eval))
        return self._get(("data",) + _key(cfg, *_DATA_KEYS), build)

    def classifier(self, cfg: ScenarioConfig) -> tuple[Model, list]:
        def build():
            if ("classifier",) in self.preloaded:
                return self.preloaded[("classifier",)], []
            train, _, _ = self.data(cfg)
            spec = MODEL_SPECS[cfg.model](num_classes=train.num_classes,
                                          in_channels=train.images.shape[1],
                                          image_size=train.images.shape[2])
            model = build_model(spec, cfg.seed)
            trace = train_classifier(model, train, epochs=cfg.classifier_epochs, seed=cfg.seed)
            return model, trace.epochs
        return self._get(("clf",) + _key(cfg, *_CLF_KEYS), build)

    def clean_features(self, cfg: ScenarioConfig, pool: str) -> FeatureDataset:
        def build():
            model, _ = self.classifier(cfg)
            head, _ = partition(model, model.cut(cfg.cut))
            train, obs, ev = self.data(cfg)
            images = {"observe": obs, "evaluate": ev}[pool]
            return head.features(images, split="train" if pool == "observe" else "test")
        return self._get(("feat", pool, cfg.cut) + _key(cfg, *_CLF_KEYS), build)

    def observed_stream(self, cfg: ScenarioConfig, noise: str) -> FeatureDataset:
        """Unlabelled observation-period benign traffic as it arrives after the channel."""
        def build():
            model, _ = self.classifier(cfg)
            head, _ = partition(model, model.cut(cfg.cut))
            images = self.images(cfg, "observe")
            values = np.concatenate([head(images[i:i + 256]) for i in range(0, len(images), 256)])
            clean = FeatureDataset(head.cut, values, split="train")
            return corrupt_batch(clean, preset(noise), derive_rng(cfg.seed, "observe", cfg.cut, noise))
        return self._get(("stream", cfg.cut, noise) + _key(cfg, *_CLF_KEYS), build)

    def attack(self, cfg: ScenarioConfig) -> AttackVae:
        view = cfg.noise if cfg.attacker_view == "post_channel" else "none"
        pre = self.preloaded.get(("attack", cfg.cut, view))
        if pre is not None:
            return pre

        def build():
            d_h = observe(self.observed_stream(cfg, view))
            return train_attack_vae(d_h, cfg.attack_latent_dim, cfg.attack_epochs,
                                    seed=cfg.seed + 101)
        keys = _key(cfg, *_CLF_KEYS, "attack_latent_dim", "attack_epochs")
        return self._get(("attack", cfg.cut, view) + keys, build)

    def advae(self, cfg: ScenarioConfig) -> tuple[AdVae, np.ndarray]:
        """Detector adVAE and its benign training feature matrix."""
        def build():
            stream = self.observed_stream(cfg, cfg.noise)
            model = train_advae(stream, cfg.latent_dim, cfg.kl_weight, cfg.detector_epochs,
                                seed=cfg.seed + 202)
            return model, feature_matrix(model, stream.values)
        keys = _key(cfg, *_CLF_KEYS, "latent_dim", "kl_weight", "detector_epochs")
        return self._get(("advae", cfg.cut, cfg.noise) + keys, build)

    def detector(self, cfg: ScenarioConfig) -> Detector:
        pre = self.preloaded.get(("detector", cfg.cut, cfg.noise, cfg.variant))
        if pre is not None:
            return pre

        def build():
            model, feats = self.advae(cfg)
            stream = self.observed_stream(cfg, cfg.noise)
            return fit_detector(model, stream, cfg.variant, cfg.nu_svm, features=feats,
                                meta={"noise": cfg.noise})
        keys = _key(cfg, *_CLF_KEYS, "latent_dim", "kl_weight", "detector_epochs", "nu_svm")
        return self._get(("detector", cfg.cut, cfg.noise, cfg.variant) + keys, build)


_DETECTOR_ONLY = ("variant", "latent_dim", "kl_weight", "detector_epochs", "nu_svm", "measure_latency")


def stream_key(cfg: ScenarioConfig) -> str:
    """Hash input for the evaluation stream; detector settings are excluded so variants see identical traffic."""
    d = asdict(cfg)
    for name in _DETECTOR_ONLY:
        d.pop(name)
    return json.dumps(d, sort_keys=True)


def measure_latency(detector: Detector, values: np.ndarray, n: int = 1000) -> float:
    """Median wall-clock milliseconds of one single-sample detection."""
    times = []
    for i in range(n):
        x = values[i % len(values)][None]
        t0 = time.perf_counter()
        detector.scores(x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times) * 1e3)


@dataclass
class ScenarioRun:
    """Intermediate arrays of one scenario, kept for demos and blocking logic."""

    stream: FeatureDataset
    scores: np.ndarray
    flags: np.ndarray
    report: ScenarioReport


def execute(cfg: ScenarioConfig, bench: Workbench | None = None) -> ScenarioRun:
    bench = bench or Workbench()
    key = stream_key(cfg)
    model, _ = bench.classifier(cfg)
    _, tail = partition(model, model.cut(cfg.cut))
    ev = bench.clean_features(cfg, "evaluate")
    benign = ev.subset(slice(0, cfg.n_benign))
    sources = ev.subset(slice(cfg.n_benign, cfg.n_benign + cfg.n_adversarial))

    attack = bench.attack(cfg)
    adversarial = craft_batch(attack, sources, cfg.nu, derive_rng(key, "targets"))
    spec = preset(cfg.noise)
    stream = corrupt_batch(FeatureDataset.concat([benign, adversarial], split="test"), spec,
                           derive_rng(key, "channel"))

    detector = bench.detector(cfg)
    scores = detector.scores(stream.values)
    flags = scores > 0
    y = stream.adversarial
    m = metrics(ConfusionCounts.from_predictions(y, flags))
    report = ScenarioReport(cfg, m.accuracy, m.precision, m.recall, m.f1_anom, m.balanced_accuracy,
                            auroc(scores[~y], scores[y]), m.far, m.dr, degenerate=list(m.degenerate))
    report.asr, report.mean_confidence = attack_success(tail, stream.subset(y))

    # downstream effect of the channel on benign traffic
    _, clean_cls, clean_conf = tail.predict(benign.values)
    _, noisy_cls, noisy_conf = tail.predict(stream.values[~y])
    report.delta_acc = float(np.mean(noisy_cls == benign.labels) - np.mean(clean_cls == benign.labels))
    g_clean, deg_clean = rwcg(clean_conf, clean_cls == benign.labels)
    g_noisy, deg_noisy = rwcg(noisy_conf, noisy_cls == benign.labels)
    report.rwcg_delta = g_noisy - g_clean
    if deg_clean or deg_noisy:
        report.degenerate.append("rwcg")
    report.blocked = int(flags.sum())
    if cfg.measure_latency:
        report.latency_ms = measure_latency(detector, stream.values)
    return ScenarioRun(stream, scores, flags, report)


def run_scenario(cfg: ScenarioConfig, bench: Workbench | None = None) -> ScenarioReport:
    return execute(cfg, bench).report


def downstream_robustness(cfg: ScenarioConfig, bench: Workbench | None = None) -> dict:
    """Tail accuracy and RWCG on clean vs channel-corrupted benign features.

    Uses every held-out image (observation and evaluation pools).
    """
    bench = bench or Workbench()
    model, _ = bench.classifier(cfg)
    _, tail = partition(model, model.cut(cfg.cut))
    clean = FeatureDataset.concat([bench.clean_features(cfg, "observe"),
                                   bench.clean_features(cfg, "evaluate")])
    noisy = corrupt_batch(clean, preset(cfg.noise), derive_rng(cfg.seed, "robustness", cfg.cut, cfg.noise))
    _, c_cls, c_conf = tail.predict(clean.values)
    _, n_cls, n_conf = tail.predict(noisy.values)
    acc_clean = float(np.mean(c_cls == clean.labels))
    acc_noisy = float(np.mean(n_cls == clean.labels))
    return {"noise": cfg.noise, "cut": cfg.cut, "accuracy_clean": acc_clean, "accuracy_noisy": acc_noisy,
            "delta_acc": acc_noisy - acc_clean,
            "rwcg_clean": rwcg(c_conf, c_cls == clean.labels)[0],
            "rwcg_noisy": rwcg(n_conf, n_cls == clean.labels)[0]}


def sweep(base: ScenarioConfig, nus=None, presets=None, cuts=None, variants=None,
          bench: Workbench | None = None) -> list[ScenarioReport]:
    """Cartesian product in (cut, noise, nu, variant) order; failures become flagged rows."""
    bench = bench or Workbench()
    nus = [base.nu] if nus is None else list(nus)
    presets = [base.noise] if presets is None else list(presets)
    cuts = [base.cut] if cuts is None else list(cuts)
    variants = [base.variant] if variants is None else list(variants)
    reports = []
    for cut, noise, nu, variant in product(cuts, presets, nus, variants):
        try:
            cfg = replace(base, cut=cut, noise=noise, nu=float(nu), variant=variant)
        except ConfigurationError as exc:
            cfg = base
            reports.append(ScenarioReport(base, error=str(exc)))
            continue
        try:
            reports.append(run_scenario(cfg, bench))
        except SplitGuardError as exc:
            log.warning("cell %s/%s/nu=%s/%s failed: %s", cut, noise, nu, variant, exc)
            reports.append(ScenarioReport(cfg, error=str(exc)))
    return reports


def reports_to_csv(reports: list[ScenarioReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports: list[ScenarioReport]) -> str:
    return json.dumps([r.row() for r in reports], indent=2) + "\n"


def write_reports(reports: list[ScenarioReport], root, name: str, stamp: str | None = None) -> Path:
    """Write ``report.csv`` and ``report.json`` under ``root/name/stamp``."""
    stamp = stamp if stamp is not None else time.strftime("%Y%m%dT%H%M%S")
    out = Path(root) / name / stamp if stamp else Path(root) / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(reports_to_csv(reports))
    (out / "report.json").write_text(reports_to_json(reports))
    return out


def config_fields() -> set[str]:
    return {f.name for f in fields(ScenarioConfig)}
