"""Black-box latent-interpolation attack on transmitted features.

The adversary only sees feature vectors on the wire. It fits a VAE to what it
collected, then replaces a benign feature ``h_o`` by ``decode(z_nu)`` with
``z_nu = (1 - nu) * z_o + nu * z_t``, where ``z_o`` is the encoder mean of
``h_o`` and ``z_t`` is drawn from a diagonal Gaussian fitted to the encoded
collection. Nothing here touches classifier parameters, labels or the detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .checkpoint import bundle_from_bytes, bundle_to_bytes
from .errors import TrainingError, UsageError
from .split_runtime import ADVERSARIAL, CutPoint, FeatureDataset, FeatureVector, Tail
from .vae import GaussianVae

ATTACK_MAGIC = b"SSAV"
MIN_SAMPLES_PER_LATENT = 10


@dataclass
class AttackVae:
    vae: GaussianVae
    cut: CutPoint
    latent_mean: np.ndarray | None = None
    latent_std: np.ndarray | None = None
    trace: list = field(default_factory=list)

    @property
    def latent_dim(self):
        return self.vae.latent_dim

    @property
    def trained(self):
        return self.latent_mean is not None

    def to_bytes(self) -> bytes:
        if not self.trained:
            raise UsageError("cannot save an untrained attack VAE")
        meta = {"cut": [self.cut.label, self.cut.layer_index, list(self.cut.shape)],
                "latent_dim": self.latent_dim, "hidden": self.vae.hidden,
                "kl_weight": self.vae.kl_weight, "trace": self.trace}
        return bundle_to_bytes(ATTACK_MAGIC, {
            "meta": meta, "encoder": self.vae.encoder, "decoder": self.vae.decoder,
            "latent_mean": self.latent_mean, "latent_std": self.latent_std})

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttackVae":
        s = bundle_from_bytes(ATTACK_MAGIC, data)
        meta = s["meta"]
        label, idx, shape = meta["cut"]
        cut = CutPoint(label, idx, tuple(shape))
        vae = GaussianVae(cut.d, meta["latent_dim"], meta["hidden"], meta["kl_weight"])
        vae.encoder, vae.decoder = s["encoder"], s["decoder"]
        return cls(vae, cut, s["latent_mean"], s["latent_std"], meta["trace"])


def collect_features(stream: Iterable[FeatureVector], n: int, cut: CutPoint) -> FeatureDataset:
    """Passively accumulate ``n`` observed vectors; labels are never retained."""
    vectors = []
    for h in stream:
        if len(vectors) >= n:
            break
        if len(h.values) != cut.d:
            raise UsageError(f"observed feature of length {len(h.values)} at a cut with d={cut.d}")
        vectors.append(FeatureVector(np.array(h.values, dtype=np.float64), None, h.provenance, h.noisy))
    if len(vectors) < n:
        raise UsageError(f"stream ended after {len(vectors)} of {n} requested samples")
    values = np.array([v.values for v in vectors]).reshape(len(vectors), cut.d)
    return FeatureDataset(cut, values, noisy=[v.noisy for v in vectors])


def observe(dataset: FeatureDataset, n: int | None = None) -> FeatureDataset:
    """Batch form of :func:`collect_features` over an already materialised stream."""
    n = len(dataset) if n is None else n
    if n > len(dataset):
        raise UsageError(f"stream ended after {len(dataset)} of {n} requested samples")
    return FeatureDataset(dataset.cut, dataset.values[:n].copy(), noisy=dataset.noisy[:n].copy())


def train_attack_vae(d_h: FeatureDataset, latent_dim: int = 16, epochs: int = 30, seed: int = 0,
                     kl_weight: float = 1.0, hidden: int = 256, lr: float = 1e-3,
                     batch_size: int = 64) -> AttackVae:
    if len(d_h) < MIN_SAMPLES_PER_LATENT * latent_dim:
        raise TrainingError(
            f"collected {len(d_h)} features; need at least {MIN_SAMPLES_PER_LATENT * latent_dim}"
            f" for latent_dim={latent_dim}")
    vae = GaussianVae(d_h.cut.d, latent_dim, hidden, kl_weight, seed)
    trace = vae.fit(d_h.values, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed + 1)
    mu = vae.encode(d_h.values).mu
    return AttackVae(vae, d_h.cut, mu.mean(axis=0), mu.std(axis=0), trace)


def sample_target_latent(attack: AttackVae, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if not attack.trained:
        raise UsageError("attack VAE has not been trained")
    shape = (attack.latent_dim,) if size is None else (size, attack.latent_dim)
    return attack.latent_mean + attack.latent_std * rng.standard_normal(shape)


def interpolate(z_o: np.ndarray, z_t: np.ndarray, nu: float) -> np.ndarray:
    return (1.0 - nu) * z_o + nu * z_t


def craft_adversarial(attack: AttackVae, h_o: FeatureVector, z_t: np.ndarray, nu: float) -> FeatureVector:
    if not 0.0 <= nu <= 1.0:
        raise UsageError(f"attack strength nu must lie in [0, 1], got {nu}")
    if len(h_o.values) != attack.cut.d:
        raise UsageError(f"feature length {len(h_o.values)} != attack cut d={attack.cut.d}")
    z_o = attack.vae.encode(h_o.values).mu[0]
    values = attack.vae.decode(interpolate(z_o, np.asarray(z_t), nu))[0]
    return FeatureVector(values, h_o.source_label, ADVERSARIAL, h_o.noisy)


def craft_batch(attack: AttackVae, benign: FeatureDataset, nu: float, rng: np.random.Generator) -> FeatureDataset:
    """Attack every sample of ``benign`` with a fresh target latent each."""
    if not 0.0 <= nu <= 1.0:
        raise UsageError(f"attack strength nu must lie in [0, 1], got {nu}")
    if benign.cut.d != attack.cut.d:
        raise UsageError(f"feature dimension {benign.cut.d} != attack cut d={attack.cut.d}")
    z_t = sample_target_latent(attack, rng, len(benign))
    z_o = attack.vae.encode(benign.values).mu
    values = attack.vae.decode(interpolate(z_o, z_t, nu))
    return benign.replace(values=values, adversarial=np.ones(len(benign), dtype=bool))


@dataclass
class AttackReport:
    rows: list  # dicts with nu, asr, mean_confidence, n

    @property
    def asr(self):
        return {r["nu"]: r["asr"] for r in self.rows}


def attack_success(tail: Tail, adversarial: FeatureDataset) -> tuple[float, float]:
    """ASR against ground truth and mean top-class confidence."""
    if np.any(adversarial.labels < 0):
        raise UsageError("every adversarial feature must carry its source label")
    if len(adversarial) == 0:
        raise UsageError("no adversarial features to evaluate")
    _, classes, conf = tail.predict(adversarial.values)
    return float(np.mean(classes != adversarial.labels)), float(np.mean(conf))


def evaluate_attack(tail: Tail, attack: AttackVae, benign: FeatureDataset, nus, seed: int = 0) -> AttackReport:
    rows = []
    for nu in sorted(nus):
        # same targets for every nu: rows differ only in attack strength
        rng = np.random.default_rng(seed)
        adv = craft_batch(attack, benign, nu, rng)
        asr, conf = attack_success(tail, adv)
        rows.append({"nu": float(nu), "asr": asr, "mean_confidence": conf, "n": len(adv)})
    return AttackReport(rows)
