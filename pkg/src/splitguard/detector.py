"""Noise-aware detection of manipulated features at the edge.

An adVAE (encoder, generator and a Gaussian transformer) is fitted to benign,
possibly noisy, traffic. Every received vector is summarised by four numbers:

* ``re``  - squared reconstruction error ``||h - h_r||^2``
* ``ls``  - latent shift ``||mu - mu_T||`` between the encoder mean and the
  transformer's perturbed mean
* ``res_median`` / ``res_mad`` - median and median absolute deviation of the
  residual ``|h - h_r|``; both ignore sparse impulsive spikes

The noise-aware (NA) variant feeds all four to a one-class SVM, the
noise-unaware (NU) variant only ``(re, ls)``; the radius baseline thresholds
the distance of standardised ``(re, ls)`` from the benign centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import bundle_from_bytes, bundle_to_bytes
from .errors import TrainingError, UsageError
from .nn_core import LOG_SIGMA_MAX, LOG_SIGMA_MIN, Adam, kl_grads, kl_per_sample
from .ocsvm import OcSvmModel, train_ocsvm
from .split_runtime import FeatureDataset, FeatureVector
from .vae import GaussianVae

log = logging.getLogger(__name__)

DETECTOR_MAGIC = b"SSDT"
VARIANTS = ("NA", "NU", "radius")
FEATURE_NAMES = ("re", "ls", "res_median", "res_mad")
STD_FLOOR = 1e-9


class AdVae(GaussianVae):
    """VAE plus an elementwise affine Gaussian transformer on ``(mu, log_sigma)``.

    After every encoder/generator update the transformer takes one step on

        mean_i max(0, margin - ||G(z_i) - G(z_T,i)||^2 / d) + t_kl * KL(mu_T, sigma_T)

    with encoder and generator frozen: it looks for perturbed latents that stay
    near the prior yet decode measurably differently. The generator itself only
    ever reconstructs genuine latents.
    """

    def __init__(self, d, latent_dim=16, hidden=256, kl_weight=1.0, seed=0,
                 margin=None, transformer_kl=0.1, transformer_lr=1e-2):
        super().__init__(d, latent_dim, hidden, kl_weight, seed)
        self.t_scale_mu = np.ones(latent_dim)
        self.t_shift_mu = np.zeros(latent_dim)
        self.t_scale_ls = np.ones(latent_dim)
        self.t_shift_ls = np.zeros(latent_dim)
        self.margin = margin
        self.transformer_kl = float(transformer_kl)
        self.transformer_lr = float(transformer_lr)
        self._t_opt = None

    def transformer_params(self) -> dict[str, np.ndarray]:
        return {"t.scale_mu": self.t_scale_mu, "t.shift_mu": self.t_shift_mu,
                "t.scale_ls": self.t_scale_ls, "t.shift_ls": self.t_shift_ls}

    def transform(self, mu, log_sigma):
        mu_t = self.t_scale_mu * mu + self.t_shift_mu
        ls_t = np.clip(self.t_scale_ls * log_sigma + self.t_shift_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu_t, ls_t

    def transformer_loss_and_grads(self, mu, log_sigma, z, eps):
        """Transformer objective for fixed encoder outputs, genuine latents and noise."""
        n = len(mu)
        raw_ls_t = self.t_scale_ls * log_sigma + self.t_shift_ls
        mu_t, ls_t = self.transform(mu, log_sigma)
        sig_t = np.exp(ls_t)
        z_t = mu_t + sig_t * eps
        ref = self.decoder.forward(z)
        acts = self.decoder.forward_trace(z_t)
        diff = acts[-1] - ref
        gap = np.sum(diff ** 2, axis=1) / self.d
        active = gap < self.margin
        kl = kl_per_sample(mu_t, ls_t)
        loss = float(np.mean(np.where(active, self.margin - gap, 0.0) + self.transformer_kl * kl))

        g_out = -(2.0 / self.d) * diff * active[:, None] / n
        dz_t, _ = self.decoder.backward(acts, g_out)
        kmu, kls = kl_grads(mu_t, ls_t)
        dmu_t = dz_t + self.transformer_kl * kmu / n
        dls_t = (dz_t * sig_t * eps + self.transformer_kl * kls / n)
        dls_t *= (raw_ls_t >= LOG_SIGMA_MIN) & (raw_ls_t <= LOG_SIGMA_MAX)
        grads = {"t.scale_mu": (dmu_t * mu).sum(0), "t.shift_mu": dmu_t.sum(0),
                 "t.scale_ls": (dls_t * log_sigma).sum(0), "t.shift_ls": dls_t.sum(0)}
        return loss, grads

    def extra_step(self, h, cache, rng):
        if self.margin is None:
            self.margin = 1.0
        if self._t_opt is None:
            self._t_opt = Adam(lr=self.transformer_lr)
        eps = rng.standard_normal(cache["mu"].shape)
        loss, grads = self.transformer_loss_and_grads(cache["mu"], cache["log_sigma"], cache["z"], eps)
        if not np.isfinite(loss):
            raise TrainingError("transformer loss diverged")
        self._t_opt.step(self.transformer_params(), grads)
        return {"transformer": loss}

    def fit(self, data, epochs=30, batch_size=64, lr=1e-3, seed=0):
        if self.margin is None:
            # margin in per-coordinate squared units: the benign feature variance
            self.margin = float(np.mean(np.var(np.asarray(data), axis=0))) or 1.0
        return super().fit(data, epochs, batch_size, lr, seed)


@dataclass(frozen=True)
class DetectionFeatures:
    re: float
    ls: float
    res_median: float
    res_mad: float

    def as_array(self):
        return np.array([self.re, self.ls, self.res_median, self.res_mad])


def mad(x: np.ndarray, axis=-1) -> np.ndarray:
    """Median absolute deviation (unscaled); even lengths average the middle pair."""
    med = np.median(x, axis=axis, keepdims=True)
    return np.median(np.abs(x - med), axis=axis)


def feature_matrix(advae: AdVae, values: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """``(N, 4)`` matrix of ``(re, ls, res_median, res_mad)`` rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None]
    if values.shape[1] != advae.d:
        raise UsageError(f"detector expects feature dimension {advae.d}, got {values.shape[1]}")
    out = np.empty((len(values), 4))
    for s in range(0, len(values), batch_size):
        h = values[s:s + batch_size]
        head = advae.encode(h)
        resid = h - advae.decode(head.mu)
        mu_t, _ = advae.transform(head.mu, head.log_sigma)
        r = np.abs(resid)
        out[s:s + len(h), 0] = np.sum(resid ** 2, axis=1)
        out[s:s + len(h), 1] = np.linalg.norm(head.mu - mu_t, axis=1)
        out[s:s + len(h), 2] = np.median(r, axis=1)
        out[s:s + len(h), 3] = mad(r, axis=1)
    return out


def extract_features(advae: AdVae, h: FeatureVector) -> DetectionFeatures:
    if len(h.values) != advae.d:
        raise UsageError(f"detector expects feature dimension {advae.d}, got {len(h.values)}")
    return DetectionFeatures(*feature_matrix(advae, h.values)[0])


def baseline_features(advae: AdVae, h: FeatureVector) -> np.ndarray:
    """Noise-unaware projection ``(re, ls)``."""
    return extract_features(advae, h).as_array()[:2]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x) -> np.ndarray:
        if isinstance(x, DetectionFeatures):
            x = x.as_array()
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_standardizer(x) -> Standardizer:
    x = np.array([f.as_array() if isinstance(f, DetectionFeatures) else f for f in x], dtype=np.float64)
    if len(x) < 2:
        raise UsageError(f"need at least 2 samples to fit a standardizer, got {len(x)}")
    std = x.std(axis=0)
    if np.any(std < STD_FLOOR):
        log.warning("constant detection feature(s) %s; std floored at %g",
                    np.flatnonzero(std < STD_FLOOR).tolist(), STD_FLOOR)
    return Standardizer(x.mean(axis=0), np.maximum(std, STD_FLOOR))


@dataclass
class RadiusModel:
    center: np.ndarray
    radius: float

    def distance(self, x) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(x) - self.center, axis=1)


def fit_radius(x: np.ndarray, percentile: float = 95.0) -> RadiusModel:
    x = np.asarray(x, dtype=np.float64)
    center = x.mean(axis=0)
    radius = float(np.percentile(np.linalg.norm(x - center, axis=1), percentile))
    return RadiusModel(center, max(radius, STD_FLOOR))


def radius_classify(center, radius: float, point) -> str:
    if not radius > 0:
        raise UsageError(f"radius must be > 0, got {radius}")
    dist = float(np.linalg.norm(np.asarray(point, dtype=np.float64) - np.asarray(center)))
    return "anomalous" if dist > radius else "benign"


def classify(model: OcSvmModel, s: Standardizer, f) -> tuple[str, float]:
    """``("benign" | "anomalous", score)`` with score = -decision."""
    x = f.as_array() if isinstance(f, DetectionFeatures) else np.asarray(f, dtype=np.float64)
    x = x[:len(s.mean)]  # a 2-feature standardizer scores the (re, ls) projection
    decision = float(model.decision(s.apply(x))[0])
    return ("anomalous" if decision < 0 else "benign"), -decision


def train_advae(benign: FeatureDataset, latent_dim: int = 16, kl_weight: float = 1.0, epochs: int = 30,
                seed: int = 0, hidden: int = 256, lr: float = 1e-3, batch_size: int = 64) -> AdVae:
    if np.any(benign.adversarial):
        raise UsageError("detector training data contains adversarial-provenance samples")
    if len(benign) < 10 * latent_dim:
        raise TrainingError(f"need at least {10 * latent_dim} benign samples, got {len(benign)}")
    model = AdVae(benign.cut.d, latent_dim, hidden, kl_weight, seed)
    model.trace = model.fit(benign.values, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed + 1)
    return model


class Detector:
    """A trained adVAE with one scoring head (NA, NU or radius)."""

    def __init__(self, advae: AdVae, variant: str, standardizer: Standardizer,
                 svm: OcSvmModel | None = None, radius: RadiusModel | None = None, meta: dict | None = None):
        if variant not in VARIANTS:
            raise UsageError(f"unknown detector variant {variant!r}; expected one of {VARIANTS}")
        self.advae = advae
        self.variant = variant
        self.standardizer = standardizer
        self.svm = svm
        self.radius = radius
        self.meta = dict(meta or {})

    @property
    def n_features(self):
        return 4 if self.variant == "NA" else 2

    def project(self, feats: np.ndarray) -> np.ndarray:
        return self.standardizer.apply(feats[:, :self.n_features])

    def scores_from_features(self, feats: np.ndarray) -> np.ndarray:
        """Anomaly scores (higher = more anomalous) from a raw ``(N, 4)`` feature matrix."""
        x = self.project(feats)
        if self.variant == "radius":
            return self.radius.distance(x) - self.radius.radius
        return self.svm.score(x)

    def scores(self, values: np.ndarray) -> np.ndarray:
        return self.scores_from_features(feature_matrix(self.advae, values))

    def flags(self, values: np.ndarray) -> np.ndarray:
        """True where the sample is anomalous (and would be blocked)."""
        return self.scores(values) > 0

    def to_bytes(self) -> bytes:
        a = self.advae
        meta = dict(self.meta, variant=self.variant, d=a.d, latent_dim=a.latent_dim, hidden=a.hidden,
                    kl_weight=a.kl_weight, margin=a.margin, transformer_kl=a.transformer_kl)
        sections = {"meta": meta, "encoder": a.encoder, "decoder": a.decoder}
        sections.update({k: v for k, v in a.transformer_params().items()})
        sections["std.mean"] = self.standardizer.mean
        sections["std.std"] = self.standardizer.std
        if self.svm is not None:
            sections["svm.support"] = self.svm.support_vectors
            sections["svm.alpha"] = self.svm.alpha
            sections["svm.params"] = np.array([self.svm.rho, self.svm.gamma, self.svm.nu])
        if self.radius is not None:
            sections["radius.center"] = self.radius.center
            sections["radius.radius"] = np.array([self.radius.radius])
        return bundle_to_bytes(DETECTOR_MAGIC, sections)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Detector":
        s = bundle_from_bytes(DETECTOR_MAGIC, data)
        m = s["meta"]
        a = AdVae(m["d"], m["latent_dim"], m["hidden"], m["kl_weight"], margin=m["margin"],
                  transformer_kl=m["transformer_kl"])
        a.encoder, a.decoder = s["encoder"], s["decoder"]
        for k, v in a.transformer_params().items():
            v[...] = s[k]
        svm = radius = None
        if "svm.support" in s:
            rho, gamma, nu = s["svm.params"]
            svm = OcSvmModel(s["svm.support"], s["svm.alpha"], float(rho), float(gamma), float(nu))
        if "radius.center" in s:
            radius = RadiusModel(s["radius.center"], float(s["radius.radius"][0]))
        meta = {k: v for k, v in m.items() if k in ("cut", "noise")}
        return cls(a, m["variant"], Standardizer(s["std.mean"], s["std.std"]), svm, radius, meta)


def fit_detector(advae: AdVae, benign: FeatureDataset, variant: str = "NA", nu_svm: float = 0.05,
                 gamma: float | None = None, meta: dict | None = None,
                 features: np.ndarray | None = None) -> Detector:
    """Fit the scoring head of ``variant`` on benign training features."""
    if np.any(benign.adversarial):
        raise UsageError("detector training data contains adversarial-provenance samples")
    if variant not in VARIANTS:
        raise UsageError(f"unknown detector variant {variant!r}; expected one of {VARIANTS}")
    feats = feature_matrix(advae, benign.values) if features is None else features
    k = 4 if variant == "NA" else 2
    standardizer = fit_standardizer(feats[:, :k])
    x = standardizer.apply(feats[:, :k])
    meta = dict(meta or {}, cut=benign.cut.label)
    if variant == "radius":
        return Detector(advae, variant, standardizer, radius=fit_radius(x), meta=meta)
    return Detector(advae, variant, standardizer, svm=train_ocsvm(x, nu_svm, gamma), meta=meta)
