"""Additive symmetric alpha-stable impulsive channel.

A noise variable ``N`` has characteristic function ``exp(-kappa * |u|**alpha)``
(symmetric, zero location). Draws use the Chambers-Mallows-Stuck construction;
with this parameterisation the per-draw scale is ``kappa ** (1 / alpha)``, so
``alpha = 2`` gives N(0, 2 * kappa) and ``alpha = 1`` a Cauchy of scale kappa.

Corruption is sparse: a selected sample has each coordinate hit independently
with probability ``p_b``; a batch selects exactly ``round(f_n * N)`` samples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError
from .split_runtime import FeatureDataset, FeatureVector

LEVELS = ("none", "light", "moderate", "severe", "extreme")


@dataclass(frozen=True)
class NoiseSpec:
    alpha: float = 2.0
    kappa: float = 1.0
    eta: float = 0.0  # skewness; only the symmetric case is generated
    delta: float = 0.0  # location; only zero location is generated
    p_b: float = 1.0
    f_n: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 2:
            raise ConfigurationError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not self.kappa > 0:
            raise ConfigurationError(f"kappa must be > 0, got {self.kappa}")
        if self.eta != 0 or self.delta != 0:
            raise ConfigurationError("only symmetric zero-location noise (eta = delta = 0) is supported")
        for name in ("p_b", "f_n"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")

    @property
    def scale(self) -> float:
        return self.kappa ** (1.0 / self.alpha)

    def characteristic_function(self, u):
        return np.exp(-self.kappa * np.abs(np.asarray(u, dtype=np.float64)) ** self.alpha)


# kappa is irrelevant for "none": f_n = 0 means nothing is ever corrupted
PRESETS = {
    "none": NoiseSpec(alpha=2.0, kappa=1.0, p_b=0.0, f_n=0.0),
    "light": NoiseSpec(alpha=1.8, kappa=0.01, p_b=0.005, f_n=0.15),
    "moderate": NoiseSpec(alpha=1.6, kappa=0.02, p_b=0.010, f_n=0.30),
    "severe": NoiseSpec(alpha=1.4, kappa=0.08, p_b=0.10, f_n=0.30),
    "extreme": NoiseSpec(alpha=1.2, kappa=0.12, p_b=0.15, f_n=0.50),
}


def preset(level: str, seed: int = 0) -> NoiseSpec:
    if level not in PRESETS:
        raise ConfigurationError(f"unknown noise level {level!r}; expected one of {'|'.join(LEVELS)}")
    return replace(PRESETS[level], seed=seed)


def sample_sas(spec: NoiseSpec, rng: np.random.Generator, size=None):
    """Symmetric alpha-stable draws (scalar when ``size`` is None)."""
    alpha = spec.alpha
    if not 0 < alpha <= 2:
        raise ConfigurationError(f"alpha must lie in (0, 2], got {alpha}")
    v = rng.uniform(-np.pi / 2, np.pi / 2, size)
    w = rng.exponential(1.0, size)
    if alpha == 1.0:
        x = np.tan(v)
    else:
        x = (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
             * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha))
    x = spec.scale * x
    return float(x) if size is None else x


def _corrupt_rows(values: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(values.shape) < spec.p_b
    out = values.copy()
    hits = int(mask.sum())
    if hits:
        out[mask] += sample_sas(spec, rng, hits)
    return out


def corrupt_sample(h: FeatureVector, spec: NoiseSpec, rng: np.random.Generator) -> FeatureVector:
    values = _corrupt_rows(np.asarray(h.values, dtype=np.float64)[None], spec, rng)[0]
    return FeatureVector(values, h.source_label, h.provenance, True)


def corrupt_batch(batch: FeatureDataset, spec: NoiseSpec, rng: np.random.Generator) -> FeatureDataset:
    """Send exactly ``round(f_n * N)`` uniformly chosen samples through the channel."""
    n = len(batch)
    k = int(np.floor(spec.f_n * n + 0.5))
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    values = batch.values.copy()
    noisy = np.zeros(n, dtype=bool)
    if k:
        values[chosen] = _corrupt_rows(values[chosen], spec, rng)
        noisy[chosen] = True
    return batch.replace(values=values, noisy=noisy)


def empirical_cf(samples: np.ndarray, u) -> np.ndarray:
    """Real part of the empirical characteristic function (imaginary part vanishes for SaS)."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    return np.cos(np.outer(u, samples)).mean(axis=1)
