"""Fully connected Gaussian VAE over flattened feature vectors.

Shared by the attacker's VAE and the detector's adVAE. The encoder is a
two-layer MLP emitting ``(mu, log_sigma)``; ``log_sigma`` is clamped to
``[LOG_SIGMA_MIN, LOG_SIGMA_MAX]``. The per-sample loss is

    ||h - G(z)||^2 + kl_weight * KL(N(mu, sigma^2) || N(0, I))

averaged over the minibatch, with ``z`` drawn by reparameterisation.
"""

from __future__ import annotations

import numpy as np

from .errors import TrainingError, UsageError
from .nn_core import (LOG_SIGMA_MAX, LOG_SIGMA_MIN, Adam, Dense, GaussianHead, ReLU, Sequential,
                      kl_grads, kl_per_sample)


class GaussianVae:
    def __init__(self, d: int, latent_dim: int = 16, hidden: int = 256,
                 kl_weight: float = 1.0, seed: int = 0):
        self.d = int(d)
        self.latent_dim = int(latent_dim)
        self.hidden = int(hidden)
        self.kl_weight = float(kl_weight)
        rng = np.random.default_rng(seed)
        self.encoder = Sequential(
            [Dense(d, hidden), ReLU(), Dense(hidden, 2 * latent_dim)], (d,)).init_params(rng)
        self.decoder = Sequential(
            [Dense(latent_dim, hidden), ReLU(), Dense(hidden, d)], (latent_dim,)).init_params(rng)
        # small initial log_sigma keeps early samples close to the mean
        self.encoder.layers[2].weight[latent_dim:] *= 0.1

    def parameters(self) -> dict[str, np.ndarray]:
        p = {f"enc.{k}": v for k, v in self.encoder.parameters().items()}
        p.update({f"dec.{k}": v for k, v in self.decoder.parameters().items()})
        return p

    def _check(self, h):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim == 1:
            h = h[None]
        if h.shape[1] != self.d:
            raise UsageError(f"VAE expects feature dimension {self.d}, got {h.shape[1]}")
        return h

    def _split(self, out):
        raw_ls = out[:, self.latent_dim:]
        return out[:, :self.latent_dim], np.clip(raw_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX), raw_ls

    def encode(self, h) -> GaussianHead:
        mu, ls, _ = self._split(self.encoder.forward(self._check(h)))
        return GaussianHead(mu, ls)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return self.decoder.forward(z[None] if z.ndim == 1 else z)

    def reconstruct(self, h) -> np.ndarray:
        """Deterministic reconstruction through the encoder mean."""
        return self.decode(self.encode(h).mu)

    def loss_terms(self, h, eps):
        """Per-sample reconstruction and KL terms for a fixed noise draw."""
        head = self.encode(h)
        z = head.mu + np.exp(head.log_sigma) * eps
        rec = np.sum((self._check(h) - self.decode(z)) ** 2, axis=1)
        return rec, kl_per_sample(head.mu, head.log_sigma)

    def loss(self, h, eps) -> float:
        rec, kl = self.loss_terms(h, eps)
        return float(np.mean(rec + self.kl_weight * kl))

    def loss_and_grads(self, h, eps):
        """Minibatch loss, its ``(rec, kl)`` means, gradients, and forward cache."""
        h = self._check(h)
        n = len(h)
        enc_acts = self.encoder.forward_trace(h)
        mu, ls, raw_ls = self._split(enc_acts[-1])
        sigma = np.exp(ls)
        z = mu + sigma * eps
        dec_acts = self.decoder.forward_trace(z)
        resid = dec_acts[-1] - h
        rec = np.sum(resid ** 2, axis=1)
        kl = kl_per_sample(mu, ls)
        loss = float(np.mean(rec + self.kl_weight * kl))

        dz, dec_grads = self.decoder.backward(dec_acts, 2.0 * resid / n)
        kmu, kls = kl_grads(mu, ls)
        dmu = dz + self.kl_weight * kmu / n
        dls = dz * sigma * eps + self.kl_weight * kls / n
        dls *= (raw_ls >= LOG_SIGMA_MIN) & (raw_ls <= LOG_SIGMA_MAX)
        _, enc_grads = self.encoder.backward(enc_acts, np.concatenate([dmu, dls], axis=1))

        grads = {f"enc.{k}": v for k, v in enc_grads.items()}
        grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
        cache = {"mu": mu, "log_sigma": ls, "z": z, "recon": dec_acts[-1]}
        return loss, (float(rec.mean()), float(kl.mean())), grads, cache

    def extra_step(self, h, cache, rng) -> dict:
        """Hook for subclasses run after each VAE update; returns extra loss terms."""
        return {}

    def fit(self, data: np.ndarray, epochs: int = 30, batch_size: int = 64,
            lr: float = 1e-3, seed: int = 0) -> list[dict]:
        """Train with Adam; returns one ``{"epoch", "total", "rec"[, "kl"], ...}`` row per epoch."""
        data = self._check(data)
        rng = np.random.default_rng(seed)
        opt = Adam(lr=lr)
        params = self.parameters()
        trace = []
        for epoch in range(epochs):
            order = rng.permutation(len(data))
            sums = {}
            for start in range(0, len(order), batch_size):
                batch = data[order[start:start + batch_size]]
                eps = rng.standard_normal((len(batch), self.latent_dim))
                loss, (rec, kl), grads, cache = self.loss_and_grads(batch, eps)
                if not np.isfinite(loss):
                    raise TrainingError(f"VAE loss diverged at epoch {epoch}")
                opt.step(params, grads)
                terms = {"total": loss, "rec": rec}
                if self.kl_weight != 0:
                    terms["kl"] = kl
                terms.update(self.extra_step(batch, cache, rng))
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v * len(batch)
            row = {"epoch": epoch}
            row.update({k: v / len(data) for k, v in sums.items()})
            trace.append(row)
        return trace
