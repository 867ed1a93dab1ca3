"""Frechet distance between Gaussian fits of classifier features.

The feature extractor is a classifier trained on the same data the GAN sees
(an ImageNet Inception network does not transfer to spectrograms), tapped at
the last convolutional stage after global average pooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import linalg


class FidError(Exception):
    pass


@dataclass
class GaussianStats:
    mu: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d), symmetric
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise FidError(f"need at least 2 samples for covariance, got {self.n}")
        if self.mu.shape[0] != self.cov.shape[0] or self.cov.shape[0] != self.cov.shape[1]:
            raise FidError("mean/covariance dimension mismatch")

    def save(self, base_path: Path) -> None:
        base = Path(base_path)
        np.concatenate([self.mu[None, :], self.cov]).astype("<f8").tofile(base.with_suffix(".f64"))
        base.with_suffix(".json").write_text(json.dumps({"d": len(self.mu), "n": self.n}))

    @classmethod
    def load(cls, base_path: Path) -> "GaussianStats":
        base = Path(base_path)
        header = json.loads(base.with_suffix(".json").read_text())
        d, n = header["d"], header["n"]
        raw = np.fromfile(base.with_suffix(".f64"), dtype="<f8").reshape(d + 1, d)
        return cls(mu=raw[0], cov=raw[1:], n=n)


def extract_features(values: np.ndarray, extractor: torch.nn.Module, batch_size: int = 64) -> np.ndarray:
    """Pooled feature vectors for a stack of spectrograms, shape (n, d).

    `extractor` must expose `features(x)` returning (batch, d) for input
    (batch, 1, 64, 64). Inference mode, so the output is order-independent.
    """
    values = np.asarray(values)
    if values.ndim != 3:
        raise FidError(f"expected (n, mels, frames) input, got shape {values.shape}")
    extractor.eval()
    rows = []
    with torch.no_grad():
        for i in range(0, len(values), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(values[i : i + batch_size], dtype=np.float32))
            rows.append(extractor.features(x.unsqueeze(1)).numpy())
    return np.concatenate(rows).astype(np.float64)


def gaussian_stats(feats: np.ndarray) -> GaussianStats:
    """Feature-wise mean and unbiased sample covariance, symmetrized."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise FidError(f"need a (n>=2, d) feature matrix, got shape {feats.shape}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mu=mu, cov=cov, n=feats.shape[0])


def fid(a: GaussianStats, b: GaussianStats, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 sqrt(C_a C_b)).

    The matrix square root of the covariance product is stabilized with a
    small diagonal jitter when it comes back non-finite or with substantial
    imaginary components.
    """
    if a.mu.shape != b.mu.shape:
        raise FidError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = a.mu - b.mu
    covmean = _sqrtm_product(a.cov, b.cov, eps)
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(covmean))
    if value < 0:
        if value < -1e-6:
            raise FidError(f"FID came out negative beyond tolerance: {value}")
        value = 0.0
    return value


def _sqrtm_product(ca: np.ndarray, cb: np.ndarray, eps: float) -> np.ndarray:
    covmean, _ = linalg.sqrtm(ca @ cb, disp=False)
    if not np.isfinite(covmean).all() or (
        np.iscomplexobj(covmean) and np.abs(covmean.imag).max() > 1e-3
    ):
        jitter = eps * np.eye(ca.shape[0])
        covmean, _ = linalg.sqrtm((ca + jitter) @ (cb + jitter), disp=False)
    if np.iscomplexobj(covmean):
        if np.abs(covmean.imag).max() > 1e-3:
            raise FidError(
                f"matrix square root has imaginary components up to {np.abs(covmean.imag).max():g}"
            )
        covmean = covmean.real
    if not np.isfinite(covmean).all():
        raise FidError("matrix square root failed to converge")
    return covmean


class FidEvaluator:
    """Scores generated spectrograms against fixed real-data statistics."""

    def __init__(self, extractor: torch.nn.Module, real_values: np.ndarray, batch_size: int = 64):
        self.extractor = extractor
        self.batch_size = batch_size
        self.real_stats = gaussian_stats(extract_features(real_values, extractor, batch_size))

    def __call__(self, values: np.ndarray, labels: np.ndarray | None = None) -> float:
        feats = extract_features(values, self.extractor, self.batch_size)
        return fid(self.real_stats, gaussian_stats(feats))
