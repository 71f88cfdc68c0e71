"""Desk-scale analogues of the usual text-to-motion metrics.

All metrics work on per-sequence summary features: for each channel the
mean, the standard deviation and the mean absolute velocity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import substream


def summary_features(seqs) -> np.ndarray:
    """(num_seqs, 3*J) features; accepts arrays or MotionSequence objects."""
    out = []
    for s in seqs:
        x = np.asarray(getattr(s, "data", s), dtype=np.float64)
        out.append(np.concatenate([x.mean(axis=0), x.std(axis=0), np.abs(x).mean(axis=0)]))
    return np.asarray(out)


@dataclass
class FrechetResult:
    value: float
    ridge: bool

    def __float__(self):
        return self.value


def frechet_gaussian_distance(set_a, set_b, ridge: float = 1e-6) -> FrechetResult:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least {dim + 1} items per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    flagged = False
    if _degenerate(cov_a) or _degenerate(cov_b):
        cov_a = cov_a + ridge * np.eye(dim)
        cov_b = cov_b + ridge * np.eye(dim)
        flagged = True
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if not np.isfinite(covmean).all():
        off = ridge * np.eye(dim)
        covmean = linalg.sqrtm((cov_a + off) @ (cov_b + off))
        flagged = True
    covmean = np.real(covmean)
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return FrechetResult(max(val, 0.0), flagged)


def _degenerate(cov: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(cov)
    return bool(w.min() <= 1e-12 * max(1.0, w.max()))


def class_centroids(features: np.ndarray, labels) -> dict[int, np.ndarray]:
    labels = np.asarray(labels)
    return {int(c): features[labels == c].mean(axis=0) for c in np.unique(labels)}


def condition_accuracy(features: np.ndarray, labels, centroids: dict[int, np.ndarray]) -> float:
    """Fraction of samples whose nearest class centroid is their conditioning label."""
    labels = np.asarray(labels)
    unseen = set(np.unique(labels).tolist()) - set(centroids)
    if unseen:
        raise KeyError(f"labels without a reference centroid: {sorted(unseen)}")
    keys = np.array(sorted(centroids))
    C = np.stack([centroids[k] for k in keys])
    d2 = ((np.asarray(features)[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(keys[d2.argmin(axis=1)] == labels))


def diversity(features: np.ndarray, pairs: int = 10_000, seed: int = 0) -> float:
    """Mean distance between randomly drawn pairs of distinct samples."""
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        raise ValueError("diversity needs at least 2 samples")
    rng = substream(seed, "eval.pairs")
    i = rng.integers(0, len(f), size=pairs)
    j = (i + rng.integers(1, len(f), size=pairs)) % len(f)
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


def multimodality(features: np.ndarray, labels, pairs: int = 10_000, seed: int = 0) -> float:
    """Diversity restricted to samples sharing a condition, averaged over conditions."""
    labels = np.asarray(labels)
    vals = []
    for c in np.unique(labels):
        fc = np.asarray(features)[labels == c]
        if len(fc) < 2:
            raise ValueError(f"condition {c} has fewer than 2 repeats")
        vals.append(diversity(fc, pairs, seed + int(c)))
    return float(np.mean(vals))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def metric_record(metric: str, value: float, nfe: int | None, seed: int, cfg_hash: str, **extra) -> str:
    """One metric as a single-line JSON object (stable key order)."""
    rec = {"metric": metric, "value": float(value), "nfe": nfe, "seed": int(seed), "config_hash": cfg_hash}
    rec.update(extra)
    return json.dumps(rec, sort_keys=True)
