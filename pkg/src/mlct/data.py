"""Synthetic conditioned trajectory corpora and seeded random sub-streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .formats import Corpus, MotionSequence


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named purpose under one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def step_rng(seed: int, name: str, step: int) -> np.random.Generator:
    """Generator keyed by (seed, name, step) so training can resume mid-run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), int(step)]))


@dataclass(frozen=True)
class CorpusSpec:
    classes: int = 2
    items_per_class: int = 200
    frames_min: int = 24
    frames_max: int = 48
    channels: int = 4
    seed: int = 0
    noise: float = 0.02
    jitter: float = 0.05


def class_parameters(spec: CorpusSpec) -> dict[str, np.ndarray]:
    """Per-class (offset, amplitude, cycles, phase), each of shape (classes, channels)."""
    rng = substream(spec.seed, "data.classes")
    shape = (spec.classes, spec.channels)
    return {
        "offset": rng.uniform(-0.6, 0.6, shape),
        "amplitude": rng.uniform(0.2, 1.0, shape),
        "cycles": rng.integers(1, 4, shape).astype(np.float64),
        "phase": rng.uniform(0.0, 2.0 * np.pi, shape),
    }


def render(params: dict[str, np.ndarray], label: int, frames: int, rng: np.random.Generator | None, spec: CorpusSpec):
    """Velocities for one item; ``rng=None`` renders the noise-free class template."""
    off = params["offset"][label]
    amp = params["amplitude"][label]
    cyc = params["cycles"][label]
    ph = params["phase"][label]
    if rng is not None:
        J = spec.channels
        amp = amp * (1.0 + spec.jitter * rng.standard_normal(J))
        ph = ph + 2.0 * spec.jitter * rng.standard_normal(J)
        off = off + 0.5 * spec.jitter * rng.standard_normal(J)
    u = (np.arange(frames) + 0.5) / frames
    v = off[None, :] + amp[None, :] * np.sin(2.0 * np.pi * cyc[None, :] * u[:, None] + ph[None, :])
    if rng is not None:
        v = v + spec.noise * rng.standard_normal(v.shape)
    return v.astype(np.float32)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Balanced corpus: ``items_per_class`` items for each class, interleaved by class."""
    if spec.classes < 1 or spec.items_per_class < 1:
        raise ValueError("need at least one class and one item per class")
    if not (1 <= spec.frames_min <= spec.frames_max < 65536):
        raise ValueError(f"bad frame range [{spec.frames_min}, {spec.frames_max}]")
    params = class_parameters(spec)
    rng = substream(spec.seed, "data.items")
    items = []
    iid = 0
    for _ in range(spec.items_per_class):
        for c in range(spec.classes):
            F = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            items.append(MotionSequence(render(params, c, F, rng, spec), c, iid))
            iid += 1
    meta = {
        "kind": "corpus",
        "classes": spec.classes,
        "channels": spec.channels,
        "frames": [spec.frames_min, spec.frames_max],
        "data_seed": spec.seed,
    }
    return Corpus(items, meta)


def split_corpus(corpus: Corpus, holdout: float = 0.2, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Stratified train/held-out split."""
    rng = substream(seed, "data.split")
    labels = corpus.labels
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(holdout * len(idx)))
        test_idx.extend(idx[:k].tolist())
        train_idx.extend(idx[k:].tolist())
    train_idx.sort()
    test_idx.sort()
    return (
        Corpus([corpus.items[i] for i in train_idx], dict(corpus.meta, split="train")),
        Corpus([corpus.items[i] for i in test_idx], dict(corpus.meta, split="holdout")),
    )


def class_embeddings(classes: int, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Fixed unit vectors per class, a stand-in for a frozen text encoder."""
    rng = substream(seed, "data.text")
    e = rng.standard_normal((classes, dim))
    return (e / np.linalg.norm(e, axis=1, keepdims=True)).astype(np.float32)


def embed_labels(labels, table: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(table)):
        raise KeyError(f"label outside the known vocabulary of {len(table)} classes")
    return table[labels]
