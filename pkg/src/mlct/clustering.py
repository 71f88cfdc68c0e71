"""Condition-keyed clustering dictionary and its similarity query.

Keys are k-means centroids of condition embeddings; each value is the mean
latent of the items assigned to that centroid.  A query projects the
condition and the keys through a shared affine map ``A``, takes a softmax
over their dot products, and returns the weighted mean of the values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import substream


@dataclass
class ClusterDictionary:
    keys: np.ndarray  # (K, d_c)
    values: np.ndarray  # (K, n, d_m)
    assignments: np.ndarray = field(default=None, repr=False)
    objective: list[float] = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.keys.shape[0]

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.reshape(self.K, -1)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"dict.keys": self.keys, "dict.values": self.values}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ClusterDictionary":
        return cls(np.asarray(arrays["dict.keys"]), np.asarray(arrays["dict.values"]))


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = _sqdist(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; pick any unused distinct point
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, labels, objective_history)``.  Empty clusters are
    re-seeded from the points farthest from their current centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = substream(seed, "cluster.kmeans")
    c = _kmeans_pp(x, k, rng)
    history = []
    labels = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        d2 = _sqdist(x, c)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new = c.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            far = np.argsort(-d2[np.arange(len(x)), labels], kind="stable")
            taken = set()
            for j, i in zip(empty, (i for i in far if tuple(x[i]) not in taken)):
                new[j] = x[i]
                taken.add(tuple(x[i]))
        shift = float(np.sqrt(((new - c) ** 2).sum(axis=1)).max())
        c = new
        if shift < tol and not len(empty):
            break
    d2 = _sqdist(x, c)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return c, labels, history


def build_dictionary(embeddings, latents, k: int, seed: int = 0) -> ClusterDictionary:
    """k-means over condition embeddings; values are member-mean latents."""
    emb = np.asarray(embeddings, dtype=np.float64)
    lat = np.asarray(latents, dtype=np.float64)
    if len(emb) != len(lat):
        raise ValueError(f"{len(emb)} embeddings but {len(lat)} latents")
    distinct = len(np.unique(emb, axis=0))
    if k < 1 or k > distinct:
        raise ValueError(f"k={k} must be in [1, {distinct}] (number of distinct embeddings)")
    centroids, labels, history = kmeans(emb, k, seed)
    # every surviving cluster must be non-empty; drop any that are not after the final assignment
    keep = [j for j in range(k) if np.any(labels == j)]
    if len(keep) < k:
        centroids = centroids[keep]
        remap = {j: i for i, j in enumerate(keep)}
        labels = np.array([remap[j] for j in labels])
        keys = np.array([emb[labels == i].mean(axis=0) for i in range(len(keep))])
    else:
        keys = centroids
    values = np.stack([lat[labels == i].mean(axis=0) for i in range(len(keys))])
    return ClusterDictionary(keys.astype(np.float32), values.astype(np.float32), labels, history)


def default_k(num_classes: int, distinct: int) -> int:
    return max(1, min(32, 4 * num_classes, distinct))


def similarity(q: np.ndarray, d: ClusterDictionary, aff_w: np.ndarray, aff_b: np.ndarray) -> np.ndarray:
    """rho = softmax(A(q) A(K)^T) for a (d_c,) or (B, d_c) query."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != d.keys.shape[1] or aff_w.shape[0] != q.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} vs keys {d.keys.shape[1]} / affine {aff_w.shape[0]}")
    aq = q @ aff_w + aff_b
    ak = d.keys.astype(np.float64) @ aff_w + aff_b
    logits = aq @ ak.T
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    rho = e / e.sum(axis=1, keepdims=True)
    return rho[0] if single else rho


def query(q: np.ndarray, d: ClusterDictionary, aff_w: np.ndarray, aff_b: np.ndarray) -> np.ndarray:
    """Clustering representation I = rho . V, shape (n, d_m) (or (B, n, d_m))."""
    rho = similarity(q, d, aff_w, aff_b)
    out = np.tensordot(rho, d.values.astype(np.float64), axes=([-1], [0]))
    return out


def query_vars(q: np.ndarray, d: ClusterDictionary, aff_w: ad.Var, aff_b: ad.Var) -> ad.Var:
    """Differentiable batch query: (B, d_c) -> (B, n*d_m) with gradients into A."""
    tape = aff_w.tape
    dtype = aff_w.value.dtype
    aq = ad.linear(tape.const(np.asarray(q, dtype=dtype)), aff_w, aff_b)
    ak = ad.linear(tape.const(d.keys.astype(dtype)), aff_w, aff_b)
    rho = ad.softmax(ad.matmul(aq, _transpose(ak)), axis=1)
    return ad.matmul(rho, tape.const(d.flat_values.astype(dtype)))


def _transpose(x: ad.Var) -> ad.Var:
    return x.tape._record(x.value.T, (x,), lambda g: (g.T,))


def fuse(block_input: np.ndarray, I: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """block_input + I W + b."""
    I = np.asarray(I).reshape(np.shape(block_input)[0] if np.ndim(block_input) > 1 else 1, -1)
    if I.shape[1] != w.shape[0] or w.shape[1] != np.shape(block_input)[-1]:
        raise ValueError(f"cannot fuse {I.shape} through {w.shape} into {np.shape(block_input)}")
    out = np.asarray(block_input) + I @ w + b
    return out.reshape(np.shape(block_input))
