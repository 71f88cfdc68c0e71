"""Few-step consistency sampling: denoise, clamp, re-noise, repeat, decode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterDictionary, query
from .data import substream
from .netcore import ModelParams, consistency_apply
from .schedule import NoiseSchedule, TimeGrid


def select_nfe_times(grid: TimeGrid, nfe: int) -> np.ndarray:
    """Sub-grid tau_1 < ... < tau_nfe = T at evenly spaced (floored) grid indices."""
    if not (1 <= nfe <= grid.N):
        raise ValueError(f"nfe must be in [1, {grid.N}], got {nfe}")
    if nfe == 1:
        return grid.times[-1:].copy()
    idx = (np.arange(nfe) * (grid.N - 1)) // (nfe - 1)
    return grid.times[idx].copy()


class CountingModel:
    """Wraps consistency_apply and counts network evaluations."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.calls = 0

    def __call__(self, x, t, cond, cluster_ref):
        self.calls += 1
        return consistency_apply(self.params, x, t, cond, cluster_ref)


@dataclass
class SampleResult:
    latents: np.ndarray  # (B, n*d), clamped to [-1, 1]
    nfe: int
    times: np.ndarray


def sample_latents(
    params: ModelParams,
    cond: np.ndarray,
    dictionary: ClusterDictionary | None,
    nfe: int,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    seed: int,
    reuse_noise: bool = False,
) -> SampleResult:
    """Multistep consistency sampling for a (B, d_c) batch of conditions."""
    if "out.w" not in params:
        raise ValueError("missing consistency-model parameters")
    cond = np.atleast_2d(np.asarray(cond, dtype=params["in.w"].dtype))
    B = cond.shape[0]
    D = params.config.in_dim
    taus = select_nfe_times(grid, nfe)
    rng = substream(seed, "sample")
    model = CountingModel(params)

    ref = None
    if dictionary is not None and params.config.cluster_dim:
        # one query per sampling run
        ref = query(cond, dictionary, params["cluster.aff_w"], params["cluster.aff_b"]).reshape(B, -1)

    x = rng.standard_normal((B, D)).astype(cond.dtype)
    z_fixed = rng.standard_normal((B, D)).astype(cond.dtype) if reuse_noise else None
    x_hat = np.clip(model(x, taus[-1], cond, ref), -1.0, 1.0)
    for tau in taus[-2::-1]:
        z = z_fixed if reuse_noise else rng.standard_normal((B, D)).astype(cond.dtype)
        x = schedule.alpha(tau) * x_hat + schedule.sigma(tau) * z
        x_hat = np.clip(model(x.astype(cond.dtype), tau, cond, ref), -1.0, 1.0)
    return SampleResult(x_hat.astype(np.float32), model.calls, taus)


def sample(
    params: ModelParams,
    codec_params: ModelParams,
    cond: np.ndarray,
    dictionary: ClusterDictionary | None,
    nfe: int,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    seed: int,
    frames,
    reuse_noise: bool = False,
):
    """Sample latents and decode them; returns ``(SampleResult, list of (F, J) arrays)``."""
    from .codec import decode_batch

    res = sample_latents(params, cond, dictionary, nfe, schedule, grid, seed, reuse_noise)
    frames = [int(f) for f in np.broadcast_to(frames, (res.latents.shape[0],))]
    return res, decode_batch(codec_params, res.latents, frames)
