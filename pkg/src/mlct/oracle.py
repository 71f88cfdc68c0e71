"""Reference machinery independent of the consistency model.

* ``exact_denoiser``: posterior mean E[x_0 | x_t] for a finite dataset.
* ``pf_ode_euler_sample``: many-step Euler integration of the probability
  flow ODE, uniform in log-SNR, driven by any x_0-predicting denoiser.
* ``train_score_baseline``: a conventionally trained conditional x_0
  predictor on the same latents and backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import step_rng, substream
from .netcore import AdamW, ModelParams, backbone_vars, bind, consistency_apply, skip_combine
from .schedule import NoiseSchedule, TimeGrid


def exact_denoiser(x_t, t: float, dataset, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior mean of x_0 given x_t under the empirical data distribution.

    ``x_t`` may be a single point (D,) or a batch (B, D).  At t=0 the nearest
    dataset point is returned.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if len(data) == 0:
        raise ValueError("empty dataset")
    data = data.reshape(len(data), -1)
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x).reshape(-1, data.shape[1]) if not single else x[None, :]
    if t == 0.0:
        d2 = ((x[:, None, :] - data[None, :, :]) ** 2).sum(axis=2)
        out = data[d2.argmin(axis=1)]
    else:
        a, s = schedule.alpha(t), schedule.sigma(t)
        d2 = ((x[:, None, :] - a * data[None, :, :]) ** 2).sum(axis=2)
        logw = -d2 / (2.0 * s * s)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        out = w @ data
    return out[0] if single else out


def denoiser_weights(x_t, t: float, dataset, schedule: NoiseSchedule) -> np.ndarray:
    data = np.asarray(dataset, dtype=np.float64).reshape(len(dataset), -1)
    x = np.asarray(x_t, dtype=np.float64).reshape(1, -1)
    a, s = schedule.alpha(t), schedule.sigma(t)
    logw = -((x - a * data) ** 2).sum(axis=1) / (2.0 * s * s)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def log_snr_times(schedule: NoiseSchedule, steps: int, epsilon: float = 0.002, T: float = 1.0) -> np.ndarray:
    """Decreasing times from T to epsilon, uniform in log-SNR."""
    lam = np.linspace(schedule.log_snr(T), schedule.log_snr(epsilon), steps + 1)
    ts = np.array([schedule.time_from_log_snr(l) for l in lam])
    ts[0], ts[-1] = T, epsilon
    return ts


def pf_ode_euler_sample(
    denoiser,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    shape=None,
    x_T: np.ndarray | None = None,
    epsilon: float = 0.002,
    T: float = 1.0,
    denoise_final: bool = True,
) -> np.ndarray:
    """Euler integration of dx/dt = f x - 1/2 g^2 score from T down to epsilon.

    The score comes from the denoiser: (alpha_t x0_hat - x_t) / sigma_t^2.
    With ``denoise_final`` the result is the denoiser's estimate at epsilon.
    """
    if steps < 10:
        raise ValueError("the oracle sampler needs at least 10 steps")
    if x_T is None:
        if shape is None:
            raise ValueError("need shape or x_T")
        x_T = substream(seed, "oracle.sample").standard_normal(shape)
    x = np.asarray(x_T, dtype=np.float64).copy()
    ts = log_snr_times(schedule, steps, epsilon, T)
    for t, t_next in zip(ts[:-1], ts[1:]):
        f, g2 = schedule.drift_diffusion(t)
        a, s = schedule.alpha(t), schedule.sigma(t)
        x0 = np.asarray(denoiser(x, t), dtype=np.float64)
        score = (a * x0 - x) / (s * s)
        x = x + (t_next - t) * (f * x - 0.5 * g2 * score)
    if denoise_final:
        x = np.asarray(denoiser(x, ts[-1]), dtype=np.float64)
    return x


@dataclass(frozen=True)
class BaselineConfig:
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 64
    seed: int = 0


def baseline_loss(params: ModelParams, x_eps, cond, t, z, schedule: NoiseSchedule):
    """Mean smooth-L1 between the x_0 prediction at (x_t, t) and x_0."""
    dtype = params["in.w"].dtype
    al, sl = schedule.alpha_sigma(t)
    x_t = (al[:, None] * x_eps + sl[:, None] * z).astype(dtype)
    tape = ad.Tape()
    P = bind(params, tape, True)
    raw = backbone_vars(P, params.config, x_t, t, cond)
    pred = skip_combine(x_t, t, raw, params.config.eta)
    return ad.mean(ad.smooth_l1(pred - x_eps)), tape


def train_score_baseline(params: ModelParams, latents, cond, grid: TimeGrid, schedule: NoiseSchedule,
                         cfg: BaselineConfig, opt: AdamW | None = None, log_every: int = 0):
    """Plain conditional x_0-prediction diffusion training at uniformly drawn grid times."""
    latents = np.asarray(latents, dtype=params["in.w"].dtype)
    cond = np.asarray(cond, dtype=params["in.w"].dtype)
    opt = opt if opt is not None else AdamW(cfg.lr)
    losses = []
    n = len(latents)
    while opt.t < cfg.steps:
        rng = step_rng(cfg.seed, "train.baseline", opt.t)
        idx = rng.integers(0, n, size=cfg.batch)
        t = grid.times[rng.integers(0, grid.N, size=cfg.batch)]
        z = rng.standard_normal((cfg.batch, latents.shape[1])).astype(latents.dtype)
        loss, tape = baseline_loss(params, latents[idx], cond[idx], t, z, schedule)
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise FloatingPointError(f"baseline training diverged at step {opt.t}")
        grads = tape.grad(loss)
        opt.step(params, grads)
        losses.append(lv)
        if log_every and len(losses) % log_every == 0:
            print(f"baseline step {opt.t}: loss {np.mean(losses[-log_every:]):.5f} |g| {opt.last_grad_norm:.3g}")
    return params, np.asarray(losses)


def network_denoiser(params: ModelParams, cond: np.ndarray):
    """Adapter turning a trained x_0 predictor into ``denoiser(x, t)``."""
    cond = np.asarray(cond, dtype=params["in.w"].dtype)

    def f(x, t):
        return consistency_apply(params, np.asarray(x, dtype=params["in.w"].dtype), t, cond).astype(np.float64)

    return f
