"""Conditionally guided consistency training on frozen codec latents.

One step, per batch item:

    x_t     = alpha(t_i) x_eps + sigma(t_i) z
    x_phi   = clamp((1 + w) x_eps - w S(x_t, t_i, null), -1, 1)
    x_prev  = DPM-Solver++(1) step of x_t from t_i to t_{i-1} with x_phi
    loss    = d(S(x_t, t_i, c), sg[S_ema(x_prev, t_{i-1}, c)]) / (t_i - t_{i-1})
              + d(S(x_t, t_i, null), x_eps)

followed by AdamW on the online parameters and an EMA update of the target.
``d`` is the pseudo-Huber distance over the flattened latent.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import ClusterDictionary, query, query_vars
from .data import step_rng
from .netcore import AdamW, ModelParams, backbone_vars, bind, consistency_apply, ema_update, skip_combine
from .schedule import NoiseSchedule, TimeGrid, dpmpp_coeffs, karras_grid


@dataclass(frozen=True)
class TrainConfig:
    omega: float = 4.0
    gamma: float = 0.995
    epsilon: float = 0.002
    T: float = 1.0
    N: int = 50
    rho: float = 7.0
    lr: float = 1e-4
    steps: int = 20000
    batch: int = 64
    huber_c: float | None = None
    seed: int = 0
    use_cluster: bool = True

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.huber_c is not None and self.huber_c <= 0:
            raise ValueError("huber_c must be > 0")

    @property
    def grid(self) -> TimeGrid:
        return karras_grid(self.epsilon, self.T, self.N, self.rho)

    def huber(self, latent_dim: int) -> float:
        return self.huber_c if self.huber_c is not None else 0.00054 * math.sqrt(latent_dim)


def sample_adjacent_pair(grid: TimeGrid, rng: np.random.Generator) -> tuple[float, float]:
    """Uniform i in {2..N} (1-based); returns (t_i, t_{i-1})."""
    i = int(rng.integers(1, grid.N))
    return float(grid.times[i]), float(grid.times[i - 1])


def sample_adjacent_indices(grid: TimeGrid, rng: np.random.Generator, size: int) -> np.ndarray:
    """0-based upper indices of ``size`` adjacent pairs."""
    return rng.integers(1, grid.N, size=size)


def pseudo_huber(a, b, c: float) -> float:
    """sqrt(||a - b||^2 + c^2) - c."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if c <= 0:
        raise ValueError("c must be > 0")
    d2 = float(np.sum((a - b) ** 2))
    # stable form of sqrt(d2 + c^2) - c
    return d2 / (math.sqrt(d2 + c * c) + c)


def simulate_cfg_target(x_eps, x_t, t, omega: float, params_online: ModelParams | None = None, uncond=None):
    """clamp((1 + omega) x_eps - omega S(x_t, t, null), -1, 1).

    Pass ``uncond`` to reuse an already computed unconditional prediction.
    """
    x_eps = np.asarray(x_eps)
    if uncond is None:
        if params_online is None:
            raise ValueError("need params_online or a precomputed uncond prediction")
        uncond = consistency_apply(params_online, np.atleast_2d(x_t), t, None).reshape(np.shape(x_t))
    out = (1.0 + omega) * x_eps - omega * np.asarray(uncond)
    return np.clip(out, -1.0, 1.0).astype(x_eps.dtype, copy=False)


@dataclass
class StepBatch:
    """Everything random about one training step."""

    idx: np.ndarray
    pair: np.ndarray
    z: np.ndarray


def draw_batch(cfg: TrainConfig, grid: TimeGrid, n_items: int, latent_dim: int, step: int, dtype=np.float32) -> StepBatch:
    rng = step_rng(cfg.seed, "train.cm", step)
    B = min(cfg.batch, n_items) if n_items > 1 else cfg.batch
    idx = rng.integers(0, n_items, size=B)
    pair = sample_adjacent_indices(grid, rng, B)
    z = rng.standard_normal((B, latent_dim)).astype(dtype)
    return StepBatch(idx, pair, z)


def consistency_loss(
    online: ModelParams,
    target: ModelParams,
    x_eps: np.ndarray,
    cond: np.ndarray,
    t_i: np.ndarray,
    t_prev: np.ndarray,
    z: np.ndarray,
    schedule: NoiseSchedule,
    omega: float,
    huber_c: float,
    dictionary: ClusterDictionary | None = None,
    fixed_target: np.ndarray | None = None,
):
    """Build the two-term loss on a fresh tape.

    Returns ``(loss_var, tape, parts)`` where ``parts`` holds the per-term
    batch means and intermediate arrays useful for inspection.
    ``fixed_target`` replaces the stop-gradient target branch (for checks
    that perturb the online parameters).
    """
    cfg = online.config
    B, D = x_eps.shape
    dtype = online["in.w"].dtype
    al, sl = schedule.alpha_sigma(t_i)
    x_t = (al[:, None] * x_eps + sl[:, None] * z).astype(dtype)

    tape = ad.Tape()
    P = bind(online, tape, trainable=True)
    use_dict = dictionary is not None and cfg.cluster_dim > 0
    if use_dict:
        I = query_vars(cond, dictionary, P["cluster.aff_w"], P["cluster.aff_b"])
        cluster_ref = ad.concat([I, I], axis=0)
        fuse_mask = np.concatenate([np.ones(B), np.zeros(B)])
    else:
        cluster_ref = fuse_mask = None
    tt = np.concatenate([t_i, t_i])
    X = np.concatenate([x_t, x_t])
    null_mask = np.concatenate([np.zeros(B), np.ones(B)])
    raw = backbone_vars(P, cfg, X, tt, np.concatenate([cond, cond]), null_mask, cluster_ref, fuse_mask)
    S = skip_combine(X, tt, raw, cfg.eta)
    S_cond, S_unc = S[0:B], S[B : 2 * B]

    x_phi = simulate_cfg_target(x_eps, x_t, t_i, omega, uncond=S_unc.value)
    a, b = dpmpp_coeffs(t_i, t_prev, schedule)
    x_prev = (a[:, None] * x_t + b[:, None] * x_phi).astype(dtype)

    if fixed_target is not None:
        tgt = np.asarray(fixed_target, dtype=dtype)
    else:
        ref = None
        if use_dict:
            ref = query(cond, dictionary, target["cluster.aff_w"], target["cluster.aff_b"]).reshape(B, -1)
        tgt = consistency_apply(target, x_prev, t_prev, cond, ref).astype(dtype)

    w = (1.0 / (t_i - t_prev)).astype(dtype)
    cons_rows = ad.pseudo_huber_rows(S_cond - tgt, huber_c)
    unc_rows = ad.pseudo_huber_rows(S_unc - x_eps, huber_c)
    cons = ad.mean(cons_rows * w)
    unc = ad.mean(unc_rows)
    loss = cons + unc
    parts = {
        "consistency": float(cons.value),
        "uncond": float(unc.value),
        "x_t": x_t,
        "x_phi": x_phi,
        "x_prev": x_prev,
        "target": tgt,
    }
    return loss, tape, parts


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, step, cons, unc, gnorm, wall_ms):
        self.rows.append((step, cons, unc, gnorm, wall_ms))

    def column(self, name: str) -> np.ndarray:
        i = ["step", "consistency_loss", "uncond_loss", "grad_norm", "wall_ms"].index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path, append: bool = False) -> None:
        p = Path(path)
        new = not (append and p.exists())
        with p.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["step", "consistency_loss", "uncond_loss", "grad_norm"])
            # wall time stays in memory only so the file is reproducible byte for byte
            for r in self.rows:
                w.writerow([r[0], f"{r[1]:.8g}", f"{r[2]:.8g}", f"{r[3]:.8g}"])


class ConsistencyTrainer:
    """Owns the online/target parameters and optimizer for one training run."""

    def __init__(
        self,
        online: ModelParams,
        latents: np.ndarray,
        cond: np.ndarray,
        cfg: TrainConfig,
        schedule: NoiseSchedule,
        dictionary: ClusterDictionary | None = None,
        target: ModelParams | None = None,
        opt: AdamW | None = None,
    ):
        self.online = online
        self.target = online.copy() if target is None else target
        self.online.check_aligned(self.target)
        self.latents = np.asarray(latents, dtype=online["in.w"].dtype)
        self.cond = np.asarray(cond, dtype=online["in.w"].dtype)
        if len(self.latents) != len(self.cond) or len(self.latents) == 0:
            raise ValueError("latents and conditions must be aligned and non-empty")
        self.cfg = cfg
        self.schedule = schedule
        self.grid = cfg.grid
        self.dictionary = dictionary if cfg.use_cluster else None
        self.opt = opt if opt is not None else AdamW(cfg.lr)
        self.huber_c = cfg.huber(self.latents.shape[1])
        self.log = TrainLog()

    @property
    def step_count(self) -> int:
        return self.opt.t

    def loss_at(self, step: int):
        sb = draw_batch(self.cfg, self.grid, len(self.latents), self.latents.shape[1], step, self.latents.dtype)
        times = self.grid.times
        return consistency_loss(
            self.online,
            self.target,
            self.latents[sb.idx],
            self.cond[sb.idx],
            times[sb.pair],
            times[sb.pair - 1],
            sb.z,
            self.schedule,
            self.cfg.omega,
            self.huber_c,
            self.dictionary,
        )

    def step(self) -> dict:
        t0 = time.perf_counter()
        step = self.opt.t
        loss, tape, parts = self.loss_at(step)
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise FloatingPointError(
                f"consistency training diverged at step {step}: "
                f"consistency={parts['consistency']}, uncond={parts['uncond']}"
            )
        grads = tape.grad(loss)
        self.opt.step(self.online, grads)
        ema_update(self.target, self.online, self.cfg.gamma)
        gn = self.opt.last_grad_norm
        wall = (time.perf_counter() - t0) * 1e3
        self.log.append(step, parts["consistency"], parts["uncond"], gn, wall)
        return {"step": step, "consistency": parts["consistency"], "uncond": parts["uncond"], "grad_norm": gn}

    def train(self, steps: int | None = None, log_every: int = 0) -> TrainLog:
        end = self.cfg.steps if steps is None else self.opt.t + steps
        while self.opt.t < end:
            out = self.step()
            if log_every and (out["step"] + 1) % log_every == 0:
                c = self.log.column("consistency_loss")[-log_every:].mean()
                u = self.log.column("uncond_loss")[-log_every:].mean()
                print(f"cm step {out['step'] + 1}: consistency {c:.5f} uncond {u:.5f}")
        return self.log


def consistency_train_step(trainer: ConsistencyTrainer) -> dict:
    """One full update (loss, AdamW on online, EMA on target)."""
    return trainer.step()
