"""Motion autoencoder with a bounded, quantized latent.

Encoder: per-frame MLP on (velocity, frame-position features), masked mean
pool over frames, then an MLP to an n x d pre-activation latent ``z_e``.
Quantizer: ``round(l * tanh(z_e)) / l`` with a straight-through gradient.
Decoder: latent -> context vector, added to a projection of each frame's
position features, then a per-frame MLP back to J channels.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import step_rng, substream
from .formats import Corpus, MotionSequence
from .netcore import AdamW, ModelParams

POS_FREQS = 4


@dataclass(frozen=True)
class CodecConfig:
    channels: int = 4
    tokens: int = 4
    token_dim: int = 16
    level: int = 256
    width: int = 128
    frames_min: int = 24
    frames_max: int = 48
    quantize: bool = True
    lambda_j: float = 1e-3
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 32
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.tokens * self.token_dim


def position_features(frames: int, dtype=np.float32) -> np.ndarray:
    """(frames, 1 + 2*POS_FREQS) features of the normalised frame centre."""
    u = (np.arange(frames) + 0.5) / frames
    k = np.arange(1, POS_FREQS + 1)
    ang = 2.0 * np.pi * u[:, None] * k[None, :]
    return np.concatenate([u[:, None], np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


POS_DIM = 1 + 2 * POS_FREQS


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_codec(cfg: CodecConfig, dtype=np.float32) -> ModelParams:
    rng = substream(cfg.seed, "init.codec")
    H, J, Z = cfg.width, cfg.channels, cfg.latent_dim
    p = {
        "enc.w1": _dense(rng, J + POS_DIM, H),
        "enc.b1": np.zeros(H),
        "enc.w2": _dense(rng, H, H),
        "enc.b2": np.zeros(H),
        "enc.w3": _dense(rng, H, H),
        "enc.b3": np.zeros(H),
        "enc.w4": _dense(rng, H, Z),
        "enc.b4": np.zeros(Z),
        "dec.w1": _dense(rng, Z, H),
        "dec.b1": np.zeros(H),
        "dec.wp": _dense(rng, POS_DIM, H),
        "dec.w2": _dense(rng, H, H),
        "dec.b2": np.zeros(H),
        "dec.w3": _dense(rng, H, H),
        "dec.b3": np.zeros(H),
        "dec.w4": _dense(rng, H, J) * 0.1,
        "dec.b4": np.zeros(J),
    }
    arrays = {k: v.astype(dtype) for k, v in p.items()}
    return ModelParams(arrays, {"codec": asdict(cfg), "version": 1})


def codec_config(params: ModelParams) -> CodecConfig:
    return CodecConfig(**params.meta["codec"])


def _pad(seqs: list[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack variable-length (F, J) arrays into (B, Fmax, J) plus mask and position features."""
    B = len(seqs)
    Fmax = max(s.shape[0] for s in seqs)
    J = seqs[0].shape[1]
    x = np.zeros((B, Fmax, J), dtype=dtype)
    mask = np.zeros((B, Fmax), dtype=dtype)
    pos = np.zeros((B, Fmax, POS_DIM), dtype=dtype)
    for i, s in enumerate(seqs):
        F = s.shape[0]
        x[i, :F] = s
        mask[i, :F] = 1.0
        pos[i, :F] = position_features(F, dtype)
    return x, mask, pos


def _encode_vars(P, x, mask, pos):
    B, Fmax, J = x.shape
    tape = P["enc.w1"].tape
    inp = tape.const(np.concatenate([x, pos], axis=2).reshape(B * Fmax, J + POS_DIM))
    h = ad.silu(ad.linear(inp, P["enc.w1"], P["enc.b1"]))
    h = ad.silu(ad.linear(h, P["enc.w2"], P["enc.b2"]))
    H = h.value.shape[1]
    h = ad.reshape(h, (B, Fmax, H)) * mask[:, :, None]
    pooled = ad.sum_(h, axis=1) * (1.0 / mask.sum(axis=1, keepdims=True))
    g = ad.silu(ad.linear(pooled, P["enc.w3"], P["enc.b3"]))
    return ad.linear(g, P["enc.w4"], P["enc.b4"])


def _decode_vars(P, z, pos):
    B, Fmax, _ = pos.shape
    tape = P["dec.w1"].tape
    ctx = ad.linear(z, P["dec.w1"], P["dec.b1"])
    pe = ad.linear(tape.const(pos.reshape(B * Fmax, POS_DIM)), P["dec.wp"])
    h = ad.silu(ad.expand_rows(ctx, Fmax) + pe)
    h = ad.silu(ad.linear(h, P["dec.w2"], P["dec.b2"]))
    h = ad.silu(ad.linear(h, P["dec.w3"], P["dec.b3"]))
    out = ad.linear(h, P["dec.w4"], P["dec.b4"])
    return ad.reshape(out, (B, Fmax, out.value.shape[1]))


def _bind(params: ModelParams, tape: ad.Tape, trainable: bool):
    if trainable:
        return {k: tape.param(k, v) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, MotionSequence) else np.asarray(x)


def encode_batch(params: ModelParams, seqs) -> np.ndarray:
    """(B, n*d) continuous pre-activation latents."""
    arrs = [_as_array(s) for s in seqs]
    for a in arrs:
        if a.ndim != 2 or a.shape[0] == 0:
            raise ValueError("cannot encode an empty sequence")
    dtype = params["enc.w1"].dtype
    x, mask, pos = _pad(arrs, dtype)
    tape = ad.Tape()
    return _encode_vars(_bind(params, tape, False), x, mask, pos).value


def encode(params: ModelParams, x) -> np.ndarray:
    """Continuous latent z_e of one sequence, shape (n, d)."""
    cfg = codec_config(params)
    return encode_batch(params, [x])[0].reshape(cfg.tokens, cfg.token_dim)


def quantize(z_e, level: int) -> np.ndarray:
    """round(level * tanh(z_e)) / level."""
    if level < 1:
        raise ValueError(f"quantization level must be >= 1, got {level}")
    z_e = np.asarray(z_e)
    out = np.round(level * np.tanh(z_e)) / level
    return out.astype(z_e.dtype, copy=False) if np.issubdtype(z_e.dtype, np.floating) else out


def latent(params: ModelParams, seqs) -> np.ndarray:
    """The latent the diffusion stage sees: quantized, or raw when quantization is off."""
    cfg = codec_config(params)
    z = encode_batch(params, seqs)
    return quantize(z, cfg.level) if cfg.quantize else z


def decode_batch(params: ModelParams, z: np.ndarray, frames) -> list[np.ndarray]:
    cfg = codec_config(params)
    z = np.asarray(z, dtype=params["dec.w1"].dtype).reshape(len(frames), cfg.latent_dim)
    for F in frames:
        if not (cfg.frames_min <= F <= cfg.frames_max):
            raise ValueError(f"frames={F} outside configured range [{cfg.frames_min}, {cfg.frames_max}]")
    dtype = params["dec.w1"].dtype
    Fmax = max(frames)
    pos = np.zeros((len(frames), Fmax, POS_DIM), dtype=dtype)
    for i, F in enumerate(frames):
        pos[i, :F] = position_features(F, dtype)
    tape = ad.Tape()
    out = _decode_vars(_bind(params, tape, False), tape.const(z), pos).value
    return [out[i, :F].copy() for i, F in enumerate(frames)]


def decode(params: ModelParams, z_m, frames: int) -> np.ndarray:
    """(frames, J) reconstruction from one latent."""
    return decode_batch(params, np.asarray(z_m).reshape(1, -1), [frames])[0]


def joint_transform(x: np.ndarray) -> np.ndarray:
    """Velocities -> positions by cumulative sum over frames."""
    return np.cumsum(np.asarray(x), axis=0)


def smooth_l1(diff: np.ndarray) -> np.ndarray:
    ad_ = np.abs(diff)
    return np.where(ad_ < 1.0, 0.5 * diff * diff, ad_ - 0.5)


def recon_loss(x: np.ndarray, x_hat: np.ndarray, lambda_j: float = 1e-3) -> float:
    """smoothL1(x, x_hat) + lambda_j * smoothL1(J(x), J(x_hat)), means over entries."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    loss = smooth_l1(x - x_hat).mean()
    if lambda_j:
        loss += lambda_j * smooth_l1(joint_transform(x) - joint_transform(x_hat)).mean()
    return float(loss)


def codec_loss_vars(P, cfg: CodecConfig, x, mask, pos):
    """Batch loss on the tape: per-item masked means, averaged over items."""
    z_e = _encode_vars(P, x, mask, pos)
    z = ad.ste_quantize(z_e, cfg.level) if cfg.quantize else z_e
    x_hat = _decode_vars(P, z, pos)
    m = mask[:, :, None]
    counts = mask.sum(axis=1) * x.shape[2]
    w = (1.0 / (counts * x.shape[0]))[:, None, None].astype(x.dtype)
    diff = x_hat - x
    loss = ad.sum_(ad.smooth_l1(diff) * (m * w))
    if cfg.lambda_j:
        jd = ad.cumsum(diff * m, axis=1)
        loss = loss + ad.sum_(ad.smooth_l1(jd) * (m * w * cfg.lambda_j))
    return loss


def _batch_indices(cfg: CodecConfig, n: int, step: int) -> np.ndarray:
    return step_rng(cfg.seed, "train.codec", step).integers(0, n, size=min(cfg.batch, n))


@dataclass
class CodecLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    opt: AdamW | None = field(default=None, repr=False)

    def epoch_curve(self, steps_per_epoch: int) -> list[float]:
        a = np.asarray(self.loss)
        n = len(a) // steps_per_epoch
        return [float(a[i * steps_per_epoch : (i + 1) * steps_per_epoch].mean()) for i in range(n)]


def train_codec(corpus: Corpus, cfg: CodecConfig, params: ModelParams | None = None,
                opt: AdamW | None = None, log_every: int = 0):
    """Stage-1 training: encode -> quantize -> decode -> loss -> AdamW."""
    items = list(corpus)
    if not items:
        raise ValueError("empty corpus")
    params = init_codec(cfg) if params is None else params
    opt = AdamW(cfg.lr) if opt is None else opt
    dtype = params["enc.w1"].dtype
    log = CodecLog(opt=opt)
    start = opt.t
    t0 = time.perf_counter()
    for step in range(start, cfg.steps):
        idx = _batch_indices(cfg, len(items), step)
        x, mask, pos = _pad([items[i].data for i in idx], dtype)
        tape = ad.Tape()
        P = _bind(params, tape, True)
        loss = codec_loss_vars(P, cfg, x, mask, pos)
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise FloatingPointError(f"codec training diverged at step {step}: loss={lv}")
        grads = tape.grad(loss)
        opt.step(params, grads)
        log.steps.append(step)
        log.loss.append(lv)
        log.grad_norm.append(opt.last_grad_norm)
        if log_every and (step + 1) % log_every == 0:
            print(f"codec step {step + 1}: loss {np.mean(log.loss[-log_every:]):.5f} "
                  f"({time.perf_counter() - t0:.1f}s)")
    return params, log


def codec_next_loss(params: ModelParams, opt: AdamW, corpus: Corpus, cfg: CodecConfig) -> float:
    """Loss of the step that training would run next (for resume checks)."""
    items = list(corpus)
    idx = _batch_indices(cfg, len(items), opt.t)
    x, mask, pos = _pad([items[i].data for i in idx], params["enc.w1"].dtype)
    tape = ad.Tape()
    return float(codec_loss_vars(_bind(params, tape, False), cfg, x, mask, pos).value)


def reconstruction_error(params: ModelParams, seqs, quantized: bool | None = None) -> float:
    """Mean per-frame smooth-L1 between sequences and their reconstructions."""
    cfg = codec_config(params)
    z = encode_batch(params, seqs)
    use_q = cfg.quantize if quantized is None else quantized
    if use_q:
        z = quantize(z, cfg.level)
    elif cfg.quantize:
        # bounded but not rounded: isolates the effect of the rounding step
        z = np.tanh(z)
    frames = [_as_array(s).shape[0] for s in seqs]
    recs = decode_batch(params, z, frames)
    return float(np.mean([smooth_l1(r - _as_array(s)).mean() for r, s in zip(recs, seqs)]))
