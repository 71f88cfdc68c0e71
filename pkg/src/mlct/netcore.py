"""Dense residual backbone with long skips, plus optimizer and EMA utilities.

The backbone maps ``(x_t, t, condition, cluster_ref)`` to a raw prediction of
the same width as ``x_t``.  Layout::

    e      = time_mlp(sinusoid(t)) + cond_proj(c or null)
    h      = in_proj(x_t)
    block k: [h = skip_proj(concat(h, stash.pop()))]   (second half only)
             u = h + e + fuse_k(cluster_ref)
             h = u + W2 silu(W1 LN(u) + b1) + b2
             [stash.push(h)]                           (first half only)
    raw    = out_proj(LN(h))                           (zero-initialised)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .schedule import skip_coeffs

VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    in_dim: int
    width: int = 256
    blocks: int = 6
    temb_dim: int = 64
    cond_dim: int = 32
    cluster_dim: int = 0
    affine_dim: int = 64
    eta: float = 0.5


class ModelParams:
    """Named parameter arrays plus metadata."""

    def __init__(self, arrays: dict[str, np.ndarray], meta: dict | None = None):
        self.meta = dict(meta or {})
        self.arrays = {}
        self.flat = None
        self._pack(arrays)

    def _pack(self, arrays: dict[str, np.ndarray]) -> None:
        """Store all arrays as views into one contiguous buffer."""
        arrays = {k: np.asarray(v) for k, v in arrays.items()}
        dtype = np.result_type(*arrays.values()) if arrays else np.float32
        total = sum(v.size for v in arrays.values())
        self.flat = np.empty(total, dtype=dtype)
        off = 0
        for k, v in arrays.items():
            view = self.flat[off : off + v.size].reshape(v.shape)
            view[...] = v
            self.arrays[k] = view
            off += v.size

    def flat_view(self) -> np.ndarray:
        """The contiguous buffer, re-packed if an entry was replaced."""
        if any(v.base is not self.flat for v in self.arrays.values() if v.size):
            self._pack(dict(self.arrays))
        return self.flat

    def flatten(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(grads[k], dtype=self.flat.dtype).ravel() for k in self.arrays])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, self.meta)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.meta)

    def check_aligned(self, other: "ModelParams") -> None:
        if self.arrays.keys() != other.arrays.keys():
            raise ValueError("parameter sets have different names")
        for k, v in self.arrays.items():
            if v.shape != other.arrays[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {other.arrays[k].shape}")

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig(**self.meta["backbone"])


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_backbone(cfg: BackboneConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic seeded initialisation; the output layer starts at zero."""
    rng = np.random.default_rng(seed)
    W = cfg.width
    p: dict[str, np.ndarray] = {}
    p["time.w1"] = _dense(rng, cfg.temb_dim, W)
    p["time.b1"] = np.zeros(W)
    p["time.w2"] = _dense(rng, W, W)
    p["time.b2"] = np.zeros(W)
    p["cond.w"] = _dense(rng, cfg.cond_dim, W)
    p["cond.b"] = np.zeros(W)
    p["cond.null"] = np.zeros(cfg.cond_dim)
    p["in.w"] = _dense(rng, cfg.in_dim, W)
    p["in.b"] = np.zeros(W)
    half = cfg.blocks // 2
    for k in range(cfg.blocks):
        pre = f"block{k}."
        if k >= cfg.blocks - half:
            p[pre + "skip_w"] = _dense(rng, 2 * W, W)
            p[pre + "skip_b"] = np.zeros(W)
        p[pre + "ln_g"] = np.ones(W)
        p[pre + "ln_b"] = np.zeros(W)
        p[pre + "w1"] = _dense(rng, W, W)
        p[pre + "b1"] = np.zeros(W)
        # residual branches start small so depth does not blow up activations
        p[pre + "w2"] = _dense(rng, W, W, scale=1.0 / math.sqrt(cfg.blocks))
        p[pre + "b2"] = np.zeros(W)
        if cfg.cluster_dim:
            p[pre + "fuse_w"] = np.zeros((cfg.cluster_dim, W))
            p[pre + "fuse_b"] = np.zeros(W)
    if cfg.cluster_dim:
        p["cluster.aff_w"] = _dense(rng, cfg.cond_dim, cfg.affine_dim, scale=math.sqrt(cfg.affine_dim / cfg.cond_dim))
        p["cluster.aff_b"] = np.zeros(cfg.affine_dim)
    p["out.ln_g"] = np.ones(W)
    p["out.ln_b"] = np.zeros(W)
    p["out.w"] = np.zeros((W, cfg.in_dim))
    p["out.b"] = np.zeros(cfg.in_dim)
    arrays = {k: v.astype(dtype) for k, v in p.items()}
    return ModelParams(arrays, {"backbone": asdict(cfg), "init_seed": int(seed), "version": VERSION})


def bind(params: ModelParams, tape: ad.Tape, trainable: bool = True) -> dict[str, ad.Var]:
    """Expose ``params`` on ``tape`` as leaves (or constants when frozen)."""
    if trainable:
        return {k: tape.param(k, v) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


def time_embedding(t: np.ndarray, dim: int = 64, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of 1000*t, shape (batch, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


@dataclass
class ConditionEmbedding:
    """A condition vector, or the null condition when ``vector`` is None."""

    vector: np.ndarray | None
    label: int | None = None

    @property
    def is_null(self) -> bool:
        return self.vector is None

    @classmethod
    def null(cls) -> "ConditionEmbedding":
        return cls(None)


def _broadcast_rows(arr, batch: int, dtype) -> np.ndarray:
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim == 1 or (arr.ndim == 2 and arr.shape[0] == 1):
        arr = np.broadcast_to(arr.reshape(1, -1), (batch, arr.shape[-1]))
    return arr


def backbone_vars(
    P: dict[str, ad.Var],
    cfg: BackboneConfig,
    x_t,
    t,
    cond=None,
    null_mask=None,
    cluster_ref=None,
    fuse_mask=None,
):
    """Backbone on already-bound parameter vars.

    ``cond`` is (batch, cond_dim) or None (all rows null).  ``null_mask`` marks
    rows that use the learned null condition instead.  ``cluster_ref`` is a
    (batch, cluster_dim) array/Var; ``fuse_mask`` zeroes fusion on rows that
    must not receive it.
    """
    tape = P["in.w"].tape
    dtype = P["in.w"].value.dtype
    xv = x_t if isinstance(x_t, ad.Var) else tape.const(np.asarray(x_t, dtype=dtype))
    B = xv.value.shape[0]
    if xv.value.ndim != 2 or xv.value.shape[1] != cfg.in_dim:
        raise ValueError(f"x_t must have shape (batch, {cfg.in_dim}), got {xv.value.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    temb = tape.const(time_embedding(t, cfg.temb_dim, dtype))
    e = ad.linear(ad.silu(ad.linear(temb, P["time.w1"], P["time.b1"])), P["time.w2"], P["time.b2"])

    null_row = ad.reshape(P["cond.null"], (1, cfg.cond_dim))
    if cond is None:
        c = null_row
    else:
        cv = tape.const(_broadcast_rows(cond, B, dtype))
        if cv.value.shape != (B, cfg.cond_dim):
            raise ValueError(f"cond must have shape (batch, {cfg.cond_dim}), got {cv.value.shape}")
        if null_mask is None:
            c = cv
        else:
            m = np.asarray(null_mask, dtype=dtype).reshape(B, 1)
            c = cv * (1.0 - m) + null_row * m
    e = e + ad.linear(c, P["cond.w"], P["cond.b"])

    fuse = None
    if cluster_ref is not None:
        if not cfg.cluster_dim:
            raise ValueError("backbone was built without a cluster_dim")
        fuse = cluster_ref if isinstance(cluster_ref, ad.Var) else tape.const(_broadcast_rows(cluster_ref, B, dtype))
        if fuse.value.shape != (B, cfg.cluster_dim):
            raise ValueError(f"cluster_ref must have shape (batch, {cfg.cluster_dim}), got {fuse.value.shape}")
    fmask = None if fuse_mask is None else np.asarray(fuse_mask, dtype=dtype).reshape(B, 1)

    h = ad.linear(xv, P["in.w"], P["in.b"])
    half = cfg.blocks // 2
    stash = []
    for k in range(cfg.blocks):
        pre = f"block{k}."
        if k >= cfg.blocks - half:
            h = ad.linear(ad.concat([h, stash.pop()], axis=1), P[pre + "skip_w"], P[pre + "skip_b"])
        u = h + e
        if fuse is not None:
            f = ad.linear(fuse, P[pre + "fuse_w"], P[pre + "fuse_b"])
            u = u + (f if fmask is None else f * fmask)
        inner = ad.silu(ad.linear(ad.layer_norm(u, P[pre + "ln_g"], P[pre + "ln_b"]), P[pre + "w1"], P[pre + "b1"]))
        h = u + ad.linear(inner, P[pre + "w2"], P[pre + "b2"])
        if k < half:
            stash.append(h)
    return ad.linear(ad.layer_norm(h, P["out.ln_g"], P["out.ln_b"]), P["out.w"], P["out.b"])


def _cond_args(cond):
    if isinstance(cond, ConditionEmbedding):
        return (None, None) if cond.is_null else (cond.vector, None)
    return cond, None


def backbone_forward(params: ModelParams, x_t, t, cond=None, cluster_ref=None, trainable: bool = True):
    """Run the backbone and return ``(raw, tape)``.

    ``raw`` is a Var; call ``tape.grad(loss)`` after building a scalar loss
    from it.  With ``trainable=False`` nothing is recorded.
    """
    tape = ad.Tape()
    P = bind(params, tape, trainable)
    cvec, nmask = _cond_args(cond)
    raw = backbone_vars(P, params.config, x_t, t, cvec, nmask, cluster_ref)
    return raw, tape


def skip_combine(x_t, t, raw, eta: float = 0.5):
    """c_skip(t) x_t + c_out(t) raw, on Vars or arrays; ``t`` scalar or per-row."""
    c_skip, c_out = skip_coeffs(np.asarray(t, dtype=np.float64), eta)
    if np.ndim(c_skip):
        c_skip = np.asarray(c_skip).reshape(-1, 1)
        c_out = np.asarray(c_out).reshape(-1, 1)
    dtype = (raw.value if isinstance(raw, ad.Var) else np.asarray(raw)).dtype
    c_skip = np.asarray(c_skip, dtype=dtype)
    c_out = np.asarray(c_out, dtype=dtype)
    if isinstance(raw, ad.Var):
        return raw * c_out + x_t * c_skip if isinstance(x_t, ad.Var) else raw * c_out + np.asarray(x_t) * c_skip
    return c_skip * np.asarray(x_t) + c_out * raw


def consistency_apply(params: ModelParams, x_t, t, cond=None, cluster_ref=None) -> np.ndarray:
    """Skip-parameterised prediction of the clean latent (no gradient)."""
    x_t = np.asarray(x_t)
    raw, _ = backbone_forward(params, x_t.astype(params["in.w"].dtype, copy=False), t, cond, cluster_ref, trainable=False)
    return skip_combine(x_t, t, raw.value, params.config.eta)


class AdamW:
    """Decoupled-weight-decay Adam over the flat parameter buffer."""

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0
        self.last_grad_norm = float("nan")

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> ModelParams:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if np.shape(g) != params[name].shape:
                raise ValueError(f"gradient shape {np.shape(g)} does not match {name} {params[name].shape}")
        flat = params.flat_view()
        full = {k: grads.get(k, 0.0 * v) for k, v in params.items()}
        g = params.flatten(full)
        sq = float(np.dot(g.astype(np.float64), g.astype(np.float64)))
        if not math.isfinite(sq):
            bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
            raise FloatingPointError(f"non-finite gradient for {bad}; update rejected")
        self.last_grad_norm = math.sqrt(sq)
        if self.m is None or self.m.shape != flat.shape:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        m, v = self.m, self.v
        tmp = np.empty_like(flat)
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        if self.weight_decay:
            flat *= 1.0 - self.lr * self.weight_decay
        # lr * (m / bc1) / (sqrt(v / bc2) + eps), without temporaries
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(bc2)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / bc1
        flat -= tmp
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        if self.m is None:
            return {}
        return {"opt.m": self.m, "opt.v": self.v}

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.m = np.array(arrays["opt.m"]) if "opt.m" in arrays else None
        self.v = np.array(arrays["opt.v"]) if "opt.v" in arrays else None
        self.t = int(t)


def adamw_step(params: ModelParams, grads, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, state: AdamW | None = None):
    """One AdamW update; pass ``state`` to carry moments across calls."""
    opt = state if state is not None else AdamW(lr, betas, weight_decay=weight_decay)
    return opt.step(params, grads)


def ema_update(target: ModelParams, online: ModelParams, gamma: float) -> ModelParams:
    """target <- gamma * target + (1 - gamma) * online, in place."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    target.check_aligned(online)
    tf = target.flat_view()
    of = online.flat_view()
    if gamma == 0.0:
        tf[...] = of
    elif gamma != 1.0:
        tf *= gamma
        tf += (1.0 - gamma) * of
    return target


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
