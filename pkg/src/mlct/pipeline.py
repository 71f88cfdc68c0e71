"""End-to-end experiment orchestration shared by the CLI, demos and tests."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .clustering import ClusterDictionary, build_dictionary, default_k
from .codec import CodecConfig, decode_batch, latent, train_codec
from .data import CorpusSpec, class_embeddings, embed_labels, generate_corpus, split_corpus, substream
from .formats import Corpus
from .metrics import class_centroids, condition_accuracy, config_hash, frechet_gaussian_distance, summary_features
from .netcore import BackboneConfig, ModelParams, init_backbone
from .oracle import BaselineConfig, network_denoiser, pf_ode_euler_sample, train_score_baseline
from .sampler import sample_latents
from .schedule import NoiseSchedule
from .trainer import ConsistencyTrainer, TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run; the CLI config file maps 1:1 onto these fields."""

    # corpus
    classes: int = 2
    items_per_class: int = 200
    frames_min: int = 24
    frames_max: int = 48
    channels: int = 4
    data_seed: int = 0
    noise: float = 0.02
    jitter: float = 0.05
    holdout: float = 0.2
    cond_dim: int = 32
    # codec
    tokens: int = 4
    token_dim: int = 16
    level: int = 256
    quantize: bool = True
    lambda_j: float = 1e-3
    codec_width: int = 128
    codec_steps: int = 3000
    codec_lr: float = 1e-3
    codec_batch: int = 32
    # schedule / grid
    beta0: float = 0.1
    beta1: float = 20.0
    epsilon: float = 0.002
    T: float = 1.0
    N: int = 50
    rho: float = 7.0
    # consistency model
    width: int = 256
    blocks: int = 6
    eta: float = 0.5
    omega: float = 4.0
    gamma: float = 0.995
    lr: float = 1e-4
    steps: int = 20000
    batch: int = 64
    huber_c: float = 0.0  # 0 selects 0.00054 * sqrt(n*d)
    use_cluster: bool = True
    k: int = 0  # 0 selects min(32, 4*classes, distinct embeddings)
    affine_dim: int = 64
    # baseline
    baseline_steps: int = 20000
    baseline_lr: float = 1e-4
    # sampling / evaluation
    nfe: int = 4
    samples_per_class: int = 500
    oracle_steps: int = 200
    reuse_noise: bool = False
    seed: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "engine_version": __version__}

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(self.classes, self.items_per_class, self.frames_min, self.frames_max,
                          self.channels, self.data_seed, self.noise, self.jitter)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(self.channels, self.tokens, self.token_dim, self.level, self.codec_width,
                           self.frames_min, self.frames_max, self.quantize, self.lambda_j,
                           self.codec_lr, self.codec_steps, self.codec_batch, self.seed)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta0, self.beta1)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.omega, self.gamma, self.epsilon, self.T, self.N, self.rho, self.lr,
                           self.steps, self.batch, self.huber_c or None, self.seed, self.use_cluster)

    def backbone_config(self, cluster: bool) -> BackboneConfig:
        D = self.tokens * self.token_dim
        return BackboneConfig(D, self.width, self.blocks, 64, self.cond_dim, D if cluster else 0,
                              self.affine_dim, self.eta)

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(self.baseline_lr, self.baseline_steps, self.batch, self.seed)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """key=value lines; '#' starts a comment; unknown keys are rejected."""
    base = base or RunConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        updates[key] = val
    return apply_overrides(base, updates, types)


def apply_overrides(base: RunConfig, updates: dict, types: dict | None = None) -> RunConfig:
    types = types or {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
    unknown = sorted(set(updates) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    conv = {}
    for k, v in updates.items():
        typ = types[k]
        if isinstance(v, str):
            if typ is bool:
                if v.lower() not in _BOOL:
                    raise ValueError(f"{k}: expected a boolean, got {v!r}")
                v = _BOOL[v.lower()]
            else:
                v = typ(v)
        conv[k] = typ(v)
    return dataclasses.replace(base, **conv)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


@dataclass
class Prepared:
    train: Corpus
    holdout: Corpus
    embeddings: np.ndarray  # (classes, cond_dim)


def prepare_data(cfg: RunConfig) -> Prepared:
    return prepare_corpus(cfg, generate_corpus(cfg.corpus_spec()))


def prepare_corpus(cfg: RunConfig, corpus: Corpus) -> Prepared:
    """Split a corpus and build its class embeddings.

    The corpus metadata (class count, data seed) wins over ``cfg`` so a file
    written by ``gen-data`` is always split and embedded the same way.
    """
    data_seed = int(corpus.meta.get("data_seed", cfg.data_seed))
    classes = int(corpus.meta.get("classes", int(corpus.labels.max()) + 1))
    train, hold = split_corpus(corpus, cfg.holdout, data_seed)
    return Prepared(train, hold, class_embeddings(classes, cfg.cond_dim, data_seed))


def fit_codec(cfg: RunConfig, data: Prepared, log_every: int = 0) -> ModelParams:
    params, _ = train_codec(data.train, cfg.codec_config(), log_every=log_every)
    return params


def fit_dictionary(cfg: RunConfig, data: Prepared, latents: np.ndarray) -> ClusterDictionary:
    emb = embed_labels(data.train.labels, data.embeddings)
    distinct = len(np.unique(emb, axis=0))
    k = cfg.k or default_k(cfg.classes, distinct)
    k = min(k, distinct)
    return build_dictionary(emb, latents.reshape(len(latents), cfg.tokens, cfg.token_dim), k, cfg.seed)


def fit_consistency(cfg: RunConfig, data: Prepared, latents: np.ndarray, dictionary: ClusterDictionary | None,
                    log_every: int = 0) -> ConsistencyTrainer:
    use = cfg.use_cluster and dictionary is not None
    init_seed = int(substream(cfg.seed, "init.cm").integers(2**31))
    online = init_backbone(cfg.backbone_config(use), init_seed)
    cond = embed_labels(data.train.labels, data.embeddings)
    tr = ConsistencyTrainer(online, latents, cond, cfg.train_config(), cfg.schedule(), dictionary if use else None)
    tr.train(log_every=log_every)
    return tr


def fit_baseline(cfg: RunConfig, data: Prepared, latents: np.ndarray, log_every: int = 0) -> ModelParams:
    init_seed = int(substream(cfg.seed, "init.baseline").integers(2**31))
    params = init_backbone(cfg.backbone_config(False), init_seed)
    cond = embed_labels(data.train.labels, data.embeddings)
    params, _ = train_score_baseline(params, latents, cond, cfg.train_config().grid, cfg.schedule(),
                                     cfg.baseline_config(), log_every=log_every)
    return params


def sample_plan(cfg: RunConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labels and frame counts for a generation run."""
    labels = np.repeat(np.arange(cfg.classes), cfg.samples_per_class)
    frames = substream(seed, "sample.frames").integers(cfg.frames_min, cfg.frames_max + 1, size=len(labels))
    return labels, frames


def generate_consistency(cfg: RunConfig, data: Prepared, params: ModelParams, codec: ModelParams,
                         dictionary: ClusterDictionary | None, nfe: int, seed: int):
    labels, frames = sample_plan(cfg, seed)
    cond = embed_labels(labels, data.embeddings)
    grid = cfg.train_config().grid
    res = sample_latents(params, cond, dictionary if params.config.cluster_dim else None, nfe, cfg.schedule(),
                         grid, seed, cfg.reuse_noise)
    return labels, decode_batch(codec, res.latents, frames), res


def generate_baseline(cfg: RunConfig, data: Prepared, params: ModelParams, codec: ModelParams, seed: int,
                      steps: int | None = None):
    labels, frames = sample_plan(cfg, seed)
    cond = embed_labels(labels, data.embeddings)
    den = network_denoiser(params, cond)
    x = pf_ode_euler_sample(den, cfg.schedule(), steps or cfg.oracle_steps, seed,
                            shape=(len(labels), cfg.tokens * cfg.token_dim), epsilon=cfg.epsilon, T=cfg.T)
    x = np.clip(x, -1.0, 1.0) if cfg.quantize else x
    return labels, decode_batch(codec, x, frames)


def evaluate_samples(cfg: RunConfig, data: Prepared, labels, seqs) -> dict:
    real = summary_features(data.holdout)
    gen = summary_features(seqs)
    cents = class_centroids(real, data.holdout.labels)
    fd = frechet_gaussian_distance(gen, real)
    return {"frechet": fd.value, "frechet_ridge": fd.ridge, "accuracy": condition_accuracy(gen, labels, cents)}


@dataclass
class RunResult:
    cfg: RunConfig
    codec: ModelParams
    dictionary: ClusterDictionary | None
    trainer: ConsistencyTrainer
    metrics: dict
    timings: dict


def run_consistency(cfg: RunConfig, data: Prepared | None = None, codec: ModelParams | None = None,
                    nfes=(1, 4), log_every: int = 0) -> RunResult:
    """Codec (unless given) -> dictionary -> consistency training -> sampling -> metrics."""
    timings = {}
    t0 = time.perf_counter()
    data = data or prepare_data(cfg)
    if codec is None:
        codec = fit_codec(cfg, data, log_every)
    timings["codec"] = time.perf_counter() - t0
    lat = latent(codec, data.train.items)
    t0 = time.perf_counter()
    dictionary = fit_dictionary(cfg, data, lat) if cfg.use_cluster else None
    tr = fit_consistency(cfg, data, lat, dictionary, log_every)
    timings["cm"] = time.perf_counter() - t0
    metrics = {}
    for nfe in nfes:
        labels, seqs, res = generate_consistency(cfg, data, tr.target, codec, dictionary, nfe, cfg.seed)
        m = evaluate_samples(cfg, data, labels, seqs)
        m["nfe_count"] = res.nfe
        metrics[nfe] = m
    return RunResult(cfg, codec, dictionary, tr, metrics, timings)
