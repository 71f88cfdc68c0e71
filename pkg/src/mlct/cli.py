"""Command-line surface: ``mlct <subcommand> ...``.

Typical flow::

    mlct gen-data    --out run/corpus.mlct
    mlct train-codec --corpus run/corpus.mlct --out run/codec.mlck
    mlct build-dict  --corpus run/corpus.mlct --codec run/codec.mlck --out run/dict.mlck
    mlct train-cm    --corpus run/corpus.mlct --codec run/codec.mlck --dict run/dict.mlck --out run/cm.mlck
    mlct sample      --cm run/cm.mlck --codec run/codec.mlck --nfe 4 --out run/samples.mlct
    mlct evaluate    --samples run/samples.mlct --corpus run/corpus.mlct --out run/metrics.jsonl

``mlct run --out DIR`` chains all of the above, and ``mlct ablate`` sweeps one
axis and writes one metric record per value.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .codec import latent, train_codec
from .data import class_embeddings, embed_labels, generate_corpus
from .formats import Corpus, FormatError, MotionSequence
from .metrics import diversity, metric_record, multimodality, summary_features
from .netcore import ModelParams
from .plots import loss_curves_svg, trajectories_svg
from .sampler import sample
from .store import (
    PrerequisiteError,
    VersionMismatch,
    load_baseline,
    load_cm,
    load_codec,
    load_dictionary,
    read_corpus,
    save_baseline,
    save_cm,
    save_codec,
    save_dictionary,
    write_corpus,
)
from .trainer import ConsistencyTrainer

ABLATION_AXES = ("omega", "level", "tokens", "k", "cluster", "quantize", "nfe", "gamma")


def load_config(args) -> pl.RunConfig:
    cfg = pl.RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise PrerequisiteError(f"missing config file: expected at {path.resolve()}")
        cfg = pl.parse_config_text(path.read_text(), cfg)
    updates = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ValueError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        updates[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("nfe", "nfe"), ("omega", "omega"), ("steps", "steps")):
        val = getattr(args, flag, None)
        if val is not None:
            updates[key] = str(val)
    if getattr(args, "reuse_noise", False):
        updates["reuse_noise"] = "true"
    return pl.apply_overrides(cfg, updates) if updates else cfg


def _write(path, data: bytes | str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        p.write_text(data)
    else:
        p.write_bytes(data)


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


# subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    over = {}
    for flag, key in (("classes", "classes"), ("items_per_class", "items_per_class"), ("frames_min", "frames_min"),
                      ("frames_max", "frames_max"), ("channels", "channels")):
        if getattr(args, flag) is not None:
            over[key] = str(getattr(args, flag))
    if args.seed is not None:
        # for data generation the root seed is the data seed
        over["data_seed"] = str(args.seed)
    cfg = pl.apply_overrides(cfg, over) if over else cfg
    corpus = generate_corpus(cfg.corpus_spec())
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(args.out, corpus, {"config_hash": cfg.hash, "seed": cfg.data_seed,
                                    "engine_version": cfg.provenance()["engine_version"]})
    _say(args, f"wrote {len(corpus)} sequences ({cfg.classes} classes) to {args.out}")
    return 0


def _prepared(cfg, corpus_path) -> pl.Prepared:
    return pl.prepare_corpus(cfg, read_corpus(corpus_path))


def cmd_train_codec(args) -> int:
    cfg = load_config(args)
    data = _prepared(cfg, args.corpus)
    params = opt = None
    if args.resume and Path(args.out).exists():
        params, opt, _ = load_codec(args.out)
    params, log = train_codec(data.train, cfg.codec_config(), params, opt, log_every=args.log_every)
    opt = log.opt
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_codec(args.out, params, opt, cfg.provenance())
    if args.log:
        rows = ["step,loss,grad_norm"] + [f"{s},{l:.8g},{g:.8g}" for s, l, g in zip(log.steps, log.loss, log.grad_norm)]
        _write(args.log, "\n".join(rows) + "\n")
    if args.plot:
        _write(args.plot, loss_curves_svg({"reconstruction": np.asarray(log.loss)}, np.asarray(log.steps),
                                          title="codec training loss"))
    _say(args, f"codec trained to step {opt.t}; final loss {np.mean(log.loss[-50:]):.5f}; saved {args.out}")
    return 0


def _latents(codec: ModelParams, data: pl.Prepared) -> np.ndarray:
    return latent(codec, data.train.items)


def cmd_build_dict(args) -> int:
    cfg = load_config(args)
    data = _prepared(cfg, args.corpus)
    codec, _, _ = load_codec(args.codec)
    d = pl.fit_dictionary(cfg, data, _latents(codec, data))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dictionary(args.out, d, cfg.provenance())
    _say(args, f"dictionary with K={d.K} clusters saved to {args.out}")
    return 0


def cmd_train_cm(args) -> int:
    cfg = load_config(args)
    data = _prepared(cfg, args.corpus)
    codec, _, _ = load_codec(args.codec)
    lat = _latents(codec, data)
    d = None
    if cfg.use_cluster:
        if not args.dict:
            raise PrerequisiteError("missing dictionary: pass --dict (or set use_cluster = false)")
        d, _ = load_dictionary(args.dict)
    cond = embed_labels(data.train.labels, data.embeddings)
    if args.resume and Path(args.out).exists():
        online, target, opt, _, _ = load_cm(args.out)
        opt.lr = cfg.lr
        tr = ConsistencyTrainer(online, lat, cond, cfg.train_config(), cfg.schedule(), d, target, opt)
        tr.train(log_every=args.log_every)
    else:
        tr = pl.fit_consistency(cfg, data, lat, d, log_every=args.log_every)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_cm(args.out, tr.online, tr.target, tr.opt, d, cfg.provenance(), {"lr": cfg.lr, "config": cfg.as_dict()})
    if args.log:
        tr.log.write_csv(args.log, append=bool(args.resume))
    if args.plot:
        _write(args.plot, loss_curves_svg({"consistency": tr.log.column("consistency_loss"),
                                           "unconditional": tr.log.column("uncond_loss")},
                                          tr.log.column("step"), title="consistency training"))
    _say(args, f"consistency model trained to step {tr.opt.t}; saved {args.out}")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = load_config(args)
    data = _prepared(cfg, args.corpus)
    codec, _, _ = load_codec(args.codec)
    params = pl.fit_baseline(cfg, data, _latents(codec, data), log_every=args.log_every)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_baseline(args.out, params, cfg.provenance())
    _say(args, f"baseline trained; saved {args.out}")
    return 0


def _sample_corpus(labels, seqs, meta) -> Corpus:
    items = [MotionSequence(np.asarray(s, dtype=np.float32), int(l), i) for i, (l, s) in enumerate(zip(labels, seqs))]
    return Corpus(items, meta)


def cmd_sample(args) -> int:
    cfg = load_config(args)
    _, target, _, d, meta = load_cm(args.cm)
    codec, _, _ = load_codec(args.codec)
    data_cfg = pl.apply_overrides(cfg, {k: str(v) for k, v in meta.get("config", {}).items()
                                        if k in ("classes", "cond_dim", "data_seed", "frames_min", "frames_max")})
    labels, frames = pl.sample_plan(data_cfg, cfg.seed)
    if args.per_class is not None:
        labels, frames = pl.sample_plan(dataclasses.replace(data_cfg, samples_per_class=args.per_class), cfg.seed)
    table = class_embeddings(data_cfg.classes, data_cfg.cond_dim, data_cfg.data_seed)
    cond = embed_labels(labels, table)
    res, seqs = sample(target, codec, cond, d if target.config.cluster_dim else None, cfg.nfe, cfg.schedule(),
                       cfg.train_config().grid, cfg.seed, frames, cfg.reuse_noise)
    meta_out = {"kind": "samples", "nfe": cfg.nfe, "nfe_count": res.nfe, **cfg.provenance()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(args.out, _sample_corpus(labels, seqs, meta_out), {})
    if args.plot:
        _write(args.plot, trajectories_svg(seqs, labels, title=f"samples, NFE {cfg.nfe}"))
    _say(args, f"{len(seqs)} samples at NFE {res.nfe} written to {args.out}")
    return 0


def cmd_sample_baseline(args) -> int:
    cfg = load_config(args)
    params, _ = load_baseline(args.baseline)
    codec, _, _ = load_codec(args.codec)
    data = _prepared(cfg, args.corpus)
    labels, seqs = pl.generate_baseline(cfg, data, params, codec, cfg.seed)
    meta_out = {"kind": "samples", "nfe": cfg.oracle_steps + 1, "nfe_count": cfg.oracle_steps + 1, **cfg.provenance()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(args.out, _sample_corpus(labels, seqs, meta_out), {})
    _say(args, f"{len(seqs)} baseline samples written to {args.out}")
    return 0


def evaluate_records(cfg: pl.RunConfig, data: pl.Prepared, samples: Corpus, **extra) -> list[str]:
    labels = samples.labels
    seqs = [it.data for it in samples]
    m = pl.evaluate_samples(cfg, data, labels, seqs)
    feats = summary_features(seqs)
    nfe = samples.meta.get("nfe_count")
    h = samples.meta.get("config_hash", cfg.hash)
    seed = samples.meta.get("seed", cfg.seed)
    recs = [
        metric_record("frechet", m["frechet"], nfe, seed, h, ridge=m["frechet_ridge"], **extra),
        metric_record("accuracy", m["accuracy"], nfe, seed, h, **extra),
        metric_record("diversity", diversity(feats, seed=seed), nfe, seed, h, **extra),
        metric_record("multimodality", multimodality(feats, labels, seed=seed), nfe, seed, h, **extra),
    ]
    return recs


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    data = _prepared(cfg, args.corpus)
    samples = read_corpus(args.samples, "sample file")
    recs = evaluate_records(cfg, data, samples)
    _write(args.out, "\n".join(recs) + "\n")
    for r in recs:
        _say(args, r)
    return 0


def _axis_update(axis: str, value: str) -> dict:
    key = {"cluster": "use_cluster"}.get(axis, axis)
    return {key: value}


def cmd_ablate(args) -> int:
    """Sweep one axis; everything not affected by the axis is trained once."""
    cfg = load_config(args)
    if args.axis not in ABLATION_AXES:
        raise ValueError(f"unknown axis {args.axis!r}; choose from {', '.join(ABLATION_AXES)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    corpus = read_corpus(args.corpus)
    codec_axes = {"level", "tokens", "quantize"}
    shared_codec = None
    if args.axis not in codec_axes:
        shared_codec = load_codec(args.codec)[0] if args.codec else pl.fit_codec(cfg, pl.prepare_corpus(cfg, corpus))
    lines = []
    shared_run = None
    for v in values:
        vcfg = pl.apply_overrides(cfg, _axis_update(args.axis, v))
        data = pl.prepare_corpus(vcfg, corpus)
        codec = shared_codec if shared_codec is not None else pl.fit_codec(vcfg, data)
        if args.axis == "nfe" and shared_run is not None:
            run = shared_run
        else:
            run = pl.run_consistency(vcfg, data, codec, nfes=(vcfg.nfe,))
            shared_run = run
        labels, seqs, res = pl.generate_consistency(vcfg, data, run.trainer.target, codec, run.dictionary,
                                                    vcfg.nfe, vcfg.seed)
        m = pl.evaluate_samples(vcfg, data, labels, seqs)
        rec = metric_record("frechet", m["frechet"], res.nfe, vcfg.seed, vcfg.hash, axis=args.axis, axis_value=v,
                            accuracy=m["accuracy"])
        lines.append(rec)
        _say(args, rec)
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_run(args) -> int:
    """Whole pipeline into one directory."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = ["--quiet"] if args.quiet else []
    common = base + (["--config", args.config] if args.config else []) + sum((["--set", s] for s in args.set or []), [])
    seed = ["--seed", str(args.seed)] if args.seed is not None else []
    c, k, d, m = (str(out / n) for n in ("corpus.mlct", "codec.mlck", "dict.mlck", "cm.mlck"))
    steps = [
        ["gen-data", "--out", c] + common,
        ["train-codec", "--corpus", c, "--out", k, "--log", str(out / "codec_log.csv"),
         "--plot", str(out / "codec_loss.svg")] + common + seed,
        ["build-dict", "--corpus", c, "--codec", k, "--out", d] + common + seed,
        ["train-cm", "--corpus", c, "--codec", k, "--dict", d, "--out", m, "--log", str(out / "cm_log.csv"),
         "--plot", str(out / "cm_loss.svg")] + common + seed,
    ]
    for nfe in args.nfes.split(","):
        s = str(out / f"samples_nfe{nfe}.mlct")
        steps.append(["sample", "--cm", m, "--codec", k, "--nfe", nfe, "--out", s,
                      "--plot", str(out / f"samples_nfe{nfe}.svg")] + common + seed)
        steps.append(["evaluate", "--samples", s, "--corpus", c, "--out", str(out / f"metrics_nfe{nfe}.jsonl")] + common + seed)
    for argv in steps:
        rc = main(argv)
        if rc:
            return rc
    return 0


# argument parsing ------------------------------------------------------------


def _common(p, seed=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlct", description="Latent consistency training for toy motion corpora.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic labelled corpus")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--items-per-class", type=int)
    p.add_argument("--frames-min", type=int)
    p.add_argument("--frames-max", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-codec", help="stage 1: train the quantized autoencoder")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--plot", help="SVG loss curve")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("build-dict", help="cluster condition embeddings into the guidance dictionary")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dict)

    p = sub.add_parser("train-cm", help="stage 2: guided consistency training")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--dict")
    p.add_argument("--omega", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--plot", help="SVG loss curves")
    p.add_argument("--resume", action="store_true", help="continue from --out up to the step budget")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_cm)

    p = sub.add_parser("train-baseline", help="conventional diffusion baseline on the same latents")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("sample", help="few-step sampling and decoding")
    _common(p)
    p.add_argument("--cm", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--nfe", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--reuse-noise", action="store_true", help="one fixed re-noise draw for every step")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="SVG of decoded trajectories")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sample-baseline", help="many-step PF-ODE sampling with the baseline")
    _common(p)
    p.add_argument("--baseline", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_baseline)

    p = sub.add_parser("evaluate", help="metric records for a sample file")
    _common(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one axis, one metric record per value")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", help="reuse this codec when the axis does not touch it")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="full pipeline into one directory")
    _common(p)
    p.add_argument("--nfes", default="1,4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PrerequisiteError, VersionMismatch, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
