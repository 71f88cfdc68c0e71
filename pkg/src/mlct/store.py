"""Artifact persistence on top of the MLCK/MLCT containers.

Every artifact carries ``config_hash``, ``seed`` and ``engine_version`` in its
metadata.  Loading checks the artifact kind and the engine version.
"""

from __future__ import annotations

from pathlib import Path

from . import __version__
from .clustering import ClusterDictionary
from .formats import Corpus, load_checkpoint, load_corpus, save_checkpoint, save_corpus
from .netcore import AdamW, ModelParams


class PrerequisiteError(FileNotFoundError):
    """An upstream artifact is missing; the message names the expected path."""


class VersionMismatch(ValueError):
    pass


def require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise PrerequisiteError(f"missing {what}: expected at {p.resolve()}")
    return p


def _check_meta(meta: dict, kind: str, path) -> None:
    if meta.get("kind") != kind:
        raise ValueError(f"{path} holds a {meta.get('kind')!r} artifact, expected {kind!r}")
    ver = meta.get("engine_version")
    if ver != __version__:
        raise VersionMismatch(f"{path} was written by engine {ver}, this is engine {__version__}")


def save_codec(path, params: ModelParams, opt: AdamW | None, provenance: dict) -> None:
    arrays = dict(params.arrays)
    if opt is not None:
        arrays.update(opt.state_arrays())
    meta = dict(params.meta, kind="codec", opt_step=opt.t if opt else 0, **provenance)
    save_checkpoint(path, arrays, meta)


def load_codec(path) -> tuple[ModelParams, AdamW, dict]:
    arrays, meta = load_checkpoint(require(path, "codec checkpoint"))
    _check_meta(meta, "codec", path)
    opt = AdamW(meta["codec"]["lr"])
    opt.load_state(arrays, meta.get("opt_step", 0))
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    keep = {k: meta[k] for k in ("codec", "version")}
    return ModelParams(params, keep), opt, meta


def save_dictionary(path, d: ClusterDictionary, provenance: dict) -> None:
    save_checkpoint(path, d.arrays(), dict(kind="dictionary", K=d.K, **provenance))


def load_dictionary(path) -> tuple[ClusterDictionary, dict]:
    arrays, meta = load_checkpoint(require(path, "dictionary"))
    _check_meta(meta, "dictionary", path)
    return ClusterDictionary.from_arrays(arrays), meta


def save_cm(path, online: ModelParams, target: ModelParams, opt: AdamW, dictionary: ClusterDictionary | None,
            provenance: dict, extra_meta: dict | None = None) -> None:
    arrays = {f"online.{k}": v for k, v in online.items()}
    arrays.update({f"target.{k}": v for k, v in target.items()})
    arrays.update(opt.state_arrays())
    if dictionary is not None:
        arrays.update(dictionary.arrays())
    meta = dict(online.meta, kind="cm", opt_step=opt.t, **(extra_meta or {}), **provenance)
    save_checkpoint(path, arrays, meta)


def load_cm(path):
    """Returns ``(online, target, opt, dictionary or None, meta)``."""
    arrays, meta = load_checkpoint(require(path, "consistency-model checkpoint"))
    _check_meta(meta, "cm", path)
    keep = {k: meta[k] for k in ("backbone", "init_seed", "version") if k in meta}
    online = ModelParams({k[7:]: v for k, v in arrays.items() if k.startswith("online.")}, keep)
    target = ModelParams({k[7:]: v for k, v in arrays.items() if k.startswith("target.")}, keep)
    opt = AdamW(meta.get("lr", 1e-4))
    opt.load_state(arrays, meta.get("opt_step", 0))
    d = ClusterDictionary.from_arrays(arrays) if "dict.keys" in arrays else None
    return online, target, opt, d, meta


def save_baseline(path, params: ModelParams, provenance: dict) -> None:
    save_checkpoint(path, dict(params.arrays), dict(params.meta, kind="baseline", **provenance))


def load_baseline(path) -> tuple[ModelParams, dict]:
    arrays, meta = load_checkpoint(require(path, "baseline checkpoint"))
    _check_meta(meta, "baseline", path)
    keep = {k: meta[k] for k in ("backbone", "init_seed", "version") if k in meta}
    return ModelParams(arrays, keep), meta


def write_corpus(path, corpus: Corpus, provenance: dict) -> None:
    save_corpus(path, corpus, dict(corpus.meta, **provenance))


def read_corpus(path, what: str = "corpus") -> Corpus:
    return load_corpus(require(path, what))

