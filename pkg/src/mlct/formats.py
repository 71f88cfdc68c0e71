"""Binary containers: parameter checkpoints ("MLCK") and motion corpora ("MLCT").

Both are little-endian.  Checkpoint layout::

    b"MLCK" | u16 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 count | count x (u16 name_len | name | u8 dtype=0 (f32) | u8 ndim | ndim x u32)
    | raw f32 arrays in manifest order

Corpus layout::

    b"MLCT" | u16 version | u32 count
    | count x (u32 id | u16 label | u16 F | u16 J | F*J f32, row-major frames x channels)
    [ b"META" | u32 len | UTF-8 JSON ]      optional provenance trailer
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MLCK"
CORPUS_MAGIC = b"MLCT"
META_MAGIC = b"META"
CKPT_VERSION = 1
CORPUS_VERSION = 1


class FormatError(ValueError):
    pass


def _dump_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    mb = _dump_meta(meta or {})
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    names = list(arrays)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        a = arrays[name]
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", 0, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    for name in names:
        buf.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not an MLCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} not supported (expected {CKPT_VERSION})")
    off = 6
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype != 0:
            raise FormatError(f"unsupported dtype code {dtype} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        manifest.append((name, shape))
    arrays = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        arrays[name] = arr.astype(np.float32)
        off += 4 * n
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return arrays, meta


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(arrays, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return parse_checkpoint(p.read_bytes())


@dataclass
class MotionSequence:
    """F x J per-frame velocities with a class label."""

    data: np.ndarray
    label: int
    id: int = 0

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass
class Corpus:
    items: list[MotionSequence]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)


def corpus_bytes(corpus: Corpus | list[MotionSequence], meta: dict | None = None) -> bytes:
    items = corpus.items if isinstance(corpus, Corpus) else list(corpus)
    if meta is None and isinstance(corpus, Corpus):
        meta = corpus.meta
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(struct.pack("<HI", CORPUS_VERSION, len(items)))
    for it in items:
        F, J = it.data.shape
        buf.write(struct.pack("<IHHH", it.id, it.label, F, J))
        buf.write(np.ascontiguousarray(it.data, dtype="<f4").tobytes())
    if meta:
        mb = _dump_meta(meta)
        buf.write(META_MAGIC)
        buf.write(struct.pack("<I", len(mb)))
        buf.write(mb)
    return buf.getvalue()


def parse_corpus(data: bytes) -> Corpus:
    if data[:4] != CORPUS_MAGIC:
        raise FormatError("not an MLCT corpus (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CORPUS_VERSION:
        raise FormatError(f"corpus version {version} not supported (expected {CORPUS_VERSION})")
    off = 10
    items = []
    for _ in range(count):
        iid, label, F, J = struct.unpack_from("<IHHH", data, off)
        off += 10
        arr = np.frombuffer(data, dtype="<f4", count=F * J, offset=off).reshape(F, J).astype(np.float32)
        off += 4 * F * J
        items.append(MotionSequence(arr, int(label), int(iid)))
    meta = {}
    if off < len(data):
        if data[off : off + 4] != META_MAGIC:
            raise FormatError("unexpected trailing bytes in corpus")
        (mlen,) = struct.unpack_from("<I", data, off + 4)
        meta = json.loads(data[off + 8 : off + 8 + mlen].decode("utf-8"))
        off += 8 + mlen
        if off != len(data):
            raise FormatError("trailing bytes after corpus metadata")
    return Corpus(items, meta)


def save_corpus(path, corpus: Corpus, meta: dict | None = None) -> None:
    Path(path).write_bytes(corpus_bytes(corpus, meta))


def load_corpus(path) -> Corpus:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"corpus not found: {p}")
    return parse_corpus(p.read_bytes())
