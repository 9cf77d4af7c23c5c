"""Binary model checkpoints and item indexes.

All integers are unsigned little-endian, all reals IEEE-754 little-endian
float64, matrices row-major. A *string* is ``u32 byte_length`` followed by
UTF-8 bytes. The config hash is 64 ASCII bytes, NUL padded.

Checkpoint::

    magic "PRBCKPT\\0" | u32 version | hash[64] | u32 n
    2 x tower header:   string-table vocab (u32 count, strings)
                        u32 num_layers, per layer u32 out, u32 in, u32 act
                        (act 0 = identity, 1 = tanh)
    2 x tower weights:  per layer W[out*in], b[out]      (query tower first)
    temperature head:   w[n], bias, floor, ceiling
    u32 num_extra_heads, per head: string name, w[n], bias, floor, ceiling
                        (sorted by name)

Index::

    magic "PRBINDX\\0" | u32 version | hash[64] | u64 M | u32 n
    M strings (item ids) | E[M*n]
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Tuple

import numpy as np

from .data import DataError
from .model import ACTIVATIONS, BoundedHead, Layer, TowerParams, TwoTowerModel, Vocabulary
from .retrieval import ItemIndex

__all__ = ["FormatError", "save_model", "load_model", "save_index", "load_index",
           "CHECKPOINT_MAGIC", "INDEX_MAGIC", "VERSION"]

CHECKPOINT_MAGIC = b"PRBCKPT\0"
INDEX_MAGIC = b"PRBINDX\0"
VERSION = 1
HASH_BYTES = 64
F64 = np.dtype("<f8")


class FormatError(DataError):
    """File is not a valid checkpoint or index."""


class _Writer:
    def __init__(self, fh: BinaryIO):
        self.fh = fh

    def u32(self, v):
        self.fh.write(struct.pack("<I", v))

    def u64(self, v):
        self.fh.write(struct.pack("<Q", v))

    def string(self, s: str):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.fh.write(raw)

    def reals(self, a):
        self.fh.write(np.ascontiguousarray(a, dtype=F64).tobytes())

    def header(self, magic: bytes, config_hash: str):
        raw = config_hash.encode("ascii")
        if len(raw) > HASH_BYTES:
            raise ValueError("config hash longer than 64 bytes")
        self.fh.write(magic)
        self.u32(VERSION)
        self.fh.write(raw.ljust(HASH_BYTES, b"\0"))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what} at byte {self.pos}")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad UTF-8 in {self.what}: {exc}") from None

    def reals(self, *shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(count * 8), dtype=F64).astype(float)
        return arr.reshape(shape) if shape else arr[0]

    def header(self, magic: bytes) -> str:
        if self.take(len(magic)) != magic:
            raise FormatError(f"not a {self.what} file (bad magic)")
        version = self.u32()
        if version != VERSION:
            raise FormatError(f"unsupported {self.what} version {version}")
        return self.take(HASH_BYTES).rstrip(b"\0").decode("ascii", "replace")

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}")


def _read(path, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{what} file not found: {path}") from None


def _write_head(w: _Writer, head: BoundedHead):
    w.reals(head.weight)
    w.reals([float(head.bias), head.floor, head.ceiling])


def _read_head(r: _Reader, n: int) -> BoundedHead:
    weight = r.reals(n)
    bias, floor, ceiling = r.reals(3)
    try:
        return BoundedHead(weight, bias, floor, ceiling)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_model(model: TwoTowerModel, path, config_hash: str = "") -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        w = _Writer(fh)
        w.header(CHECKPOINT_MAGIC, config_hash)
        w.u32(model.dim)
        towers = [(model.query_tower, model.query_vocab), (model.item_tower, model.item_vocab)]
        for tower, vocab in towers:
            w.u32(len(vocab))
            for tok in vocab.tokens:
                w.string(tok)
            w.u32(len(tower.layers))
            for layer in tower.layers:
                out, inp = layer.weight.shape
                w.u32(out)
                w.u32(inp)
                w.u32(ACTIVATIONS.index(layer.activation))
        for tower, _ in towers:
            for layer in tower.layers:
                w.reals(layer.weight)
                w.reals(layer.bias)
        _write_head(w, model.temperature_head)
        w.u32(len(model.heads))
        for name in sorted(model.heads):
            w.string(name)
            _write_head(w, model.heads[name])
    return path


def load_model(path) -> Tuple[TwoTowerModel, str]:
    """Return ``(model, config_hash)``."""
    r = _Reader(_read(path, "checkpoint"), "checkpoint")
    config_hash = r.header(CHECKPOINT_MAGIC)
    n = r.u32()
    specs = []
    for _ in range(2):
        vocab = Vocabulary([r.string() for _ in range(r.u32())])
        shapes = []
        for _ in range(r.u32()):
            out, inp, act = r.u32(), r.u32(), r.u32()
            if act >= len(ACTIVATIONS):
                raise FormatError(f"unknown activation code {act}")
            shapes.append((out, inp, ACTIVATIONS[act]))
        specs.append((vocab, shapes))
    towers = []
    for vocab, shapes in specs:
        layers = [Layer(r.reals(out, inp), r.reals(out), act) for out, inp, act in shapes]
        towers.append(TowerParams(layers))
    temp = _read_head(r, n)
    heads = {}
    for _ in range(r.u32()):
        name = r.string()
        heads[name] = _read_head(r, n)
    r.finish()
    try:
        model = TwoTowerModel(towers[0], towers[1], temp, specs[0][0], specs[1][0], heads)
    except ValueError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from None
    return model, config_hash


def save_index(index: ItemIndex, path, config_hash: str = "") -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        w = _Writer(fh)
        w.header(INDEX_MAGIC, config_hash)
        w.u64(index.size)
        w.u32(index.dim)
        for iid in index.ids:
            w.string(str(iid))
        w.reals(index.embeddings)
    return path


def load_index(path) -> Tuple[ItemIndex, str]:
    """Return ``(index, config_hash)``."""
    r = _Reader(_read(path, "index"), "index")
    config_hash = r.header(INDEX_MAGIC)
    m, n = r.u64(), r.u32()
    ids = [r.string() for _ in range(m)]
    emb = r.reals(m, n)
    r.finish()
    try:
        return ItemIndex(emb, ids), config_hash
    except ValueError as exc:
        raise FormatError(f"inconsistent index: {exc}") from None
