"""PTNS binary tensor files.

Layout (little-endian)::

    b"PTNS0001"
    u8 dim | u8 n_levels | u8 dtype (0=f32, 1=u8 class index) | u8 flags (bit0 = sparse)
    per level:
        u32 x dim   resolution
        u32         channel count
        u64         payload length in bytes
        [sparse files only] u64 count, then count x u64 node indices;
                    count == 2**64 - 1 marks a dense level with no index list
        payload     node-major rows: f32 x channels, or one u8 per node

For dtype 1 the channel count is the number of classes and each payload byte
is a class index, 255 marking an invalid node. Invalid rows of f32 label
files are written as NaN.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import CATEGORICAL, SCALAR, FeaturePyramid, GridError, LabelMap, ResolutionSchedule

MAGIC = b"PTNS0001"
F32 = 0
U8_INDEX = 1
FLAG_SPARSE = 0x01
DENSE_LEVEL = 2**64 - 1
INVALID_CLASS = 255
_MAX_ELEMENTS = 2**40


class PTNSFormatError(ValueError):
    """Malformed PTNS data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class PTNSLevel:
    res: tuple
    data: np.ndarray  # (rows, channels) float32, or (rows,) uint8
    channels: int
    indices: np.ndarray | None = None


@dataclass
class PTNSFile:
    dim: int
    dtype: int
    levels: list

    @property
    def sparse(self) -> bool:
        return any(lv.indices is not None for lv in self.levels)


def encode(dim: int, dtype: int, levels: Sequence[PTNSLevel]) -> bytes:
    if dtype not in (F32, U8_INDEX):
        raise ValueError(f"unknown dtype {dtype}")
    if not 1 <= len(levels) <= 255:
        raise ValueError("PTNS holds 1..255 levels")
    sparse = any(lv.indices is not None for lv in levels)
    parts = [MAGIC, struct.pack("<BBBB", dim, len(levels), dtype, FLAG_SPARSE if sparse else 0)]
    for lv in levels:
        if len(lv.res) != dim:
            raise ValueError(f"resolution {lv.res} does not match dim {dim}")
        if dtype == F32:
            payload = np.ascontiguousarray(lv.data, dtype="<f4").reshape(-1, lv.channels)
        else:
            payload = np.ascontiguousarray(lv.data, dtype=np.uint8).reshape(-1)
        rows = payload.shape[0]
        parts.append(struct.pack(f"<{dim}I", *lv.res))
        parts.append(struct.pack("<IQ", lv.channels, payload.nbytes))
        if sparse:
            if lv.indices is None:
                if rows != math.prod(lv.res):
                    raise ValueError("dense level row count does not match its resolution")
                parts.append(struct.pack("<Q", DENSE_LEVEL))
            else:
                idx = np.ascontiguousarray(lv.indices, dtype="<u8")
                if idx.shape[0] != rows:
                    raise ValueError("sparse index count does not match row count")
                parts.append(struct.pack("<Q", idx.shape[0]))
                parts.append(idx.tobytes())
        elif rows != math.prod(lv.res):
            raise ValueError("dense level row count does not match its resolution")
        parts.append(payload.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.pos + size > len(self.buf):
            raise PTNSFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + size]
        self.pos += size
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> PTNSFile:
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if magic[:4] != MAGIC[:4]:
        raise PTNSFormatError(f"bad magic {magic!r}", 0)
    if magic != MAGIC:
        raise PTNSFormatError(f"unsupported version {magic[4:]!r}", 4)
    dim, n_levels, dtype, flags = r.unpack("<BBBB", "header")
    if dim not in (1, 2, 3):
        raise PTNSFormatError(f"dim {dim} not in 1..3", 8)
    if n_levels == 0:
        raise PTNSFormatError("file declares zero levels", 9)
    if dtype not in (F32, U8_INDEX):
        raise PTNSFormatError(f"unknown dtype {dtype}", 10)
    if flags & ~FLAG_SPARSE:
        raise PTNSFormatError(f"unknown flag bits {flags:#x}", 11)
    sparse = bool(flags & FLAG_SPARSE)
    levels = []
    for l in range(n_levels):
        start = r.pos
        res = r.unpack(f"<{dim}I", f"level {l + 1} resolution")
        channels, length = r.unpack("<IQ", f"level {l + 1} shape")
        p = math.prod(res)
        if p > _MAX_ELEMENTS or p * max(channels, 1) > _MAX_ELEMENTS:
            raise PTNSFormatError(f"level {l + 1} shape {res}x{channels} overflows", start)
        indices = None
        rows = p
        if sparse:
            (count,) = r.unpack("<Q", f"level {l + 1} sparse count")
            if count != DENSE_LEVEL:
                if count > p:
                    raise PTNSFormatError(f"level {l + 1}: {count} sparse nodes exceed grid size {p}", r.pos - 8)
                at = r.pos
                indices = np.frombuffer(r.take(8 * count, f"level {l + 1} sparse indices"), dtype="<u8")
                indices = indices.astype(np.int64)
                if count and (indices[-1] >= p or np.any(np.diff(indices) <= 0)):
                    raise PTNSFormatError(f"level {l + 1}: sparse indices not increasing within grid", at)
                rows = int(count)
        itemsize = 4 * channels if dtype == F32 else 1
        if length != rows * itemsize:
            raise PTNSFormatError(
                f"level {l + 1}: payload length {length} does not match {rows} rows", r.pos - (8 if sparse else 0)
            )
        at = r.pos
        raw = r.take(length, f"level {l + 1} payload")
        if dtype == F32:
            data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(rows, channels)
        else:
            data = np.frombuffer(raw, dtype=np.uint8).copy()
            bad = (data >= channels) & (data != INVALID_CLASS)
            if bad.any():
                raise PTNSFormatError(f"level {l + 1}: class index out of range", at + int(np.argmax(bad)))
        levels.append(PTNSLevel(tuple(res), data, channels, indices))
    if r.pos != len(buf):
        raise PTNSFormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return PTNSFile(dim, dtype, levels)


def write_ptns(path, dim: int, dtype: int, levels: Sequence[PTNSLevel]) -> int:
    data = encode(dim, dtype, levels)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


def read_ptns(path) -> PTNSFile:
    with open(path, "rb") as fh:
        return decode(fh.read())


# ---------------------------------------------------------------------------
# typed helpers
# ---------------------------------------------------------------------------

def pyramid_levels(pyr: FeaturePyramid) -> list:
    return [
        PTNSLevel(pyr.schedule.res(l), pyr.features(l), pyr.channels(l), pyr.sparse[l - 1])
        for l in range(1, pyr.n + 1)
    ]


def encode_pyramid(pyr: FeaturePyramid) -> bytes:
    return encode(pyr.dim, F32, pyramid_levels(pyr))


def write_pyramid(path, pyr: FeaturePyramid) -> int:
    return write_ptns(path, pyr.dim, F32, pyramid_levels(pyr))


def pyramid_from_file(f: PTNSFile) -> FeaturePyramid:
    if f.dtype != F32:
        raise PTNSFormatError("pyramid files must be f32", 10)
    schedule = ResolutionSchedule(f.dim, tuple(lv.res for lv in f.levels))
    try:
        return FeaturePyramid(schedule, tuple(lv.data for lv in f.levels), tuple(lv.indices for lv in f.levels))
    except GridError as exc:
        raise PTNSFormatError(str(exc), 0) from exc


def read_pyramid(path) -> FeaturePyramid:
    return pyramid_from_file(read_ptns(path))


def _label_level(labels: LabelMap, indices: np.ndarray | None):
    rows = slice(None) if indices is None else indices
    valid = labels.valid[rows]
    vals = labels.values[rows][valid]
    onehot = labels.kind == CATEGORICAL and labels.channels <= INVALID_CLASS and bool(
        np.all((vals == 0.0) | (vals == 1.0)) and np.all(vals.sum(axis=1) == 1.0)
    )
    if onehot:
        data = np.argmax(labels.values[rows], axis=1).astype(np.uint8)
        data[~valid] = INVALID_CLASS
        return U8_INDEX, PTNSLevel(labels.res, data, labels.channels, indices)
    data = np.array(labels.values[rows], dtype=np.float32)
    data[~valid] = np.nan
    return F32, PTNSLevel(labels.res, data, labels.channels, indices)


def encode_labels(labels: LabelMap, indices: np.ndarray | None = None) -> bytes:
    """Serialize a label map; with ``indices`` only those nodes are stored."""
    dtype, level = _label_level(labels, indices)
    return encode(len(labels.res), dtype, [level])


def write_labels(path, labels: LabelMap, indices: np.ndarray | None = None) -> int:
    dtype, level = _label_level(labels, indices)
    return write_ptns(path, len(labels.res), dtype, [level])


def labels_from_file(f: PTNSFile, kind: str | None = None) -> LabelMap:
    """Rebuild a label map. Sparse files come back full-size with unstored nodes invalid."""
    if len(f.levels) != 1:
        raise PTNSFormatError("label files hold exactly one level", 9)
    lv = f.levels[0]
    p = math.prod(lv.res)
    rows = np.arange(p) if lv.indices is None else lv.indices
    valid = np.zeros(p, dtype=bool)
    if f.dtype == U8_INDEX:
        values = np.zeros((p, lv.channels), dtype=np.float32)
        ok = lv.data != INVALID_CLASS
        values[rows[ok], lv.data[ok]] = 1.0
        valid[rows[ok]] = True
        return LabelMap(CATEGORICAL, lv.res, values, valid)
    values = np.zeros((p, lv.channels), dtype=np.float32)
    ok = ~np.isnan(lv.data).any(axis=1)
    values[rows[ok]] = lv.data[ok]
    valid[rows[ok]] = True
    return LabelMap(kind or SCALAR, lv.res, values, valid)


def read_labels(path, kind: str | None = None) -> LabelMap:
    return labels_from_file(read_ptns(path), kind)


def write_grid(path, grid: np.ndarray, dim: int) -> int:
    """Write a dense (res..., c) grid, e.g. a raw input, as a one-level file."""
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim == dim:
        grid = grid[..., None]
    level = PTNSLevel(tuple(grid.shape[:dim]), grid.reshape(-1, grid.shape[-1]), grid.shape[-1])
    return write_ptns(path, dim, F32, [level])


def read_grid(path) -> np.ndarray:
    f = read_ptns(path)
    if f.dtype != F32 or len(f.levels) != 1 or f.sparse:
        raise PTNSFormatError("expected a dense single-level f32 grid", 9)
    lv = f.levels[0]
    return lv.data.reshape(*lv.res, lv.channels)
