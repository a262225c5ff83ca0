"""Tile feature containers and the PVQF binary feature-dump format.

A PVQF file stores per-tile spatial token grids, optionally with a
summary vector per tile, all little-endian:

    magic  "PVQF" (4 bytes)
    u32    version (currently 1)
    u32    D   token dimension
    u32    p   grid side (p*p tokens per tile)
    u32    tile_count
    u8     has_cls
    per tile: i32 x, i32 y, (p*p [+1 if has_cls]) * D float32 payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

MAGIC = b"PVQF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")
_COORDS = struct.Struct("<ii")


class FormatError(ValueError):
    """Raised for malformed or inconsistent binary payloads."""


@dataclass
class TileST:
    """One tile's spatial tokens: a (p, p, D) grid plus optional summary."""

    grid: np.ndarray
    cls: Optional[np.ndarray] = None
    tile_id: str = ""
    coords: tuple = (0, 0)

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise FormatError(f"tile grid must be (p, p, D), got {self.grid.shape}")
        if self.cls is not None:
            self.cls = np.ascontiguousarray(self.cls, dtype=np.float32)
            if self.cls.shape != (self.grid.shape[2],):
                raise FormatError("cls length must match token dimension")

    @property
    def p(self) -> int:
        return self.grid.shape[0]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]

    def tokens(self) -> np.ndarray:
        """Flat (p*p, D) view of the spatial tokens."""
        return self.grid.reshape(-1, self.grid.shape[2])


def write_feature_file(path, tiles: Iterable[TileST], dim: int, p: int, has_cls: bool) -> int:
    """Stream tiles to a PVQF file; returns the number written."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, p, 0, int(has_cls)))
        for tile in tiles:
            if tile.grid.shape != (p, p, dim):
                raise FormatError(f"tile {tile.tile_id!r} shape {tile.grid.shape} != ({p},{p},{dim})")
            if has_cls != (tile.cls is not None):
                raise FormatError("has_cls flag inconsistent with tile contents")
            if not np.all(np.isfinite(tile.grid)):
                raise FormatError(f"tile {tile.tile_id!r} has non-finite tokens")
            fh.write(_COORDS.pack(int(tile.coords[0]), int(tile.coords[1])))
            fh.write(tile.grid.astype("<f4").tobytes())
            if has_cls:
                fh.write(tile.cls.astype("<f4").tobytes())
            count += 1
        fh.seek(16)
        fh.write(struct.pack("<I", count))
    return count


@dataclass
class FeatureFileInfo:
    dim: int
    p: int
    tile_count: int
    has_cls: bool
    payload_bytes: int = field(init=False)

    def __post_init__(self):
        per_vec = self.p * self.p + (1 if self.has_cls else 0)
        self.payload_bytes = _COORDS.size + per_vec * self.dim * 4


def read_header(fh) -> FeatureFileInfo:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated PVQF header")
    magic, version, dim, p, count, has_cls = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported PVQF version {version}")
    return FeatureFileInfo(dim=dim, p=p, tile_count=count, has_cls=bool(has_cls))


def read_feature_file(path) -> Iterator[TileST]:
    """Yield tiles from a PVQF file one at a time (constant memory)."""
    with open(path, "rb") as fh:
        info = read_header(fh)
        fh.seek(0, 2)
        expected = _HEADER.size + info.tile_count * info.payload_bytes
        if fh.tell() != expected:
            raise FormatError(
                f"payload length {fh.tell()} does not match header (expected {expected})"
            )
        fh.seek(_HEADER.size)
        vec_count = info.p * info.p + (1 if info.has_cls else 0)
        for i in range(info.tile_count):
            raw = fh.read(info.payload_bytes)
            if len(raw) < info.payload_bytes:
                raise FormatError(f"truncated payload at tile {i}")
            x, y = _COORDS.unpack_from(raw)
            vecs = np.frombuffer(raw, dtype="<f4", offset=_COORDS.size, count=vec_count * info.dim)
            vecs = vecs.reshape(vec_count, info.dim)
            grid = vecs[: info.p * info.p].reshape(info.p, info.p, info.dim)
            cls = vecs[info.p * info.p] if info.has_cls else None
            yield TileST(grid=grid.copy(), cls=None if cls is None else cls.copy(), coords=(x, y))


def probe_feature_file(path) -> FeatureFileInfo:
    with open(path, "rb") as fh:
        return read_header(fh)
