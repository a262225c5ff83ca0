"""Bit-exact serialization of tokenizer artifacts and index streams.

Two container formats, both little-endian with a trailing CRC-64:

PVQT (weights): magic "PVQT", u32 version, u32 header_len, UTF-8 JSON
header describing geometry and blob layout, raw blob bytes, u64 CRC-64
of everything before the checksum.

PVQI (compressed tiles): magic "PVQI", u32 version, u32 codebook size,
u8 scale count, (u16 H, u16 W) per scale, u32 tile_count, then per tile
i32 x, i32 y and the per-scale u16 index grids in schedule order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import msvq
from .msvq import TokenMaps, Tokenizer, TokenizerConfig
from .tiles import FormatError, TileST

PVQT_MAGIC = b"PVQT"
PVQI_MAGIC = b"PVQI"
PVQT_VERSION = 1
PVQI_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42  # reflected ECMA-182


def _crc64_table() -> np.ndarray:
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table[i] = crc
    return table


_CRC_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = int(table[(crc ^ byte) & 0xFF]) ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# generic checked container
# ---------------------------------------------------------------------------


def write_container(path, header: dict, blobs: list) -> None:
    """blobs: list of (name, ndarray); layout is recorded in the header."""
    manifest = []
    payload = bytearray()
    for name, arr in blobs:
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.str.replace(">", "<"),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = dict(header, blobs=manifest)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = PVQT_MAGIC + struct.pack("<II", PVQT_VERSION, len(head)) + head + bytes(payload)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", crc64(body)))


def read_container(path):
    with open(path, "rb") as fh:
        body = fh.read()
    if len(body) < 20:
        raise FormatError("truncated container")
    stored = struct.unpack("<Q", body[-8:])[0]
    body = body[:-8]
    if crc64(body) != stored:
        raise FormatError("checksum mismatch")
    magic, version, header_len = struct.unpack("<4sII", body[:12])
    if magic != PVQT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != PVQT_VERSION:
        raise FormatError(f"unknown container version {version}")
    header = json.loads(body[12 : 12 + header_len].decode("utf-8"))
    payload = body[12 + header_len :]
    blobs = {}
    for item in header["blobs"]:
        raw = payload[item["offset"] : item["offset"] + item["nbytes"]]
        if len(raw) != item["nbytes"]:
            raise FormatError(f"blob {item['name']} truncated")
        arr = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"])
        blobs[item["name"]] = arr.copy()
    return header, blobs


# ---------------------------------------------------------------------------
# tokenizer artifacts
# ---------------------------------------------------------------------------


def save_tokenizer(path, tok: Tokenizer, fingerprint: dict | None = None) -> None:
    cfg = tok.cfg
    header = {
        "kind": "tokenizer",
        "dim": cfg.dim,
        "grid": cfg.grid,
        "code_dim": cfg.code_dim,
        "codebook_size": cfg.codebook_size,
        "enc_hidden": cfg.enc_hidden,
        "decoder": {"width": cfg.dec_width, "blocks": cfg.dec_blocks, "heads": cfg.dec_heads},
        "scales": list(cfg.scales),
        "beta": cfg.beta,
        "seed": tok.seed,
        "smoothers": {"kernel": 3, "learnable": [s is not None for s in tok.smoothers]},
        "adapter": None if tok.adapter is None else {"channels": list(tok.adapter.channels)},
        "fingerprint": fingerprint or {},
    }
    blobs = [(f"encoder.{k}", v) for k, v in tok.encoder.state_dict().items()]
    blobs.append(("codebook.vectors", tok.codebook.vectors.data))
    blobs.append(("codebook.ema", tok.codebook.ema))
    blobs += [(f"decoder.{k}", v) for k, v in tok.decoder.state_dict().items()]
    for k, conv in enumerate(tok.smoothers):
        if conv is not None:
            blobs += [(f"smoothers.{k}.{n}", v) for n, v in conv.state_dict().items()]
    if tok.adapter is not None:
        blobs += [(f"adapter.{k}", v) for k, v in tok.adapter.state_dict().items()]
    write_container(path, header, blobs)


def load_tokenizer(path) -> Tokenizer:
    header, blobs = read_container(path)
    if header.get("kind") != "tokenizer":
        raise FormatError(f"not a tokenizer artifact: kind={header.get('kind')!r}")
    cfg = TokenizerConfig(
        dim=header["dim"],
        grid=header["grid"],
        code_dim=header["code_dim"],
        codebook_size=header["codebook_size"],
        enc_hidden=header["enc_hidden"],
        dec_width=header["decoder"]["width"],
        dec_blocks=header["decoder"]["blocks"],
        dec_heads=header["decoder"]["heads"],
        scales=tuple(header["scales"]),
        beta=header["beta"],
    )
    tok = Tokenizer(cfg, seed=header["seed"])
    tok.encoder.load_state_dict(_sub(blobs, "encoder."))
    tok.codebook.vectors.data = blobs["codebook.vectors"].astype(np.float32)
    tok.codebook.ema = blobs["codebook.ema"].astype(np.float64)
    tok.decoder.load_state_dict(_sub(blobs, "decoder."))
    for k, conv in enumerate(tok.smoothers):
        if conv is not None:
            conv.load_state_dict(_sub(blobs, f"smoothers.{k}."))
    if header.get("adapter"):
        from .downstream import ConvAdapter

        tok.adapter = ConvAdapter(
            cfg.code_dim, tuple(header["adapter"]["channels"]), grid=cfg.grid, seed=tok.seed
        )
        tok.adapter.load_state_dict(_sub(blobs, "adapter."))
    tok.fingerprint = header.get("fingerprint", {})
    return tok


def _sub(blobs: dict, prefix: str) -> dict:
    return {k[len(prefix) :]: v for k, v in blobs.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# index streams
# ---------------------------------------------------------------------------


@dataclass
class IndexStream:
    """Quantized tiles: coordinates plus one u16 index grid per scale."""

    schedule: tuple
    codebook_size: int
    coords: np.ndarray  # (N, 2) int32
    maps: list  # per scale: (N, H, W) uint16

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        self.maps = [np.asarray(m, dtype=np.uint16) for m in self.maps]
        for m, (h, w) in zip(self.maps, self.schedule):
            if m.shape != (len(self.coords), h, w):
                raise FormatError(f"index map shape {m.shape} does not match scale ({h},{w})")
            if m.size and int(m.max()) >= self.codebook_size:
                raise FormatError("index exceeds codebook size")

    def __len__(self) -> int:
        return len(self.coords)

    def token_maps(self, sel=slice(None)) -> TokenMaps:
        return TokenMaps(maps=[m[sel] for m in self.maps], schedule=self.schedule)

    def tile_tokens(self) -> np.ndarray:
        return msvq.tile_tokens(self.token_maps())


def compress_tiles(tok: Tokenizer, tiles, batch_size: int = 256) -> IndexStream:
    """Quantize an iterable of tiles into an in-memory index stream."""
    coords, per_scale = [], [[] for _ in tok.cfg.schedule]
    batch = []

    def flush():
        if not batch:
            return
        maps = tok.encode_grids(np.stack([t.grid for t in batch]), update_usage=False)
        for store, m in zip(per_scale, maps.maps):
            store.append(m)
        coords.extend(t.coords for t in batch)
        batch.clear()

    for tile in tiles:
        if tile.grid.shape != (tok.cfg.grid, tok.cfg.grid, tok.cfg.dim):
            raise FormatError(
                f"tile shape {tile.grid.shape} does not match codec geometry"
            )
        batch.append(tile)
        if len(batch) >= batch_size:
            flush()
    flush()
    n = len(coords)
    maps = [
        np.concatenate(store) if store else np.zeros((0, h, w), dtype=np.uint16)
        for store, (h, w) in zip(per_scale, tok.cfg.schedule)
    ]
    return IndexStream(
        schedule=tok.cfg.schedule,
        codebook_size=tok.cfg.codebook_size,
        coords=np.array(coords, dtype=np.int32).reshape(n, 2),
        maps=maps,
    )


def decompress_tiles(tok: Tokenizer, stream: IndexStream, batch_size: int = 256):
    """Yield reconstructed TileST objects, bit-identical to in-memory decode."""
    if tuple(map(tuple, stream.schedule)) != tok.cfg.schedule:
        raise FormatError("stream schedule does not match codec schedule")
    if stream.codebook_size != tok.cfg.codebook_size:
        raise FormatError("stream codebook size does not match codec")
    for start in range(0, len(stream), batch_size):
        sel = slice(start, start + batch_size)
        recon = tok.decode_maps(stream.token_maps(sel))
        for i, grid in enumerate(recon):
            x, y = stream.coords[start + i]
            yield TileST(grid=grid, coords=(int(x), int(y)))


def write_index_stream(path, stream: IndexStream) -> None:
    with open(path, "wb") as fh:
        fh.write(PVQI_MAGIC)
        fh.write(struct.pack("<IIB", PVQI_VERSION, stream.codebook_size, len(stream.schedule)))
        for h, w in stream.schedule:
            fh.write(struct.pack("<HH", h, w))
        fh.write(struct.pack("<I", len(stream)))
        for i in range(len(stream)):
            fh.write(struct.pack("<ii", int(stream.coords[i, 0]), int(stream.coords[i, 1])))
            for m in stream.maps:
                fh.write(m[i].astype("<u2").tobytes())


def read_index_stream(path) -> IndexStream:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PVQI_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    version, csize, k = struct.unpack_from("<IIB", data, 4)
    if version != PVQI_VERSION:
        raise FormatError(f"unknown stream version {version}")
    off = 13
    schedule = []
    for _ in range(k):
        h, w = struct.unpack_from("<HH", data, off)
        schedule.append((h, w))
        off += 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    cells = sum(h * w for h, w in schedule)
    record = 8 + 2 * cells
    if len(data) - off != count * record:
        raise FormatError("truncated index stream")
    coords = np.zeros((count, 2), dtype=np.int32)
    maps = [np.zeros((count, h, w), dtype=np.uint16) for h, w in schedule]
    for i in range(count):
        coords[i] = struct.unpack_from("<ii", data, off)
        off += 8
        for m, (h, w) in zip(maps, schedule):
            m[i] = np.frombuffer(data, dtype="<u2", count=h * w, offset=off).reshape(h, w)
            off += 2 * h * w
    return IndexStream(
        schedule=tuple(schedule), codebook_size=csize, coords=coords, maps=maps
    )


# ---------------------------------------------------------------------------
# compression accounting
# ---------------------------------------------------------------------------

_DTYPE_BYTES = {"f32": 4, "f64": 8, "f16": 2}


@dataclass
class CompressionReport:
    dim_ratio: float
    byte_ratio: float
    raw_tile_bytes: int
    index_tile_bytes: int
    tile_token_region_bytes: int
    full_region_bytes: int


def compression_report(
    dim: int, grid: int, schedule, code_dim: int, dtype: str = "f32", region_tiles: int = 256
) -> CompressionReport:
    """Dimension and byte accounting for a codec geometry.

    `tile_token_region_bytes` covers storing one coarse token per tile of
    a region; `full_region_bytes` covers all scales for every tile.
    """
    if dtype not in _DTYPE_BYTES:
        raise ValueError(f"unknown dtype {dtype!r}")
    cells = sum(h * w for h, w in schedule)
    raw = grid * grid * dim * _DTYPE_BYTES[dtype]
    idx = cells * 2
    return CompressionReport(
        dim_ratio=dim / code_dim,
        byte_ratio=raw / idx,
        raw_tile_bytes=raw,
        index_tile_bytes=idx,
        tile_token_region_bytes=region_tiles * 2,
        full_region_bytes=region_tiles * idx,
    )
