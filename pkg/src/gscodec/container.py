"""The ``.cgs`` compact scene container.

Layout (all integers little-endian)::

    magic "CGSCENE1" | u32 version | u64 N | flags block
    u64 len | positions     N x 3 f16
    u64 len | opacities     N f16, or a quantized tensor under post-processing
    u64 len | scale codec   codebooks f32 + index stream
    u64 len | rotation codec
    u64 len | color field   hash tables + MLP weights (f16)
    u32 CRC32 of everything above
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import postproc
from .colorfield import ColorField, FieldConfig, HashGrid, Mlp, query_color
from .model import SH_C0, GaussianCloud
from .postproc import CorruptStreamError, QuantizedTensor
from .rvq import CorruptIndexError, RvqCodec, decode as rvq_decode

MAGIC = b"CGSCENE1"
VERSION = 1
BASELINE_FLOATS = 59
MASK_MODE_CODES = {"opacity_only": 0, "scale_only": 1, "both": 2, "none": 255}
_FLAGS = struct.Struct("<BBBBBHHBHBf")
_HEADER = struct.Struct("<8sIQ")
MIN_SCALE = 1e-8
CHANNELS = ("position", "opacity", "scale", "rotation", "color")


class DecodeError(ValueError):
    """Structured decode failure; ``kind`` is one of truncated, bad_magic,
    bad_version, checksum, index_range, corrupt."""

    def __init__(self, kind: str, message: str, offset: int | None = None):
        super().__init__(f"{kind}: {message}" + (f" (offset {offset})" if offset is not None else ""))
        self.kind = kind
        self.offset = offset


@dataclass(frozen=True)
class PostprocFlags:
    opacity: bool = True  # 8-bit min-max + Huffman
    indices: bool = True  # Huffman per R-VQ stage
    hash: bool = True  # prune + 8-bit per level + Huffman
    hash_threshold: float = 0.1

    @classmethod
    def off(cls) -> "PostprocFlags":
        return cls(False, False, False)

    @classmethod
    def coerce(cls, pp) -> "PostprocFlags":
        if isinstance(pp, cls):
            return pp
        return cls() if pp else cls.off()

    @property
    def bits(self) -> int:
        return int(self.opacity) | int(self.indices) << 1 | int(self.hash) << 2

    @property
    def any(self) -> bool:
        return bool(self.bits)


@dataclass
class CompactScene:
    """Decoded (or about-to-be-encoded) compact scene."""

    positions: np.ndarray
    opacities: np.ndarray
    scale_codec: RvqCodec
    scale_indices: np.ndarray
    rotation_codec: RvqCodec
    rotation_indices: np.ndarray
    field: ColorField
    pp: PostprocFlags = field(default_factory=PostprocFlags.off)
    mask_mode: str = "both"
    scale_domain: str = "linear"

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        s = rvq_decode(self.scale_indices, self.scale_codec).astype(np.float64)
        # a reconstructed scale can land on or below zero; only s^2 matters downstream
        return np.exp(s) if self.scale_domain == "log" else np.maximum(np.abs(s), MIN_SCALE)

    @property
    def rotations(self) -> np.ndarray:
        q = rvq_decode(self.rotation_indices, self.rotation_codec).astype(np.float64)
        n = np.linalg.norm(q, axis=1, keepdims=True)
        return np.where(n > 0, q / np.where(n > 0, n, 1.0), np.array([1.0, 0, 0, 0]))

    def colors(self, camera_center, features=None) -> np.ndarray:
        p = self.positions
        return query_color(p, p - np.asarray(camera_center, dtype=np.float64), self.field, features)

    def to_cloud(self, direction=(0.0, 0.0, 1.0)) -> GaussianCloud:
        """Degree-0 cloud with colors baked from the field along one direction."""
        n = len(self)
        d = np.broadcast_to(np.asarray(direction, dtype=np.float64), (n, 3))
        dc = self.field.sh_dc(self.positions, d) if n else np.zeros((0, 3))
        return GaussianCloud(self.positions, self.opacities, self.scales, self.rotations,
                             np.asarray(dc, dtype=np.float64)[:, :, None])


# --- low-level writers/readers --------------------------------------------------

def _f16(a, name):
    with np.errstate(over="ignore"):
        h = np.asarray(a, dtype=np.float64).astype("<f2")
    if not np.all(np.isfinite(h)):
        raise ValueError(f"{name} overflow half precision")
    return h


def _block(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


class _Reader:
    def __init__(self, data: bytes, offset: int = 0, end: int | None = None):
        self.data = data
        self.pos = offset
        self.end = len(data) if end is None else end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise DecodeError("truncated", f"need {n} bytes, {self.end - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> "_Reader":
        (n,) = self.unpack("<Q")
        start = self.pos
        self.take(n)
        return _Reader(self.data, start, start + n)

    def take_all(self) -> bytes:
        return self.take(self.remaining)

    @property
    def remaining(self) -> int:
        return self.end - self.pos


def _encode_indices(indices, codec: RvqCodec, huffman: bool) -> bytes:
    n, L = indices.shape
    bits = codec.bits_per_index
    if not huffman:
        return postproc.bitpack(indices.T.reshape(-1), bits)
    out = b""
    for l in range(L):
        packed = postproc.bitpack(indices[:, l], bits)
        flag, payload = 0, packed
        if codec.codebook_size <= 256:
            coded = postproc.huffman_encode(indices[:, l]).to_bytes()
            if len(coded) < len(packed):
                flag, payload = 1, coded
        out += struct.pack("<BQ", flag, len(payload)) + payload
    return out


def _decode_indices(r: _Reader, n: int, codec: RvqCodec, huffman: bool) -> np.ndarray:
    L, bits = codec.num_stages, codec.bits_per_index
    try:
        if not huffman:
            flat = postproc.bitunpack(r.take(postproc.packed_size(n * L, bits)), bits, n * L)
            idx = flat.reshape(L, n).T.copy()
        else:
            idx = np.empty((n, L), dtype=np.int64)
            for l in range(L):
                flag, size = r.unpack("<BQ")
                payload = r.take(size)
                if flag == 1:
                    idx[:, l] = _checked_len(postproc.huffman_decode(postproc.HuffmanBlob.from_bytes(payload)), n)
                elif flag == 0:
                    idx[:, l] = postproc.bitunpack(payload, bits, n)
                else:
                    raise DecodeError("corrupt", f"unknown index stream flag {flag}")
    except CorruptStreamError as e:
        raise DecodeError("corrupt", str(e)) from e
    if idx.size and idx.max() >= codec.codebook_size:
        raise DecodeError("index_range", f"code index {int(idx.max())} >= codebook size {codec.codebook_size}")
    return idx


def _checked_len(a, n):
    if len(a) != n:
        raise DecodeError("corrupt", f"stream holds {len(a)} symbols, expected {n}")
    return a


def _encode_codec(codec: RvqCodec, indices, huffman: bool) -> bytes:
    head = struct.pack("<BHB", codec.num_stages, codec.codebook_size, codec.dim)
    books = np.asarray(codec.codebooks, dtype="<f4").tobytes()
    return head + books + _encode_indices(np.asarray(indices, dtype=np.int64), codec, huffman)


def _decode_codec(r: _Reader, n: int, huffman: bool):
    L, C, D = r.unpack("<BHB")
    if L < 1 or C < 2 or D < 1:
        raise DecodeError("corrupt", f"invalid codec shape L={L} C={C} D={D}")
    books = np.frombuffer(r.take(L * C * D * 4), dtype="<f4").reshape(L, C, D).astype(np.float32)
    try:
        codec = RvqCodec(books)
    except ValueError as e:
        raise DecodeError("corrupt", str(e)) from e
    return codec, _decode_indices(r, n, codec, huffman)


def _encode_field(f: ColorField, pp: PostprocFlags):
    """Returns (hash bytes, mlp bytes)."""
    hash_parts = []
    for table in f.grid.level_tables():
        if not pp.hash:
            hash_parts.append(_f16(table, "hash table").tobytes())
            continue
        sparse = postproc.prune_hash(table, pp.hash_threshold)
        part = sparse.packed_bitmap + struct.pack("<Q", len(sparse.values))
        if len(sparse.values):
            part += _block(postproc.quantize_u8(sparse.values).to_bytes())
        hash_parts.append(part)
    mlp = b"".join(_f16(a, "MLP weights").tobytes() for a in f.mlp.params())
    return b"".join(hash_parts), mlp


def _decode_field(r: _Reader, cfg: FieldConfig, pp: PostprocFlags) -> ColorField:
    F = cfg.features_per_level
    tables = []
    for T in cfg.table_sizes():
        count = int(T) * F
        if not pp.hash:
            tables.append(np.frombuffer(r.take(count * 2), dtype="<f2").astype(np.float32).reshape(T, F))
            continue
        bitmap = np.unpackbits(np.frombuffer(r.take((count + 7) // 8), dtype=np.uint8))[:count].astype(bool)
        (kept,) = r.unpack("<Q")
        if kept != int(bitmap.sum()):
            raise DecodeError("corrupt", f"bitmap marks {int(bitmap.sum())} survivors, header says {kept}")
        flat = np.zeros(count, dtype=np.float64)
        if kept:
            try:
                qt = QuantizedTensor.from_bytes(r.block().take_all())
            except CorruptStreamError as e:
                raise DecodeError("corrupt", str(e)) from e
            if len(qt) != kept:
                raise DecodeError("corrupt", "survivor count mismatch")
            flat[bitmap] = postproc.dequantize(qt)
        tables.append(flat.astype(np.float32).reshape(T, F))
    layers = []
    for fan_in, fan_out in cfg.layer_shapes():
        W = np.frombuffer(r.take(fan_in * fan_out * 2), dtype="<f2").astype(np.float32).reshape(fan_in, fan_out)
        b = np.frombuffer(r.take(fan_out * 2), dtype="<f2").astype(np.float32)
        layers.append((W, b))
    return ColorField(cfg, HashGrid(cfg, np.concatenate(tables, axis=0)), Mlp(layers))


def _flags_bytes(scene: CompactScene) -> bytes:
    c = scene.field.config
    return _FLAGS.pack(
        scene.pp.bits, MASK_MODE_CODES[scene.mask_mode], 1 if scene.scale_domain == "log" else 0,
        c.num_levels, c.features_per_level, c.base_resolution, c.max_resolution, c.hash_log2,
        c.mlp_hidden, c.mlp_layers, scene.pp.hash_threshold,
    )


# --- public API -----------------------------------------------------------------

def encode_scene(scene: CompactScene) -> bytes:
    n = len(scene)
    pos = _f16(scene.positions, "positions").reshape(n, 3)
    if scene.pp.opacity and n:
        opa = postproc.quantize_u8(scene.opacities).to_bytes()
    else:
        opa = _f16(scene.opacities, "opacities").tobytes()
    hash_b, mlp_b = _encode_field(scene.field, scene.pp)
    body = _HEADER.pack(MAGIC, VERSION, n) + _flags_bytes(scene)
    body += _block(pos.tobytes())
    body += _block(opa)
    body += _block(_encode_codec(scene.scale_codec, scene.scale_indices, scene.pp.indices))
    body += _block(_encode_codec(scene.rotation_codec, scene.rotation_indices, scene.pp.indices))
    body += _block(struct.pack("<Q", len(hash_b)) + hash_b + mlp_b)
    return body + struct.pack("<I", zlib.crc32(body))


def encode_file(cloud: GaussianCloud, mask_mode, rvq_codecs, field_: ColorField, pp=False,
                scale_domain: str = "linear") -> bytes:
    """Serialize a pruned cloud with trained codecs and field.

    ``rvq_codecs`` is ((scale_codec, scale_indices), (rotation_codec, rotation_indices)).
    ``mask_mode`` may be a MaskState, a mode string or None (no mask trained).
    """
    (sc, si), (rc, ri) = rvq_codecs
    if sc is None or rc is None or field_ is None:
        raise ValueError("codecs and color field must be trained before encoding")
    mode = getattr(mask_mode, "mode", mask_mode) or "none"
    scene = CompactScene(cloud.positions, cloud.opacities, sc, np.asarray(si), rc, np.asarray(ri), field_,
                         PostprocFlags.coerce(pp), mode, scale_domain)
    if len(scene.scale_indices) != len(cloud) or len(scene.rotation_indices) != len(cloud):
        raise ValueError("index stream length does not match the number of Gaussians")
    return encode_scene(scene)


def _parse(data: bytes):
    """Decode and also return the byte span of every channel."""
    data = bytes(data)
    if len(data) < _HEADER.size + _FLAGS.size + 4:
        if len(data) >= 8 and data[:8] != MAGIC:
            raise DecodeError("bad_magic", "not a compact scene file")
        raise DecodeError("truncated", "file shorter than the fixed header")
    if data[:8] != MAGIC:
        raise DecodeError("bad_magic", "not a compact scene file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    _, version, n = r.unpack("<8sIQ")
    if version != VERSION:
        raise DecodeError("bad_version", f"unsupported version {version}")
    if zlib.crc32(body) != crc:
        # distinguish truncation from corruption when the channel table runs short
        _check_truncation(body, n)
        raise DecodeError("checksum", "CRC32 mismatch")
    bits, mode, domain, lv, fpl, base, maxr, hl2, hid, layers, thr = r.unpack("<" + _FLAGS.format[1:])
    try:
        cfg = FieldConfig(lv, fpl, base, maxr, hl2, hid, layers)
    except ValueError as e:
        raise DecodeError("corrupt", f"invalid field config: {e}") from e
    pp = PostprocFlags(bool(bits & 1), bool(bits & 2), bool(bits & 4), thr)
    mode_name = {v: k for k, v in MASK_MODE_CODES.items()}.get(mode)
    if mode_name is None:
        raise DecodeError("corrupt", f"unknown mask mode code {mode}")
    spans = {}

    blk = r.block()
    spans["position"] = blk.remaining
    positions = np.frombuffer(blk.take(n * 6), dtype="<f2").astype(np.float64).reshape(n, 3)
    blk = r.block()
    spans["opacity"] = blk.remaining
    if pp.opacity and n:
        try:
            opac = postproc.dequantize(QuantizedTensor.from_bytes(blk.take_all()))
        except CorruptStreamError as e:
            raise DecodeError("corrupt", str(e)) from e
        if len(opac) != n:
            raise DecodeError("corrupt", "opacity count does not match N")
    else:
        opac = np.frombuffer(blk.take(n * 2), dtype="<f2").astype(np.float64)
    codecs = []
    for name in ("scale", "rotation"):
        blk = r.block()
        spans[name] = blk.remaining
        codecs.append(_decode_codec(blk, n, pp.indices))
    blk = r.block()
    (hash_len,) = blk.unpack("<Q")
    spans["hash"] = hash_len
    spans["mlp"] = blk.remaining - hash_len
    fld = _decode_field(blk, cfg, pp)
    if r.remaining:
        raise DecodeError("corrupt", f"{r.remaining} trailing bytes")
    scene = CompactScene(positions, opac, codecs[0][0], codecs[0][1], codecs[1][0], codecs[1][1], fld, pp,
                         mode_name, "log" if domain else "linear")
    return scene, spans


def _check_truncation(body, n):
    r = _Reader(body, _HEADER.size + _FLAGS.size)
    for _ in range(5):
        r.block()


def decode_file(data) -> CompactScene:
    """Parse a .cgs byte string; raises :class:`DecodeError` on any inconsistency."""
    try:
        return _parse(data)[0]
    except CorruptIndexError as e:
        raise DecodeError("index_range", str(e)) from e


@dataclass
class StorageReport:
    bytes: dict
    n: int
    baseline_n: int

    @property
    def total(self) -> int:
        return sum(self.bytes.values())

    @property
    def baseline_bytes(self) -> int:
        return BASELINE_FLOATS * 4 * self.baseline_n

    @property
    def ratio(self):
        t = self.total
        return None if self.baseline_n == 0 or t == 0 else self.baseline_bytes / t

    def as_dict(self) -> dict:
        out = dict(self.bytes)
        out["total"] = self.total
        out["n_gaussians"] = self.n
        out["baseline_bytes"] = self.baseline_bytes
        out["compression_ratio"] = "n/a" if self.ratio is None else round(self.ratio, 4)
        out["megabytes"] = {k: v / 1e6 for k, v in self.bytes.items()}
        return out


def stats(data, baseline_n: int | None = None) -> StorageReport:
    """Per-channel byte counts that sum to the file length exactly.

    The compression ratio compares against 59 float32 values per Gaussian for
    ``baseline_n`` Gaussians (defaults to the file's own count).
    """
    if len(data) == 0:
        keys = ("position", "opacity", "scale", "rotation", "hash", "mlp", "overhead")
        return StorageReport({k: 0 for k in keys}, 0, 0)
    scene, spans = _parse(data)
    out = {k: spans[k] for k in ("position", "opacity", "scale", "rotation", "hash", "mlp")}
    out["overhead"] = len(data) - sum(out.values())
    n = len(scene)
    return StorageReport(out, n, n if baseline_n is None else baseline_n)


def storage_model(n: int, codebook_size: int = 64, stages: int = 6, field_config: FieldConfig | None = None,
                  baseline_n: int | None = None) -> StorageReport:
    """Exact byte counts of a file without post-processing, from sizes alone."""
    cfg = field_config or FieldConfig()
    bits = max(1, int(np.ceil(np.log2(codebook_size))))

    def codec(dim):
        return 4 + stages * codebook_size * dim * 4 + postproc.packed_size(n * stages, bits)

    sizes = {
        "position": 6 * n,
        "opacity": 2 * n,
        "scale": codec(3),
        "rotation": codec(4),
        "hash": 2 * cfg.num_table_params(),
        "mlp": 2 * cfg.num_mlp_params(),
        "overhead": _HEADER.size + _FLAGS.size + 5 * 8 + 8 + 4,
    }
    return StorageReport(sizes, n, n if baseline_n is None else baseline_n)


def sh_dc_to_rgb(dc):
    return np.clip(0.5 + SH_C0 * np.asarray(dc), 0.0, 1.0)
