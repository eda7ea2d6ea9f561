"""Binary map persistence.

Layout (little-endian)::

    "GOSM"  u32 version  u64 splat_count
    splat_count x record:
        center f64x3, scale f64x3, quaternion f64x4 (w, x, y, z),
        color f64x3, opacity f64, object_id i64 (-1 = untagged)
    trailer (omitted when the map has no keyframes, tags or metadata):
        "KFRM" u64 n, n x (index i64, rotation f64x9 row-major, translation f64x3)
        next_object_id i64
        u8 has_intrinsics [fx fy cx cy f64, width height u32]
        tag_confidence f64 x splat_count
        u32 embedding_dim, u64 n_labels, n x (u32 len, utf-8 label, f64 x dim)
        u64 n_objects, n x (id i64, u32 len, utf-8 label, u64 k, i64 x k keyframes)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, Pose, SplatMap
from .errors import MapFormatError
from .registry import ObjectEntry

MAGIC = b"GOSM"
VERSION = 1
TRAILER_MAGIC = b"KFRM"

RECORD_DTYPE = np.dtype([
    ("center", "<f8", 3),
    ("scale", "<f8", 3),
    ("quat", "<f8", 4),
    ("color", "<f8", 3),
    ("opacity", "<f8"),
    ("object_id", "<i8"),
])
_HEADER = struct.Struct("<4sIQ")


def _has_trailer(m: SplatMap) -> bool:
    return bool(m.keyframes or m.next_object_id or m.intrinsics is not None
                or len(m.registry) or m.registry.embeddings or np.any(m.tag_confidence != 0))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_map(m: SplatMap) -> bytes:
    n = len(m)
    rec = np.zeros(n, dtype=RECORD_DTYPE)
    rec["center"] = m.means
    rec["scale"] = m.scales
    rec["quat"] = m.quats
    rec["color"] = m.colors
    rec["opacity"] = m.opacities
    rec["object_id"] = m.object_ids
    parts = [_HEADER.pack(MAGIC, VERSION, n), rec.tobytes()]
    if not _has_trailer(m):
        return b"".join(parts)

    parts.append(TRAILER_MAGIC + struct.pack("<Q", len(m.keyframes)))
    for idx, pose in m.keyframes.items():
        parts.append(struct.pack("<q", idx) + np.asarray(pose.to_rt12(), dtype="<f8").tobytes())
    parts.append(struct.pack("<q", m.next_object_id))
    if m.intrinsics is None:
        parts.append(b"\x00")
    else:
        k = m.intrinsics
        parts.append(b"\x01" + struct.pack("<4d2I", k.fx, k.fy, k.cx, k.cy, k.width, k.height))
    parts.append(np.asarray(m.tag_confidence, dtype="<f8").tobytes())

    reg = m.registry
    dim = reg.dim or 0
    parts.append(struct.pack("<IQ", dim, len(reg.embeddings)))
    for label, vec in reg.embeddings.items():
        parts.append(_pack_str(label) + np.asarray(vec, dtype="<f8").tobytes())
    parts.append(struct.pack("<Q", len(reg.entries)))
    for oid, entry in reg.entries.items():
        parts.append(struct.pack("<q", oid) + _pack_str(entry.label)
                     + struct.pack("<Q", len(entry.keyframes))
                     + np.asarray(entry.keyframes, dtype="<i8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MapFormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).astype(dt.newbyteorder("="))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what + " length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MapFormatError(f"invalid utf-8 in {what}", start) from exc


def decode_map(data: bytes) -> SplatMap:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise MapFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    _, version, n = r.unpack(_HEADER.format, "header")
    if version != VERSION:
        raise MapFormatError(f"unsupported version {version}", 4)
    rec_start = r.pos
    if n > (len(data) - rec_start) // RECORD_DTYPE.itemsize:
        whole = (len(data) - rec_start) // RECORD_DTYPE.itemsize
        raise MapFormatError(f"truncated record {whole} of {n}", rec_start + whole * RECORD_DTYPE.itemsize)
    rec = np.frombuffer(r.take(n * RECORD_DTYPE.itemsize, "records"), dtype=RECORD_DTYPE)

    m = SplatMap()
    m.means = rec["center"].astype(float)
    m.scales = rec["scale"].astype(float)
    m.quats = rec["quat"].astype(float)
    m.colors = rec["color"].astype(float)
    m.opacities = rec["opacity"].astype(float)
    m.object_ids = rec["object_id"].astype(np.int64)
    m.tag_confidence = np.zeros(n)
    if r.pos == len(data):
        return m

    if r.take(4, "trailer magic") != TRAILER_MAGIC:
        raise MapFormatError("bad trailer magic", r.pos - 4)
    (nkf,) = r.unpack("<Q", "keyframe count")
    for _ in range(nkf):
        start = r.pos
        (idx,) = r.unpack("<q", "keyframe index")
        rt = r.array("<f8", 12, "keyframe pose")
        try:
            m.keyframes[idx] = Pose(rt[:9].reshape(3, 3), rt[9:])
        except ValueError as exc:
            raise MapFormatError(f"invalid keyframe pose: {exc}", start) from exc
    (m.next_object_id,) = r.unpack("<q", "next object id")
    (has_k,) = r.unpack("<B", "intrinsics flag")
    if has_k:
        fx, fy, cx, cy, w, h = r.unpack("<4d2I", "intrinsics")
        m.intrinsics = CameraIntrinsics(fx, fy, cx, cy, w, h)
    m.tag_confidence = r.array("<f8", n, "tag confidence")

    dim, nlab = r.unpack("<IQ", "embedding header")
    for _ in range(nlab):
        label = r.string("label")
        m.registry.embeddings[label] = r.array("<f8", dim, "embedding")
    (nobj,) = r.unpack("<Q", "object count")
    for _ in range(nobj):
        (oid,) = r.unpack("<q", "object id")
        label = r.string("object label")
        (k,) = r.unpack("<Q", "object keyframe count")
        kfs = r.array("<i8", k, "object keyframes")
        m.registry.entries[oid] = ObjectEntry(label, [int(x) for x in kfs])
    if r.pos != len(data):
        raise MapFormatError("trailing bytes after map", r.pos)
    return m


def save_map(m: SplatMap, path) -> None:
    Path(path).write_bytes(encode_map(m))


def load_map(path) -> SplatMap:
    return decode_map(Path(path).read_bytes())
