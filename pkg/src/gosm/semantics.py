"""Segmentation ingestion and object-ID tagging of splats.

Segmentation comes from a *provider*: either a directory of per-frame
fixture files or a remote HTTP service speaking the same record schema.

Fixture file ``frame_0007.json``::

    {"frame_index": 7, "width": 64, "height": 48,
     "records": [{"label": "chair", "confidence": 0.9,
                  "bbox": [x0, y0, x1, y1],
                  "mask_rle": "start length start length ..."}]}

``bbox`` is half-open (``x1``/``y1`` exclusive). ``mask_rle`` lists runs of
true pixels over the row-major flattened mask, 0-based.

Refinement requests carry a text prompt. A fixture provider answers them
from ``<root>/<prompt>/frame_XXXX.json`` when that exists, otherwise from the
frame's main file filtered to records whose label matches the prompt
(ignoring case and treating underscores as spaces).
"""

from __future__ import annotations

import base64
import io
import json
import logging
import time
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .core import Frame, SplatMap, project_points
from .errors import InvalidEmbeddingError, ProviderError
from .registry import LabelRegistry, normalize_embedding

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# records and RLE
# --------------------------------------------------------------------------

@dataclass
class SegmentationRecord:
    frame_index: int
    label: str
    bbox_2d: tuple[int, int, int, int]
    mask: NDArray
    confidence: float = 1.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.bbox_2d = tuple(int(v) for v in self.bbox_2d)
        x0, y0, x1, y1 = self.bbox_2d
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        outside = self.mask.copy()
        outside[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = False
        if outside.any():
            raise ValueError(f"mask of {self.label!r} extends outside its bounding box")

    @classmethod
    def from_mask(cls, frame_index: int, label: str, mask: NDArray, confidence: float = 1.0) -> SegmentationRecord:
        """Record whose bbox is the tight box around ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        vs, us = np.nonzero(mask)
        bbox = (0, 0, 0, 0) if len(vs) == 0 else (us.min(), vs.min(), us.max() + 1, vs.max() + 1)
        return cls(frame_index, label, bbox, mask, confidence)


def rle_encode(mask: NDArray) -> str:
    flat = np.concatenate([[False], np.asarray(mask, dtype=bool).reshape(-1), [False]])
    edges = np.flatnonzero(flat[1:] != flat[:-1])
    starts, ends = edges[0::2], edges[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def rle_decode(rle: str, height: int, width: int) -> NDArray:
    flat = np.zeros(height * width, dtype=bool)
    nums = [int(x) for x in rle.split()]
    if len(nums) % 2:
        raise ValueError("run-length string must contain start/length pairs")
    for start, length in zip(nums[0::2], nums[1::2]):
        if start < 0 or length < 0 or start + length > flat.size:
            raise ValueError(f"run ({start}, {length}) exceeds mask of {flat.size} pixels")
        flat[start:start + length] = True
    return flat.reshape(height, width)


def record_to_dict(rec: SegmentationRecord) -> dict:
    return {"label": rec.label, "confidence": rec.confidence,
            "bbox": list(rec.bbox_2d), "mask_rle": rle_encode(rec.mask)}


def records_to_json(frame_index: int, height: int, width: int, records) -> dict:
    return {"frame_index": frame_index, "width": width, "height": height,
            "records": [record_to_dict(r) for r in records]}


def records_from_json(doc: dict, height: int, width: int, source: str = "") -> list[SegmentationRecord]:
    """Parse and validate a record document against the frame size."""
    fh, fw = doc.get("height", height), doc.get("width", width)
    out = []
    for i, r in enumerate(doc.get("records", [])):
        name = f"{source} record {i} ({r.get('label', '?')!r})"
        rh, rw = r.get("height", fh), r.get("width", fw)
        if (rh, rw) != (height, width):
            raise ProviderError(f"{name}: mask sized {rw}x{rh}, frame is {width}x{height}")
        try:
            mask = rle_decode(r["mask_rle"], height, width)
            out.append(SegmentationRecord(int(doc.get("frame_index", -1)), str(r["label"]),
                                          tuple(r["bbox"]), mask, float(r.get("confidence", 1.0))))
        except (KeyError, ValueError, TypeError) as exc:
            raise ProviderError(f"{name}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# providers
# --------------------------------------------------------------------------

def label_key(label: str) -> str:
    """Comparison key for labels: case-insensitive, underscores read as spaces."""
    return " ".join(label.strip().lower().replace("_", " ").split())


def fixture_name(frame_index: int) -> str:
    return f"frame_{frame_index:04d}.json"


class FixtureProvider:
    """Segmentation read from per-frame JSON files under ``root``."""

    def __init__(self, root):
        self.root = Path(root)

    def fetch(self, frame: Frame, prompt: str | None = None) -> list[SegmentationRecord]:
        H, W = frame.intrinsics.shape
        if prompt is not None:
            special = self.root / prompt / fixture_name(frame.index)
            if special.exists():
                return self._read(special, H, W, frame.index)
        path = self.root / fixture_name(frame.index)
        if not path.exists():
            warnings.warn(f"no segmentation fixture for frame {frame.index} at {path}", RuntimeWarning, stacklevel=2)
            return []
        records = self._read(path, H, W, frame.index)
        if prompt is not None:
            records = [r for r in records if label_key(r.label) == label_key(prompt)]
        return records

    @staticmethod
    def _read(path: Path, H: int, W: int, index: int) -> list[SegmentationRecord]:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ProviderError(f"{path}: invalid JSON: {exc}") from exc
        recs = records_from_json(doc, H, W, str(path))
        for r in recs:
            r.frame_index = index
        return recs


def encode_png(rgb: NDArray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _post_json(url: str, payload: dict, timeout: float, retries: int) -> dict:
    data = json.dumps(payload).encode()
    last: Exception | None = None
    for attempt in range(retries + 1):
        req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return json.loads(resp.read().decode())
        except urllib.error.HTTPError as exc:
            last = exc
            if exc.code < 500:
                break
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            last = exc
        if attempt < retries:
            time.sleep(0.05 * 2 ** attempt)
    raise ProviderError(f"request to {url} failed: {last}")


class RemoteProvider:
    """Segmentation service client.

    POSTs ``{"frame_index", "width", "height", "image_png_b64", "prompt"}`` and
    expects the fixture record schema in response.
    """

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def fetch(self, frame: Frame, prompt: str | None = None) -> list[SegmentationRecord]:
        H, W = frame.intrinsics.shape
        payload = {"frame_index": frame.index, "width": W, "height": H, "prompt": prompt,
                   "image_png_b64": base64.b64encode(encode_png(frame.rgb)).decode()}
        doc = _post_json(self.url, payload, self.timeout, self.retries)
        recs = records_from_json(doc, H, W, f"{self.url} frame {frame.index}")
        for r in recs:
            r.frame_index = frame.index
        return recs


def provider_fetch(frame: Frame, provider, prompt: str | None = None) -> list[SegmentationRecord]:
    return provider.fetch(frame, prompt)


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------

class EmbeddingTable:
    """Label -> embedding lookup backed by a text file.

    File format: a header line ``dim N`` followed by ``label<TAB>v1,v2,...``.
    """

    def __init__(self, dim: int, vectors: dict[str, NDArray] | None = None):
        self.dim = dim
        self.vectors: dict[str, NDArray] = {}
        for k, v in (vectors or {}).items():
            self.add(k, v)

    def add(self, label: str, vector) -> None:
        v = np.asarray(vector, dtype=float).reshape(-1)
        if len(v) != self.dim:
            raise InvalidEmbeddingError(f"{label!r}: expected {self.dim} values, got {len(v)}")
        self.vectors[label] = v

    def __contains__(self, label: str) -> bool:
        return label in self.vectors

    def get(self, label: str) -> NDArray | None:
        return self.vectors.get(label)

    @classmethod
    def load(cls, path) -> EmbeddingTable:
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("dim "):
            raise ValueError(f"{path}: first line must be 'dim N'")
        table = cls(int(lines[0].split()[1]))
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                label, values = line.split("\t")
                table.add(label, [float(x) for x in values.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
        return table

    def save(self, path) -> None:
        rows = [f"dim {self.dim}"]
        rows += [f"{k}\t" + ",".join(repr(float(x)) for x in v) for k, v in self.vectors.items()]
        Path(path).write_text("\n".join(rows) + "\n")


class RemoteEmbedder:
    """Text embedding service client: POST ``{"text": ...}`` -> ``{"embedding": [...]}``."""

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2):
        self.url = url
        self.timeout = timeout
        self.retries = retries

    def get(self, text: str) -> NDArray:
        doc = _post_json(self.url, {"text": text}, self.timeout, self.retries)
        try:
            return np.asarray(doc["embedding"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"{self.url}: malformed embedding response") from exc


class EmbeddingLookup:
    """Table first, then an optional remote embedder, behind one ``get``."""

    def __init__(self, table: EmbeddingTable | None = None, remote: RemoteEmbedder | None = None):
        self.table = table
        self.remote = remote

    def get(self, text: str) -> NDArray | None:
        vec = self.table.get(text) if self.table is not None else None
        if vec is None and self.remote is not None:
            vec = self.remote.get(text)
        return vec


def register_embedding(registry: LabelRegistry, label: str, embedding) -> None:
    """Store ``embedding`` for ``label`` with unit norm."""
    registry.register_embedding(label, embedding)


# --------------------------------------------------------------------------
# object-ID assignment
# --------------------------------------------------------------------------

@dataclass
class SemanticsConfig:
    depth_assoc_tol: float = 0.10
    reuse_fraction: float = 0.5


def gated_splats(m: SplatMap, frame: Frame, mask: NDArray, tol: float):
    """Splats whose centre projects into ``mask`` at a pixel with consistent observed depth.

    Returns ``(indices, pixel_u, pixel_v, camera_depth)`` for the gated splats.
    """
    K = frame.intrinsics
    H, W = K.shape
    if len(m) == 0:
        empty = np.zeros(0, dtype=int)
        return empty, empty, empty, np.zeros(0)
    u, v, z = project_points(m.means, frame.pose, K)
    ok = np.isfinite(u) & np.isfinite(v)
    pu = np.full(len(m), -1)
    pv = np.full(len(m), -1)
    pu[ok] = np.floor(u[ok] + 0.5).astype(int)
    pv[ok] = np.floor(v[ok] + 0.5).astype(int)
    ok &= (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    idx = np.flatnonzero(ok)
    idx = idx[mask[pv[idx], pu[idx]]]
    d_obs = frame.depth[pv[idx], pu[idx]]
    keep = (d_obs > 0) & (np.abs(z[idx] - d_obs) <= tol)
    idx = idx[keep]
    return idx, pu[idx], pv[idx], z[idx]


def _choose_id(m: SplatMap, rec: SegmentationRecord, idx, pu, pv, z, cfg: SemanticsConfig) -> int | None:
    """Existing ID covering at least ``reuse_fraction`` of the hit pixels, if any."""
    if len(idx) == 0:
        return None
    W = rec.mask.shape[1]
    pix = pv * W + pu
    n_hit = len(np.unique(pix))
    tags = m.object_ids[idx]
    best, best_count = None, 0
    for oid in np.unique(tags[tags >= 0]):
        entry = m.registry.entries.get(int(oid))
        if entry is None or entry.label != rec.label:
            continue
        count = len(np.unique(pix[tags == oid]))
        if count > best_count or (count == best_count and best is not None and oid < best):
            best, best_count = int(oid), count
    if best is not None and best_count >= cfg.reuse_fraction * n_hit:
        return best
    return None


def assign_object_ids(m: SplatMap, frame: Frame, records, config: SemanticsConfig | None = None):
    """Tag splats covered by each segmentation mask with an object ID.

    For each record an existing ID is reused when at least ``reuse_fraction``
    of the mask's splat-hitting pixels hit splats already carrying that ID
    (with the same label); otherwise a new ID is minted. A splat that already
    carries a different ID is retagged only if the record's confidence is
    higher than the one that set the existing tag.

    Returns a list of ``(record, object_id)``.
    """
    cfg = config or SemanticsConfig()
    if frame.pose is None:
        raise ValueError("frame pose must be set before assigning object IDs")
    out = []
    for rec in records:
        if rec.mask.shape != frame.depth.shape:
            raise ValueError(f"mask of {rec.label!r} has shape {rec.mask.shape}, frame is {frame.depth.shape}")
        idx, pu, pv, z = gated_splats(m, frame, rec.mask, cfg.depth_assoc_tol)
        oid = _choose_id(m, rec, idx, pu, pv, z, cfg)
        if oid is None and len(idx) == 0:
            # an empty-space observation already recorded for this frame keeps its ID
            for cand in m.registry.ids_with_label(rec.label):
                if frame.index in m.registry.entries[cand].keyframes and not np.any(m.object_ids == cand):
                    oid = cand
                    break
        if oid is None:
            oid = m.mint_object_id()
            m.registry.add_entry(oid, rec.label)
        m.registry.entries[oid].observe(frame.index)

        current = m.object_ids[idx]
        write = (current < 0) | (current == oid) | (rec.confidence > m.tag_confidence[idx])
        w_idx = idx[write]
        same = m.object_ids[w_idx] == oid
        m.tag_confidence[w_idx] = np.where(same, np.maximum(m.tag_confidence[w_idx], rec.confidence), rec.confidence)
        m.object_ids[w_idx] = oid
        out.append((rec, oid))
    return out


def registry_closed(m: SplatMap) -> bool:
    """True when every tagged splat's ID is registered."""
    ids = np.unique(m.object_ids[m.object_ids >= 0])
    return all(int(i) in m.registry for i in ids)


def ingest_embeddings(registry: LabelRegistry, table: EmbeddingTable, labels) -> list[str]:
    """Register table embeddings for ``labels``; returns labels with no entry."""
    missing = []
    for label in labels:
        vec = table.get(label)
        if vec is None:
            missing.append(label)
            continue
        registry.register_embedding(label, normalize_embedding(vec))
    if missing:
        log.warning("no embedding for labels: %s", ", ".join(missing))
    return missing
