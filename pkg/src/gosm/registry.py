"""Object-ID / label / embedding bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import InvalidEmbeddingError


def normalize_embedding(vector) -> NDArray:
    v = np.asarray(vector, dtype=float).reshape(-1)
    n = np.linalg.norm(v)
    if v.size == 0 or not np.all(np.isfinite(v)) or n == 0.0:
        raise InvalidEmbeddingError("embedding must be a finite nonzero vector")
    return v / n


@dataclass
class ObjectEntry:
    label: str
    keyframes: list[int] = field(default_factory=list)

    def observe(self, keyframe: int) -> None:
        if keyframe not in self.keyframes:
            self.keyframes.append(keyframe)
            self.keyframes.sort()


class LabelRegistry:
    """Maps object IDs to labels and keyframe observations, and labels to embeddings.

    Embeddings are stored per label because every instance of a class shares
    its text embedding.
    """

    def __init__(self):
        self.entries: dict[int, ObjectEntry] = {}
        self.embeddings: dict[str, NDArray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, object_id: int) -> bool:
        return object_id in self.entries

    @property
    def dim(self) -> int | None:
        for v in self.embeddings.values():
            return len(v)
        return None

    def register_embedding(self, label: str, embedding) -> None:
        v = normalize_embedding(embedding)
        if self.dim is not None and label not in self.embeddings and len(v) != self.dim:
            raise InvalidEmbeddingError(f"embedding for {label!r} has dimension {len(v)}, expected {self.dim}")
        self.embeddings[label] = v

    def embedding(self, object_id: int) -> NDArray | None:
        return self.embeddings.get(self.entries[object_id].label)

    def add_entry(self, object_id: int, label: str) -> ObjectEntry:
        if object_id in self.entries:
            raise ValueError(f"object id {object_id} already registered")
        entry = ObjectEntry(label)
        self.entries[object_id] = entry
        return entry

    def ids_with_label(self, label: str) -> list[int]:
        return sorted(oid for oid, e in self.entries.items() if e.label == label)

    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries.values()})

    def copy(self) -> LabelRegistry:
        r = LabelRegistry()
        r.entries = {k: ObjectEntry(e.label, list(e.keyframes)) for k, e in self.entries.items()}
        r.embeddings = {k: v.copy() for k, v in self.embeddings.items()}
        return r

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelRegistry):
            return NotImplemented
        return (self.entries == other.entries
                and self.embeddings.keys() == other.embeddings.keys()
                and all(np.array_equal(v, other.embeddings[k]) for k, v in self.embeddings.items()))
