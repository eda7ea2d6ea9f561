"""Localization metrics: 3D IoU, precision and recall against ground-truth boxes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .errors import EvaluationError, InvalidBoxError
from .semantics import label_key


@dataclass(frozen=True)
class GroundTruthBox:
    label: str
    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.min_corner)
        hi = tuple(float(x) for x in self.max_corner)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise InvalidBoxError(f"box for {self.label!r} needs min < max on every axis")


def _as_box(box) -> tuple[NDArray, NDArray]:
    if isinstance(box, GroundTruthBox):
        lo, hi = box.min_corner, box.max_corner
    else:
        lo, hi = box
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
        raise InvalidBoxError(f"degenerate box {lo.tolist()} .. {hi.tolist()}")
    return lo, hi


def iou_3d(a, b) -> float:
    """Intersection over union of two axis-aligned boxes given as ``(min, max)``."""
    alo, ahi = _as_box(a)
    blo, bhi = _as_box(b)
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None)))
    union = float(np.prod(ahi - alo) + np.prod(bhi - blo)) - inter
    return inter / union


def load_ground_truth(path) -> list[GroundTruthBox]:
    """Read ``label xmin ymin zmin xmax ymax zmax`` lines (``#`` comments allowed)."""
    boxes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{n}: expected a label and 6 numbers")
        vals = [float(x) for x in parts[1:]]
        boxes.append(GroundTruthBox(parts[0], vals[:3], vals[3:]))
    return boxes


def save_ground_truth(path, boxes) -> None:
    Path(path).write_text("".join(
        f"{b.label} " + " ".join(f"{v:.6f}" for v in (*b.min_corner, *b.max_corner)) + "\n" for b in boxes))


@dataclass
class QueryOutcome:
    query: str
    label: str | None
    iou: float | None
    status: str  # tp, fp, fn, or tn for a rejected query with no ground truth
    detail: str = ""


@dataclass
class MetricsReport:
    scene: str
    method: str
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    mean_iou: float
    iou_threshold: float
    outcomes: list[QueryOutcome] = field(default_factory=list)

    def table(self) -> str:
        head = f"{'Scene':<12} {'Method':<10} {'Precision':>9} {'Recall':>7} {'IoU':>6}"
        row = f"{self.scene:<12} {self.method:<10} {self.precision:>9.2f} {self.recall:>7.2f} {self.mean_iou:>6.2f}"
        lines = [head, "-" * len(head), row, ""]
        for o in self.outcomes:
            iou = "-" if o.iou is None else f"{o.iou:.2f}"
            lines.append(f"  {o.query:<20} {o.status.upper():<3} IoU {iou:>5}  {o.detail}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        doc = json.loads(text)
        doc["outcomes"] = [QueryOutcome(**o) for o in doc.get("outcomes", [])]
        return cls(**doc)


def evaluate_queries(results, gt, iou_threshold: float = 0.5, scene: str = "scene",
                     method: str = "ours") -> MetricsReport:
    """Score query outcomes against ground-truth boxes.

    ``results`` holds ``(query_text, outcome)`` pairs where ``outcome`` is a
    query result (anything with ``matched_label`` and ``bbox_3d``) or an
    exception. Each query is paired with the ground-truth box of the same
    label (the query text, else the matched label). A returned box is a TP
    when its IoU reaches ``iou_threshold`` and an FP otherwise; a failed
    query is an FN if its label has ground truth. Ground-truth boxes never
    queried also count as FN.
    """
    gt = list(gt)
    if not gt:
        raise EvaluationError("no ground-truth boxes")
    by_label = {}
    for b in gt:
        if label_key(b.label) in by_label:
            raise EvaluationError(f"duplicate ground-truth label {b.label!r}")
        by_label[label_key(b.label)] = b

    outcomes: list[QueryOutcome] = []
    claimed: set[str] = set()
    for query, res in results:
        qkey = label_key(query)
        if isinstance(res, BaseException):
            if qkey in by_label:
                claimed.add(qkey)
                outcomes.append(QueryOutcome(query, None, None, "fn", type(res).__name__))
            else:
                outcomes.append(QueryOutcome(query, None, None, "tn", type(res).__name__))
            continue
        key = qkey if qkey in by_label else label_key(res.matched_label)
        box = by_label.get(key)
        if box is None or key in claimed:
            outcomes.append(QueryOutcome(query, res.matched_label, None, "fp", "no ground truth"))
            continue
        claimed.add(key)
        iou = iou_3d(res.bbox_3d, box)
        outcomes.append(QueryOutcome(query, res.matched_label, iou, "tp" if iou >= iou_threshold else "fp"))
    for key, box in by_label.items():
        if key not in claimed:
            outcomes.append(QueryOutcome(box.label, None, None, "fn", "not queried"))

    tp = sum(o.status == "tp" for o in outcomes)
    fp = sum(o.status == "fp" for o in outcomes)
    fn = sum(o.status == "fn" for o in outcomes)
    ious = [o.iou if o.iou is not None else 0.0 for o in outcomes if o.status in ("tp", "fp")]
    return MetricsReport(scene, method, tp, fp, fn,
                         tp / (tp + fp) if tp + fp else 0.0,
                         tp / (tp + fn) if tp + fn else 0.0,
                         float(np.mean(ious)) if ious else 0.0,
                         iou_threshold, outcomes)
