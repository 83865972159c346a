"""IoU, per-class average precision, mAP50 and mAP50:95.

Average precision is the exact area under the monotone precision envelope
(all-points integration).  Detections are matched greedily in descending
confidence: each detection is compared with the ground-truth box it overlaps
most (earlier GT index wins ties) and counts as a true positive only if that
IoU reaches the threshold and the GT is still unmatched.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import fileio

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * j, 2) for j in range(10))


class MetricsError(ValueError):
    """A metric is undefined for the given inputs."""


class EmptyClassWarning(UserWarning):
    """AP requested for a class without ground truth; reported as 0."""


@dataclass(frozen=True)
class GtBox:
    image_id: str
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def xyxy(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    confidence: float
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def xyxy(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class PrCurve:
    threshold: float
    recall: tuple
    precision: tuple

    @property
    def points(self) -> list:
        return list(zip(self.recall, self.precision))


def _xyxy(box) -> tuple:
    return box.xyxy if hasattr(box, "xyxy") else tuple(box)


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _xyxy(a)
    bx1, by1, bx2, by2 = _xyxy(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``[N,4]`` and ``[M,4]`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def _single_class(dets, gts):
    classes = {d.class_id for d in dets} | {g.class_id for g in gts}
    if len(classes) > 1:
        raise ValueError(f"ap_u works on one class at a time, got classes {sorted(classes)}")


def match_detections(dets: Sequence[Detection], gts: Sequence[GtBox], threshold: float) -> np.ndarray:
    """True-positive flags of ``dets`` in descending-confidence order (stable for ties)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    by_image = defaultdict(list)
    for g in gts:
        by_image[g.image_id].append(g)
    gt_boxes = {k: np.array([g.xyxy for g in v], dtype=np.float64) for k, v in by_image.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in by_image.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        boxes = gt_boxes.get(d.image_id)
        if boxes is None:
            continue
        ious = iou_matrix(np.array([d.xyxy]), boxes)[0]
        j = int(np.argmax(ious))
        if ious[j] >= threshold and not taken[d.image_id][j]:
            taken[d.image_id][j] = True
            tp[rank] = True
    return tp


def pr_curve(dets: Sequence[Detection], gts: Sequence[GtBox], threshold: float) -> PrCurve:
    _single_class(dets, gts)
    tp = match_detections(dets, gts, threshold)
    ctp = np.cumsum(tp)
    n = np.arange(1, len(tp) + 1)
    recall = ctp / len(gts) if gts else np.zeros(len(tp))
    precision = ctp / n if len(tp) else np.zeros(0)
    return PrCurve(threshold, tuple(float(r) for r in recall), tuple(float(p) for p in precision))


def _area_under_envelope(recall: np.ndarray, precision: np.ndarray) -> float:
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def ap_u(dets: Sequence[Detection], gts: Sequence[GtBox], threshold: float) -> float:
    """Average precision of one class at IoU threshold ``threshold``."""
    if not gts:
        warnings.warn("class has no ground truth; AP reported as 0", EmptyClassWarning, stacklevel=2)
        _single_class(dets, gts)
        return 0.0
    curve = pr_curve(dets, gts, threshold)
    return _area_under_envelope(np.asarray(curve.recall), np.asarray(curve.precision))


def _by_class(items) -> dict:
    out = defaultdict(list)
    for it in items:
        out[it.class_id].append(it)
    return out


def per_class_ap(dets, gts, classes, thresholds=IOU_THRESHOLDS) -> tuple:
    """``(ap [C, len(thresholds)], gt_counts [C])`` for class ids ``range(classes)``."""
    n = classes if isinstance(classes, int) else len(classes)
    dc, gc = _by_class(dets), _by_class(gts)
    ap = np.zeros((n, len(thresholds)))
    counts = np.zeros(n, dtype=int)
    for c in range(n):
        counts[c] = len(gc[c])
        if not counts[c]:
            continue
        for j, u in enumerate(thresholds):
            ap[c, j] = ap_u(dc[c], gc[c], u)
    return ap, counts


def _class_mean(values: np.ndarray, counts: np.ndarray) -> float:
    present = counts > 0
    if not present.any():
        raise MetricsError("no class has ground truth; mAP is undefined")
    total = 0.0
    for v in values[present]:
        total += float(v)
    return total / int(present.sum())


def map50(dets, gts, classes) -> float:
    ap, counts = per_class_ap(dets, gts, classes, (0.5,))
    return _class_mean(ap[:, 0], counts)


def map50_95(dets, gts, classes) -> float:
    ap, counts = per_class_ap(dets, gts, classes, IOU_THRESHOLDS)
    inner = np.array([sum(float(v) for v in row) / len(IOU_THRESHOLDS) for row in ap])
    return _class_mean(inner, counts)


@dataclass
class MetricsReport:
    ap50: tuple
    ap50_95: tuple
    gt_counts: tuple
    map50: float
    map50_95: float
    class_names: tuple = field(default_factory=tuple)

    def format(self) -> str:
        lines = ["# metrics report v1", f"{'class':<14} {'n_gt':>6} {'AP50':>9} {'AP50:95':>9}"]
        for c, (a, b, n) in enumerate(zip(self.ap50, self.ap50_95, self.gt_counts)):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            lines.append(f"{name:<14} {n:>6} {a:>9.6f} {b:>9.6f}")
        lines.append(f"mAP50 {self.map50:.6f}")
        lines.append(f"mAP50:95 {self.map50_95:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_detections(dets: Iterable[Detection], gts: Iterable[GtBox], classes: int, class_names=()) -> MetricsReport:
    dets, gts = list(dets), list(gts)
    ap, counts = per_class_ap(dets, gts, classes, IOU_THRESHOLDS)
    inner = np.array([sum(float(v) for v in row) / len(IOU_THRESHOLDS) for row in ap])
    return MetricsReport(
        ap50=tuple(float(v) for v in ap[:, 0]),
        ap50_95=tuple(float(v) for v in inner),
        gt_counts=tuple(int(v) for v in counts),
        map50=_class_mean(ap[:, 0], counts),
        map50_95=_class_mean(inner, counts),
        class_names=tuple(class_names),
    )


def read_detection_file(path) -> list:
    """Parse ``image_id class conf x1 y1 x2 y2`` lines."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                cls = int(parts[1])
                vals = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append(Detection(parts[0], cls, *vals))
    return out


def write_detection_file(path, dets: Iterable[Detection]) -> None:
    with fileio.atomic_open(path, "w") as fh:
        for d in dets:
            fh.write(f"{d.image_id} {d.class_id} {d.confidence:.6f} {d.x1:.2f} {d.y1:.2f} {d.x2:.2f} {d.y2:.2f}\n")
