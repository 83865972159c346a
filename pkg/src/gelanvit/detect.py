"""Anchor-based head decoding, target assignment, composite loss and NMS.

Head output layout per scale is ``[N, A*(5+K), h, w]`` with channels grouped
per anchor as ``(tx, ty, tw, th, obj, cls_0..cls_{K-1})``.  Decoding:

    center = (cell + 2*sigmoid(t_xy) - 0.5) * stride
    size   = anchor * (2*sigmoid(t_wh))**2

Targets are ``[M, 6]`` rows ``(image_index, class, cx, cy, w, h)`` with box
coordinates normalized to the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from . import tensor as T
from .metrics import Detection, iou_matrix, write_detection_file
from .tensor import Tensor
from .zoo import AnchorSet

ANCHOR_T = 4.0
NEIGHBOR_BIAS = 0.5
CIOU_EPS = 1e-7
# decoded sides never collapse below this (pixels), keeping every box size-positive
MIN_SIDE_PX = 1e-4
# containing cell, then left/up/right/down neighbours
_OFFSETS = np.array([[0, 0], [-1, 0], [0, -1], [1, 0], [0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class LossGains:
    box: float = 0.05
    cls: float = 0.5
    obj: float = 1.0

    def as_dict(self) -> dict:
        return {"box": self.box, "cls": self.cls, "obj": self.obj}


@dataclass
class LossBreakdown:
    """Ungained components plus the gained total.

    ``total_tensor`` carries the tape; the float fields are detached copies.
    """

    box: float
    cls: float
    obj: float
    total: float
    gains: LossGains
    total_tensor: Optional[Tensor] = None
    n_assigned: int = 0
    n_unassigned: int = 0

    @staticmethod
    def combine(box: float, cls: float, obj: float, gains: LossGains) -> float:
        return box * gains.box + cls * gains.cls + obj * gains.obj


@dataclass(frozen=True)
class NmsConfig:
    conf_thresh: float = 0.25
    iou_thresh: float = 0.45
    max_det: int = 300


@dataclass
class ScaleAssignment:
    """Matched (image, anchor, cell) rows for one scale plus their targets in grid units."""

    image: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    tbox: np.ndarray  # [M,4] (x offset in cell, y offset, w, h) in grid units
    tcls: np.ndarray
    gt_index: np.ndarray  # row into the targets array

    def __len__(self) -> int:
        return len(self.image)


@dataclass
class Assignment:
    scales: list
    ratio_masks: list  # per scale [M, A]: anchor passes the shape-ratio test
    unassigned: np.ndarray  # target rows that matched no anchor at any scale
    crowded: np.ndarray  # ratio-matched rows that lost every cell slot to other targets

    @property
    def n_assigned(self) -> int:
        return sum(len(s) for s in self.scales)

    def matched_pairs(self) -> set:
        """``{(gt_row, scale, anchor)}`` that passed the ratio test."""
        return {(int(g), s, int(a)) for s, m in enumerate(self.ratio_masks) for g, a in zip(*np.nonzero(m))}


def check_layout(raw_shape: tuple, anchors_per_scale: int, num_classes: int) -> None:
    expected = anchors_per_scale * (5 + num_classes)
    if len(raw_shape) != 4 or raw_shape[1] != expected:
        raise T.ShapeError(f"head output {tuple(raw_shape)} does not have A*(5+K) = {expected} channels")


def _grid(h: int, w: int):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return gx, gy


def decode_arrays(raws: Sequence, anchors: AnchorSet, num_classes: int) -> tuple:
    """Decode head outputs to ``(boxes [N,M,4] xyxy px, obj [N,M], cls_prob [N,M,K])``.

    Candidate order is scale, anchor, row, column.
    """
    boxes, objs, probs = [], [], []
    for s, raw in enumerate(raws):
        r = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
        a_count = len(anchors.anchors[s])
        check_layout(r.shape, a_count, num_classes)
        n, _, h, w = r.shape
        p = expit(r.astype(np.float64).reshape(n, a_count, 5 + num_classes, h, w))
        gx, gy = _grid(h, w)
        stride = anchors.strides[s]
        anc = anchors.array(s)
        cx = (gx + 2.0 * p[:, :, 0] - 0.5) * stride
        cy = (gy + 2.0 * p[:, :, 1] - 0.5) * stride
        bw = np.maximum(anc[None, :, 0, None, None] * (2.0 * p[:, :, 2]) ** 2, MIN_SIDE_PX)
        bh = np.maximum(anc[None, :, 1, None, None] * (2.0 * p[:, :, 3]) ** 2, MIN_SIDE_PX)
        xyxy = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)
        boxes.append(xyxy.reshape(n, -1, 4))
        objs.append(p[:, :, 4].reshape(n, -1))
        probs.append(np.moveaxis(p[:, :, 5:], 2, -1).reshape(n, -1, num_classes))
    return np.concatenate(boxes, 1), np.concatenate(objs, 1), np.concatenate(probs, 1)


def decode_boxes(raws: Sequence, anchors: AnchorSet, num_classes: int, image_ids=None) -> list:
    """Every candidate as a :class:`Detection` (no thresholding, no suppression)."""
    boxes, obj, prob = decode_arrays(raws, anchors, num_classes)
    ids = image_ids if image_ids is not None else [str(i) for i in range(boxes.shape[0])]
    cls = prob.argmax(-1)
    conf = obj * prob.max(-1)
    out = []
    for b in range(boxes.shape[0]):
        for m in range(boxes.shape[1]):
            x1, y1, x2, y2 = boxes[b, m]
            out.append(Detection(ids[b], int(cls[b, m]), float(conf[b, m]), float(x1), float(y1), float(x2), float(y2)))
    return out


def encode_box(box_cxcywh, cell_xy, anchor_wh, stride: float) -> np.ndarray:
    """Raw ``(tx, ty, tw, th)`` whose decode at ``cell_xy`` with ``anchor_wh`` is ``box_cxcywh`` (pixels).

    The center must lie within (-0.5, 1.5) cells of ``cell_xy`` and each side
    within (0, 4) times the anchor side.
    """
    cx, cy, w, h = (float(v) for v in box_cxcywh)
    ox = (cx / stride - cell_xy[0] + 0.5) / 2.0
    oy = (cy / stride - cell_xy[1] + 0.5) / 2.0
    sw = math.sqrt(w / anchor_wh[0]) / 2.0
    sh = math.sqrt(h / anchor_wh[1]) / 2.0
    vals = np.array([ox, oy, sw, sh])
    if np.any(vals <= 0) or np.any(vals >= 1):
        raise ValueError("box is not representable from this cell and anchor")
    return logit(vals)


def targets_from_labels(labels_per_image: Sequence) -> np.ndarray:
    """Stack per-image ``[m,5]`` label arrays into ``[M,6]`` target rows."""
    rows = []
    for i, lab in enumerate(labels_per_image):
        lab = np.asarray(lab, dtype=np.float64).reshape(-1, 5)
        if len(lab):
            rows.append(np.concatenate([np.full((len(lab), 1), float(i)), lab], axis=1))
    return np.concatenate(rows, 0) if rows else np.zeros((0, 6))


def ratio_matches(gt_wh: np.ndarray, anchor_wh: np.ndarray, anchor_t: float = ANCHOR_T) -> np.ndarray:
    """``[M, A]`` mask: both side ratios (either direction) below ``anchor_t``."""
    r = gt_wh[:, None, :] / anchor_wh[None, :, :]
    worst = np.maximum(r, 1.0 / r).max(-1)
    return worst < anchor_t


def assign_targets(targets: np.ndarray, anchors: AnchorSet, image_hw, anchor_t: float = ANCHOR_T) -> Assignment:
    """Match targets to anchors by shape ratio and to their cell plus two nearest neighbours.

    A slot ``(image, anchor, cell)`` claimed by several targets trains toward
    one of them: a target whose center lies in the cell beats a neighbour
    claim, then the nearest center wins, then the target values themselves
    decide, so the table does not depend on target order.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
    ih, iw = image_hw
    scale_px = np.array([iw, ih, iw, ih], dtype=np.float64)
    boxes = targets[:, 2:6] * scale_px
    matched_any = np.zeros(len(targets), dtype=bool)
    has_slot = np.zeros(len(targets), dtype=bool)
    scales, masks = [], []
    for s, stride in enumerate(anchors.strides):
        gw, gh = iw // stride, ih // stride
        mask = ratio_matches(boxes[:, 2:4], anchors.array(s), anchor_t)
        masks.append(mask)
        matched_any |= mask.any(1)
        rows, anc = np.nonzero(mask)
        g = boxes[rows] / stride
        gxy = g[:, 0:2]
        frac = gxy % 1.0
        inv = np.array([gw, gh], dtype=np.float64) - gxy
        # 1 - frac, not inv % 1: a center exactly on a cell border must not claim the
        # next cell, whose offset of -1 no prediction can reach
        use = np.stack(
            [
                np.ones(len(rows), dtype=bool),
                (frac[:, 0] < NEIGHBOR_BIAS) & (gxy[:, 0] > 1.0),
                (frac[:, 1] < NEIGHBOR_BIAS) & (gxy[:, 1] > 1.0),
                ((1.0 - frac[:, 0]) < NEIGHBOR_BIAS) & (inv[:, 0] > 1.0),
                ((1.0 - frac[:, 1]) < NEIGHBOR_BIAS) & (inv[:, 1] > 1.0),
            ],
            axis=1,
        )
        sel_o, sel_r = np.nonzero(use.T)
        r_rows = rows[sel_r]
        a_sel = anc[sel_r]
        cell = np.floor(gxy[sel_r]) + _OFFSETS[sel_o]
        cell[:, 0] = np.clip(cell[:, 0], 0, gw - 1)
        cell[:, 1] = np.clip(cell[:, 1], 0, gh - 1)
        gsel = g[sel_r]
        tbox = np.concatenate([gsel[:, 0:2] - cell, gsel[:, 2:4]], axis=1)
        dist = ((tbox[:, 0:2] - 0.5) ** 2).sum(1)
        slot = ((targets[r_rows, 0] * len(anchors.anchors[s]) + a_sel) * gh + cell[:, 1]) * gw + cell[:, 0]
        t = targets[r_rows]
        order = np.lexsort((t[:, 5], t[:, 4], t[:, 3], t[:, 2], t[:, 1], dist, sel_o != 0, slot))
        first = np.ones(len(order), dtype=bool)
        first[1:] = slot[order][1:] != slot[order][:-1]
        keep = order[first]
        keep = keep[np.lexsort((sel_o[keep], r_rows[keep]))]
        has_slot[r_rows[keep]] = True
        scales.append(
            ScaleAssignment(
                image=targets[r_rows[keep], 0].astype(np.intp),
                anchor=a_sel[keep].astype(np.intp),
                gy=cell[keep, 1].astype(np.intp),
                gx=cell[keep, 0].astype(np.intp),
                tbox=tbox[keep],
                tcls=targets[r_rows[keep], 1].astype(np.intp),
                gt_index=r_rows[keep].astype(np.intp),
            )
        )
    return Assignment(scales, masks, np.nonzero(~matched_any)[0], np.nonzero(matched_any & ~has_slot)[0])


def ciou(p: Sequence[Tensor], t: np.ndarray) -> Tensor:
    """CIoU between predicted ``(x, y, w, h)`` tensors and target ``[M,4]`` rows (same units).

    The aspect weight ``alpha`` stays on the tape so the gradient is the exact
    derivative of the returned value.
    """
    px, py, pw, ph = p
    tx, ty, tw, th = (t[:, i] for i in range(4))
    eps = CIOU_EPS
    p_x1, p_x2 = px - pw * 0.5, px + pw * 0.5
    p_y1, p_y2 = py - ph * 0.5, py + ph * 0.5
    t_x1, t_x2 = tx - tw / 2, tx + tw / 2
    t_y1, t_y2 = ty - th / 2, ty + th / 2
    iw = T.clamp_min(T.minimum(p_x2, t_x2) - T.maximum(p_x1, t_x1), 0.0)
    ih = T.clamp_min(T.minimum(p_y2, t_y2) - T.maximum(p_y1, t_y1), 0.0)
    inter = iw * ih
    union = pw * ph + (tw * th + eps) - inter
    iou = inter / union
    cw = T.maximum(p_x2, t_x2) - T.minimum(p_x1, t_x1)
    ch = T.maximum(p_y2, t_y2) - T.minimum(p_y1, t_y1)
    c2 = cw * cw + ch * ch + eps
    rho2 = ((px - tx) ** 2 + (py - ty) ** 2)
    v = (4.0 / math.pi**2) * (T.atan(pw / (ph + eps)) - np.arctan(tw / (th + eps))) ** 2
    alpha = v / (v - iou + (1.0 + eps))
    return iou - (rho2 / c2 + v * alpha)


def ciou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference CIoU on ``[M,4]`` xywh arrays."""
    ta = [Tensor(a[:, i].astype(np.float64)) for i in range(4)]
    return ciou(ta, np.asarray(b, dtype=np.float64)).data


def compute_loss(
    raws: Sequence[Tensor],
    targets: np.ndarray,
    anchors: AnchorSet,
    num_classes: int,
    image_hw,
    gains: LossGains = LossGains(),
    anchor_t: float = ANCHOR_T,
    assignment: Optional[Assignment] = None,
) -> LossBreakdown:
    """``box = mean(1 - CIoU)``, ``cls`` and ``obj`` binary cross-entropy means, gained total."""
    if assignment is None:
        assignment = assign_targets(targets, anchors, image_hw, anchor_t)
    box_terms, cls_terms = [], []
    obj_sum, obj_count = None, 0
    n_cls = 0
    for s, raw in enumerate(raws):
        a_count = len(anchors.anchors[s])
        check_layout(raw.shape, a_count, num_classes)
        n, _, h, w = raw.shape
        r5 = raw.reshape(n, a_count, 5 + num_classes, h, w)
        sa = assignment.scales[s]
        tobj = np.zeros((n, a_count, h, w), dtype=raw.dtype)
        if len(sa):
            sel = T.getitem(r5, (sa.image, sa.anchor, slice(None), sa.gy, sa.gx))
            pxy = T.sigmoid(sel[:, 0:2]) * 2.0 - 0.5
            pwh = (T.sigmoid(sel[:, 2:4]) * 2.0) ** 2 * (anchors.array(s)[sa.anchor] / anchors.strides[s])
            iou = ciou((pxy[:, 0], pxy[:, 1], pwh[:, 0], pwh[:, 1]), sa.tbox)
            box_terms.append((1.0 - iou).sum())
            onehot = np.zeros((len(sa), num_classes), dtype=raw.dtype)
            onehot[np.arange(len(sa)), sa.tcls] = 1.0
            cls_terms.append(T.bce_with_logits(sel[:, 5:], onehot).sum())
            n_cls += onehot.size
            tobj[sa.image, sa.anchor, sa.gy, sa.gx] = 1.0
        obj_logits = r5[:, :, 4]
        term = T.bce_with_logits(obj_logits, tobj).sum()
        obj_sum = term if obj_sum is None else obj_sum + term
        obj_count += tobj.size
    obj = obj_sum * (1.0 / obj_count)
    n_box = assignment.n_assigned
    if n_box:
        box = _sum(box_terms) * (1.0 / n_box)
        cls = _sum(cls_terms) * (1.0 / n_cls)
        total = box * gains.box + cls * gains.cls + obj * gains.obj
        bval, cval = float(box.data), float(cls.data)
    else:
        total = obj * gains.obj
        bval = cval = 0.0
    oval = float(obj.data)
    return LossBreakdown(
        box=bval,
        cls=cval,
        obj=oval,
        total=float(total.data),
        gains=gains,
        total_tensor=total,
        n_assigned=n_box,
        n_unassigned=len(assignment.unassigned),
    )


def _sum(terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Indices kept by per-class greedy suppression, in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        ious = iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1 :] &= ious[i, i + 1 :] < iou_thresh
    keep = np.array(keep, dtype=np.intp)
    return keep[np.argsort(-scores[keep], kind="stable")] if len(keep) else keep


def nms(dets: Sequence[Detection], iou_thresh: float = 0.45, conf_thresh: float = 0.25, max_det: Optional[int] = None) -> list:
    """Per-image, per-class greedy suppression of detections above ``conf_thresh``."""
    out = []
    by_image: dict = {}
    for d in dets:
        if d.confidence > conf_thresh:
            by_image.setdefault(d.image_id, []).append(d)
    for image_id in sorted(by_image, key=str):
        group = by_image[image_id]
        boxes = np.array([d.xyxy for d in group], dtype=np.float64)
        scores = np.array([d.confidence for d in group])
        classes = np.array([d.class_id for d in group])
        keep = nms_arrays(boxes, scores, classes, iou_thresh)
        if max_det is not None:
            keep = keep[:max_det]
        out.extend(group[i] for i in keep)
    return out


def postprocess(raws: Sequence, anchors: AnchorSet, num_classes: int, cfg: NmsConfig = NmsConfig(), image_ids=None) -> list:
    """Decode, threshold and suppress; returns one list of detections per image."""
    boxes, obj, prob = decode_arrays(raws, anchors, num_classes)
    n = boxes.shape[0]
    ids = image_ids if image_ids is not None else [str(i) for i in range(n)]
    cls = prob.argmax(-1)
    conf = obj * prob.max(-1)
    results = []
    for b in range(n):
        m = conf[b] > cfg.conf_thresh
        bx, sc, cl = boxes[b][m], conf[b][m], cls[b][m]
        ok = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
        bx, sc, cl = bx[ok], sc[ok], cl[ok]
        keep = nms_arrays(bx, sc, cl, cfg.iou_thresh)[: cfg.max_det]
        results.append(
            [Detection(ids[b], int(cl[i]), float(sc[i]), *(float(v) for v in bx[i])) for i in keep]
        )
    return results


def write_detections(path, dets: Sequence[Detection]) -> None:
    write_detection_file(path, dets)
