"""Detection scoring: AP / mAP-lite, forgetting, cross-branch agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import Detection, iou_bev


def match_detections(dets, gts, iou_thresh: float) -> set[int]:
    """Greedy score-descending one-to-one matching; returns matched GT indices.

    A detection matches the highest-overlap unmatched ground-truth box of
    the same class with IoU >= threshold.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise DomainError("iou_thresh must lie in (0, 1)")
    matched: set[int] = set()
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for i in order:
        d = dets[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if j in matched or g.class_id != d.class_id:
                continue
            iou = iou_bev(d.box, g)
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched.add(best)
    return matched


def _match_flags(dets, gts, iou_thresh):
    """Per-detection TP flags under greedy one-to-one matching."""
    matched = set()
    flags = []
    for d in dets:  # caller passes score-sorted detections
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if j in matched or g.class_id != d.class_id:
                continue
            iou = iou_bev(d.box, g)
            if iou >= iou_thresh and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            matched.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets, gts, iou_thresh: float) -> float | None:
    """All-point interpolated AP of one class on one frame set.

    ``dets``/``gts`` are flat lists with a ``frame`` attribute used to
    confine matching within frames.  Returns None when the class has no
    ground truth (excluded from the mean).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise DomainError("iou_thresh must lie in (0, 1)")
    n_gt = len(gts)
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1].score, i))
    frames = sorted({f for f, _ in dets} | {f for f, _ in gts})
    per_frame_dets = {f: [] for f in frames}
    for i in order:
        f, d = dets[i]
        per_frame_dets[f].append((i, d))
    per_frame_gts = {f: [] for f in frames}
    for f, g in gts:
        per_frame_gts[f].append(g)
    tp_by_index = {}
    for f in frames:
        ds = [d for _, d in per_frame_dets[f]]
        flags = _match_flags(ds, per_frame_gts[f], iou_thresh)
        for (i, _), flag in zip(per_frame_dets[f], flags):
            tp_by_index[i] = flag
    tps = np.array([tp_by_index[i] for i in order], dtype=float)
    cum_tp = np.cumsum(tps)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(len(order)) + 1.0)
    # precision envelope, then sum rectangle areas at recall steps
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p, t in zip(recall, precision, tps):
        if t:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


@dataclass
class EvalResult:
    per_class_ap: dict = field(default_factory=dict)
    map_lite: float = 0.0
    matched_gt_ids: set = field(default_factory=set)
    cross_branch: float | None = None

    def as_dict(self):
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map_lite": self.map_lite,
            "n_matched": len(self.matched_gt_ids),
            "cross_branch_iou": self.cross_branch,
        }


def evaluate_detections(frames, classes: int, iou_thresh: float = 0.5) -> EvalResult:
    """Score a list of (frame_id, detections, gt_boxes) triples.

    ``matched_gt_ids`` holds (frame_id, box_index) pairs matched at the
    threshold, the stable identities the forgetting metric intersects.
    """
    result = EvalResult()
    all_dets = {c: [] for c in range(classes)}
    all_gts = {c: [] for c in range(classes)}
    for frame_id, dets, gts in frames:
        for d in dets:
            all_dets[d.class_id].append((frame_id, d))
        for g in gts:
            all_gts[g.class_id].append((frame_id, g))
        sorted_dets = sorted(dets, key=lambda d: -d.score)
        matched = match_detections(sorted_dets, gts, iou_thresh)
        result.matched_gt_ids |= {(frame_id, j) for j in matched}
    aps = {}
    for c in range(classes):
        ap = average_precision(all_dets[c], all_gts[c], iou_thresh)
        if ap is not None:
            aps[c] = ap
    result.per_class_ap = aps
    result.map_lite = float(np.mean(list(aps.values()))) if aps else 0.0
    return result


def forgetting_delta(v1: set, v2: set) -> float:
    """Percentage of v1's identities missing from v2: (|v1|-|v1&v2|)/|v1|*100."""
    if not v1:
        raise DomainError("forgetting_delta needs a non-empty reference set")
    return (len(v1) - len(v1 & v2)) / len(v1) * 100.0


def cross_branch_iou(cam_dets: list[Detection], lidar_dets: list[Detection]) -> float:
    """Mean IoU of greedily paired boxes; unpaired boxes count as zero."""
    if not cam_dets and not lidar_dets:
        raise DomainError("cross_branch_iou needs at least one detection")
    pairs = []
    for i, a in enumerate(cam_dets):
        for j, b in enumerate(lidar_dets):
            iou = iou_bev(a.box, b.box)
            if iou > 0:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_a, used_b = set(), set()
    total = 0.0
    for iou, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        total += iou
    return total / max(len(cam_dets), len(lidar_dets))
