"""Oriented boxes on the BEV plane: corners, rotated IoU, NMS, rigid maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError


@dataclass
class Box:
    """Oriented rectangle: center (m), width/length (m), yaw (rad), class id."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float
    class_id: int = 0

    def corners(self) -> np.ndarray:
        """4x2 corner array, counter-clockwise for positive yaw."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hw, hl = 0.5 * self.w, 0.5 * self.l
        local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.w * self.l


@dataclass
class Detection:
    """Scored detection; ``class_probs`` keeps the classifier distribution."""

    box: Box
    class_id: int
    score: float
    class_probs: np.ndarray | None = None


@dataclass
class Proposal:
    """First-stage box with assignment bookkeeping for the second stage."""

    box: Box
    objectness: float
    cell: tuple[int, int]
    assigned_class: int = -1  # -1 means background
    assigned_box: Box | None = None
    assigned_score: float = 0.0
    iou_max: float = 0.0
    uncertainty: float = 0.0


@dataclass
class RigidTransform:
    """Proper rigid map x -> R x + t on the plane (det R = +1)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(2), atol=1e-9):
            raise ConfigurationError("rotation must be orthonormal")
        if not np.isclose(np.linalg.det(self.rotation), 1.0, atol=1e-9):
            raise ConfigurationError("rotation must be proper (det = +1)")

    @staticmethod
    def from_angle(theta: float, translation=(0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(theta), np.sin(theta)
        return RigidTransform(np.array([[c, -s], [s, c]]), np.asarray(translation))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: first apply ``other``, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def _clip_polygon(poly, a, b):
    """Keep the part of ``poly`` left of directed edge a->b (Sutherland-Hodgman)."""
    out = []
    n = len(poly)
    ex, ey = b[0] - a[0], b[1] - a[1]
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        sq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if sp >= 0:
            out.append(p)
        if (sp > 0 and sq < 0) or (sp < 0 and sq > 0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _polygon_area(poly):
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return 0.5 * abs(area)


def intersection_area(a: Box, b: Box) -> float:
    """Area of overlap of two oriented rectangles via polygon clipping."""
    poly = [tuple(p) for p in a.corners()]
    clip = [tuple(p) for p in b.corners()]
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def iou_bev(a: Box, b: Box) -> float:
    """Rotated-rectangle intersection-over-union in [0, 1]."""
    if a.w <= 0 or a.l <= 0 or b.w <= 0 or b.l <= 0:
        raise DomainError("iou_bev requires positive box extents")
    # cheap reject: circumscribed circles
    r = 0.5 * (np.hypot(a.w, a.l) + np.hypot(b.w, b.l))
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > r * r:
        return 0.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(detections: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy score-descending suppression; ties break on lower input index."""
    if not 0.0 < iou_thresh < 1.0:
        raise DomainError("iou_thresh must lie in (0, 1)")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    for i in order:
        di = detections[i]
        if all(iou_bev(di.box, detections[j].box) < iou_thresh for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]
