"""Synthetic BEV world: scenes, LiDAR point sets, camera-branch maps.

The world is a square metric plane centered on the ego vehicle, rasterized
to a fixed grid.  Each sequence carries a handful of oriented boxes with
constant per-object motion plus a smoothly moving ego: per frame, boxes,
LiDAR returns, and camera occupancy are all expressed in that frame's ego
coordinates, with the ego pose kept around for temporal warping.

The camera branch is rendered from the same boxes but observed through a
deliberately wrong calibration: a fixed rigid transform plus a low
frequency sinusoidal distortion, both drawn once per dataset.  This is the
cross-sensor miscalibration the fusion stage is asked to absorb.

Weak/strong augmentation policies here are declared stand-ins: small
integer-cell translation and axis flip (weak), plus feature dropout
patches and amplitude jitter on the camera maps (strong).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, GenerationError
from .geometry import Box, RigidTransform

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Grid:
    """Square BEV raster: ``size`` cells per side over ``extent`` meters."""

    size: int = 64
    extent: float = 51.2

    @property
    def cell(self) -> float:
        return self.extent / self.size

    def cell_centers(self):
        """(H, W) meshgrids of metric x and y cell-center coordinates."""
        half = 0.5 * self.extent
        coords = (np.arange(self.size) + 0.5) * self.cell - half
        xs, ys = np.meshgrid(coords, coords)
        return xs, ys

    def to_cells(self, pts: np.ndarray) -> np.ndarray:
        """Metric (x, y) points -> fractional (row, col) grid coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        half = 0.5 * self.extent
        col = (pts[..., 0] + half) / self.cell - 0.5
        row = (pts[..., 1] + half) / self.cell - 0.5
        return np.stack([row, col], axis=-1)

    def x_of_col(self, j):
        return (np.asarray(j) + 0.5) * self.cell - 0.5 * self.extent

    def y_of_row(self, i):
        return (np.asarray(i) + 0.5) * self.cell - 0.5 * self.extent


@dataclass
class Misalignment:
    """Camera-vs-LiDAR calibration error: rigid part plus sinusoidal warp."""

    transform: RigidTransform
    distortion_amp: float = 0.0  # cells
    distortion_freq: float = 1.0  # cycles across the extent
    phases: tuple[float, float] = (0.0, 0.0)

    @staticmethod
    def identity() -> "Misalignment":
        return Misalignment(RigidTransform.identity())


@dataclass
class Scene:
    """One frame: oriented boxes in the ego frame plus the ego pose."""

    boxes: list[Box]
    ego_pose: RigidTransform
    timestamp: int = 0


@dataclass
class Sample:
    """A training/eval sample: current frame inputs plus short history.

    ``cam_maps[0]`` is the current frame; ``rel_transforms[k]`` maps
    current-frame metric coordinates into the frame of ``cam_maps[k + 1]``.
    """

    cam_maps: list[np.ndarray]
    rel_transforms: list[RigidTransform]
    points: np.ndarray
    boxes: list[Box]
    seq_id: int = 0
    frame_id: int = 0


# -- class geometry ------------------------------------------------------------

_CLASS_SIZES = (
    ((1.8, 2.3), (4.0, 5.0)),  # long vehicles
    ((1.3, 1.8), (2.2, 3.2)),  # compact vehicles
    ((0.8, 1.4), (0.8, 1.6)),  # small quasi-square obstacles
)


def _box_frame(box: Box, xs, ys):
    """Coordinates of grid points in the box frame (rotate by -yaw)."""
    dx = xs - box.cx
    dy = ys - box.cy
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    return c * dx + s * dy, -s * dx + c * dy


def render_occupancy(boxes, grid: Grid, classes: int, soft: bool = True) -> np.ndarray:
    """Per-class occupancy channels rendered from boxes.

    Soft mode ramps linearly over one cell at box edges (an approximate
    coverage fraction); hard mode is a cell-center-inside-box indicator.
    """
    out = np.zeros((classes, grid.size, grid.size))
    xs, ys = grid.cell_centers()
    for box in boxes:
        ux, uy = _box_frame(box, xs, ys)
        if soft:
            covx = np.clip((0.5 * box.w - np.abs(ux)) / grid.cell + 0.5, 0.0, 1.0)
            covy = np.clip((0.5 * box.l - np.abs(uy)) / grid.cell + 0.5, 0.0, 1.0)
            val = covx * covy
        else:
            val = ((np.abs(ux) <= 0.5 * box.w) & (np.abs(uy) <= 0.5 * box.l)).astype(
                float
            )
        ch = out[box.class_id]
        np.maximum(ch, val, out=ch)
    return out


def cells_inside_boxes(boxes, grid: Grid):
    """Per-cell owning-box index (-1 for free cells), smallest box wins ties."""
    owner = np.full((grid.size, grid.size), -1, dtype=np.int64)
    xs, ys = grid.cell_centers()
    order = sorted(range(len(boxes)), key=lambda k: -boxes[k].area)
    for k in order:
        box = boxes[k]
        ux, uy = _box_frame(box, xs, ys)
        inside = (np.abs(ux) <= 0.5 * box.w) & (np.abs(uy) <= 0.5 * box.l)
        owner[inside] = k
    return owner


# -- sensors ---------------------------------------------------------------------


def simulate_lidar(
    scene: Scene,
    points_per_box: int,
    noise_sigma: float,
    seed: int,
    clutter_points: int = 32,
    extent: float = 51.2,
) -> np.ndarray:
    """Perimeter-sampled object returns plus uniform background clutter."""
    if points_per_box <= 0:
        raise ConfigurationError("points_per_box must be positive")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    pts = []
    for box in scene.boxes:
        t = rng.uniform(0.0, 1.0, size=points_per_box)
        per = 2.0 * (box.w + box.l)
        d = t * per
        local = np.zeros((points_per_box, 2))
        # walk the rectangle perimeter: bottom, right, top, left
        seg = np.minimum(d, box.w)
        local[:, 0] = -0.5 * box.w + seg
        local[:, 1] = -0.5 * box.l
        m = d > box.w
        seg = np.minimum(d[m] - box.w, box.l)
        local[m, 0] = 0.5 * box.w
        local[m, 1] = -0.5 * box.l + seg
        m = d > box.w + box.l
        seg = np.minimum(d[m] - box.w - box.l, box.w)
        local[m, 0] = 0.5 * box.w - seg
        local[m, 1] = 0.5 * box.l
        m = d > 2 * box.w + box.l
        seg = d[m] - 2 * box.w - box.l
        local[m, 0] = -0.5 * box.w
        local[m, 1] = 0.5 * box.l - seg
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        world = local @ np.array([[c, s], [-s, c]]) + np.array([box.cx, box.cy])
        if noise_sigma > 0:
            world = world + rng.normal(0.0, noise_sigma, size=world.shape)
        pts.append(world)
    clutter = rng.uniform(-0.5 * extent, 0.5 * extent, size=(clutter_points, 2))
    pts.append(clutter)
    return np.concatenate(pts, axis=0) if pts else np.zeros((0, 2))


def _bilinear_np(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Border-zero bilinear lookup on a (C, H, W) array (pure numpy)."""
    c, h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    wr = rows - r0
    wc = cols - c0
    out = np.zeros((c,) + rows.shape)
    flat = img.reshape(c, h * w)
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.clip(rr, 0, h - 1) * w + np.clip(cc, 0, w - 1)
        wgt = (wr if dr else 1.0 - wr) * (wc if dc else 1.0 - wc)
        out += flat[:, idx] * (wgt * valid)
    return out


def simulate_camera_bev(
    scene: Scene,
    misalign: Misalignment,
    seed: int,
    grid: Grid,
    classes: int,
    noise_sigma: float = 0.05,
) -> np.ndarray:
    """Per-class soft occupancy as seen through the wrong calibration.

    The true map is rendered, then resampled so that scene content at x
    appears at ``misalign.transform(x)`` plus the sinusoidal displacement,
    then perturbed with feature noise.  Deterministic given the seed.
    """
    true_map = render_occupancy(scene.boxes, grid, classes, soft=True)
    rng = np.random.default_rng(seed)
    xs, ys = grid.cell_centers()
    inv = misalign.transform.inverse()
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    if misalign.distortion_amp != 0.0:
        k = 2.0 * np.pi * misalign.distortion_freq / grid.extent
        amp = misalign.distortion_amp * grid.cell
        src = src + np.stack(
            [
                amp * np.sin(k * ys.ravel() + misalign.phases[0]),
                amp * np.sin(k * xs.ravel() + misalign.phases[1]),
            ],
            axis=-1,
        )
    rc = grid.to_cells(src)
    warped = _bilinear_np(
        true_map, rc[:, 0].reshape(xs.shape), rc[:, 1].reshape(xs.shape)
    )
    if noise_sigma > 0:
        warped = warped + rng.normal(0.0, noise_sigma, size=warped.shape)
    return warped


# -- dataset ------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a dataset deterministically."""

    seed: int
    n_sequences: int
    seq_len: int
    grid: Grid
    classes: int = 3
    labeled_fraction: float = 1.0
    points_per_box: int = 48
    lidar_noise: float = 0.05
    clutter_points: int = 32
    camera_noise: float = 0.05
    max_boxes: int = 5
    min_boxes: int = 2
    misalign_cells: float = 0.0
    misalign_deg: float = 0.0
    distortion_amp: float = 0.0
    distortion_freq: float = 1.0


@dataclass
class SceneDataset:
    """Generated sequences plus the labeled/unlabeled index split."""

    spec: DatasetSpec
    scenes: list[Scene]
    points: list[np.ndarray]
    labeled: list[int]
    unlabeled: list[int]
    misalign: Misalignment
    _cam_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.scenes)

    @property
    def grid(self) -> Grid:
        return self.spec.grid

    def camera_map(self, idx: int) -> np.ndarray:
        if idx not in self._cam_cache:
            seed = _derive_seed(self.spec.seed, "camera", idx)
            self._cam_cache[idx] = simulate_camera_bev(
                self.scenes[idx],
                self.misalign,
                seed,
                self.spec.grid,
                self.spec.classes,
                self.spec.camera_noise,
            )
        return self._cam_cache[idx]

    def sample(self, idx: int, history: int = 0) -> Sample:
        """Assemble a sample with up to ``history`` earlier frames."""
        seq, t = divmod(idx, self.spec.seq_len)
        scene = self.scenes[idx]
        cam_maps = [self.camera_map(idx)]
        rel = []
        cur_pose = scene.ego_pose
        for k in range(1, history + 1):
            if t - k < 0:
                break
            prev_idx = idx - k
            cam_maps.append(self.camera_map(prev_idx))
            prev_pose = self.scenes[prev_idx].ego_pose
            rel.append(prev_pose.inverse().compose(cur_pose))
        return Sample(
            cam_maps=cam_maps,
            rel_transforms=rel,
            points=self.points[idx],
            boxes=list(scene.boxes),
            seq_id=seq,
            frame_id=t,
        )

    # -- persistence ----------------------------------------------------------------

    def save(self, root):
        from pathlib import Path

        root = Path(root)
        (root / "scenes").mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": _FORMAT_VERSION,
            "seed": self.spec.seed,
            "n_sequences": self.spec.n_sequences,
            "seq_len": self.spec.seq_len,
            "grid_size": self.spec.grid.size,
            "extent": self.spec.grid.extent,
            "classes": self.spec.classes,
            "labeled_fraction": self.spec.labeled_fraction,
            "points_per_box": self.spec.points_per_box,
            "lidar_noise": self.spec.lidar_noise,
            "clutter_points": self.spec.clutter_points,
            "camera_noise": self.spec.camera_noise,
            "max_boxes": self.spec.max_boxes,
            "min_boxes": self.spec.min_boxes,
            "misalign_cells": self.spec.misalign_cells,
            "misalign_deg": self.spec.misalign_deg,
            "distortion_amp": self.spec.distortion_amp,
            "distortion_freq": self.spec.distortion_freq,
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "misalign_rotation": self.misalign.transform.rotation.ravel().tolist(),
            "misalign_translation": self.misalign.transform.translation.tolist(),
            "misalign_phases": list(self.misalign.phases),
            "n_scenes": len(self.scenes),
        }
        (root / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True)
        )
        for i, (scene, pts) in enumerate(zip(self.scenes, self.points)):
            (root / "scenes" / f"scene_{i:05d}.bin").write_bytes(
                _scene_record(scene, pts)
            )

    @staticmethod
    def load(root) -> "SceneDataset":
        from pathlib import Path

        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest["format_version"] != _FORMAT_VERSION:
            raise ConfigurationError("unsupported dataset format version")
        spec = DatasetSpec(
            seed=manifest["seed"],
            n_sequences=manifest["n_sequences"],
            seq_len=manifest["seq_len"],
            grid=Grid(manifest["grid_size"], manifest["extent"]),
            classes=manifest["classes"],
            labeled_fraction=manifest["labeled_fraction"],
            points_per_box=manifest["points_per_box"],
            lidar_noise=manifest["lidar_noise"],
            clutter_points=manifest["clutter_points"],
            camera_noise=manifest["camera_noise"],
            max_boxes=manifest["max_boxes"],
            min_boxes=manifest["min_boxes"],
            misalign_cells=manifest["misalign_cells"],
            misalign_deg=manifest["misalign_deg"],
            distortion_amp=manifest["distortion_amp"],
            distortion_freq=manifest["distortion_freq"],
        )
        misalign = Misalignment(
            RigidTransform(
                np.array(manifest["misalign_rotation"]).reshape(2, 2),
                np.array(manifest["misalign_translation"]),
            ),
            spec.distortion_amp,
            spec.distortion_freq,
            tuple(manifest["misalign_phases"]),
        )
        scenes, points = [], []
        for i in range(manifest["n_scenes"]):
            blob = (root / "scenes" / f"scene_{i:05d}.bin").read_bytes()
            scene, pts = _parse_scene_record(blob, i % spec.seq_len)
            scenes.append(scene)
            points.append(pts)
        return SceneDataset(
            spec=spec,
            scenes=scenes,
            points=points,
            labeled=list(manifest["labeled"]),
            unlabeled=list(manifest["unlabeled"]),
            misalign=misalign,
        )


def _scene_record(scene: Scene, pts: np.ndarray) -> bytes:
    """Little-endian record: boxes (6 f64 + 1 i32 each), points, ego pose.

    The sixth box double is reserved (written as 0) so records stay
    fixed-stride if a height field is ever needed.
    """
    out = bytearray()
    out += struct.pack("<i", len(scene.boxes))
    for b in scene.boxes:
        out += struct.pack("<6d", b.cx, b.cy, b.w, b.l, b.yaw, 0.0)
        out += struct.pack("<i", b.class_id)
    out += struct.pack("<i", len(pts))
    out += np.ascontiguousarray(pts, dtype="<f8").tobytes()
    pose = scene.ego_pose
    out += struct.pack(
        "<6d",
        pose.rotation[0, 0],
        pose.rotation[0, 1],
        pose.rotation[1, 0],
        pose.rotation[1, 1],
        pose.translation[0],
        pose.translation[1],
    )
    return bytes(out)


def _parse_scene_record(blob: bytes, timestamp: int):
    off = 0
    (nb,) = struct.unpack_from("<i", blob, off)
    off += 4
    boxes = []
    for _ in range(nb):
        cx, cy, w, l, yaw, _res = struct.unpack_from("<6d", blob, off)
        off += 48
        (cid,) = struct.unpack_from("<i", blob, off)
        off += 4
        boxes.append(Box(cx, cy, w, l, yaw, cid))
    (npts,) = struct.unpack_from("<i", blob, off)
    off += 4
    pts = np.frombuffer(blob, dtype="<f8", count=2 * npts, offset=off).reshape(-1, 2)
    off += 16 * npts
    r00, r01, r10, r11, tx, ty = struct.unpack_from("<6d", blob, off)
    pose = RigidTransform(np.array([[r00, r01], [r10, r11]]), np.array([tx, ty]))
    return Scene(boxes=boxes, ego_pose=pose, timestamp=timestamp), pts.copy()


def _derive_seed(base: int, tag: str, *args) -> int:
    """Stable, platform-independent child seed from a base seed and a tag."""
    h = hashlib.sha256()
    h.update(str(base).encode())
    h.update(tag.encode())
    for a in args:
        h.update(str(int(a)).encode())
    return int.from_bytes(h.digest()[:8], "little")


def generate_dataset(spec: DatasetSpec) -> SceneDataset:
    """Deterministic world generation from a spec; see module docstring."""
    if not 0.0 < spec.labeled_fraction <= 1.0:
        raise ConfigurationError("labeled_fraction must lie in (0, 1]")
    if spec.seq_len < 1 or spec.n_sequences < 1:
        raise ConfigurationError("need at least one sequence of length >= 1")
    rng = np.random.default_rng(_derive_seed(spec.seed, "world"))
    extent = spec.grid.extent
    margin = 6.0
    cell = spec.grid.cell

    scenes: list[Scene] = []
    for seq in range(spec.n_sequences):
        for attempt in range(80):
            if _try_sequence(spec, rng, seq, extent, margin, scenes):
                break
        else:
            raise GenerationError(
                f"could not place sequence {seq} after 80 attempts (seed {spec.seed})"
            )

    points = [
        simulate_lidar(
            sc,
            spec.points_per_box,
            spec.lidar_noise,
            _derive_seed(spec.seed, "lidar", i),
            spec.clutter_points,
            extent,
        )
        for i, sc in enumerate(scenes)
    ]

    n = len(scenes)
    n_labeled = int(np.ceil(spec.labeled_fraction * n))
    perm = np.random.default_rng(_derive_seed(spec.seed, "split")).permutation(n)
    labeled = sorted(int(i) for i in perm[:n_labeled])
    unlabeled = sorted(int(i) for i in perm[n_labeled:])

    mis_rng = np.random.default_rng(_derive_seed(spec.seed, "misalign"))
    angle = np.deg2rad(spec.misalign_deg) * mis_rng.uniform(-1.0, 1.0)
    shift = spec.misalign_cells * cell * mis_rng.uniform(-1.0, 1.0, size=2)
    misalign = Misalignment(
        RigidTransform.from_angle(angle, shift),
        spec.distortion_amp,
        spec.distortion_freq,
        tuple(mis_rng.uniform(0.0, 2.0 * np.pi, size=2)),
    )
    return SceneDataset(
        spec=spec,
        scenes=scenes,
        points=points,
        labeled=labeled,
        unlabeled=unlabeled,
        misalign=misalign,
    )


def _try_sequence(spec, rng, seq, extent, margin, scenes_out) -> bool:
    """Roll one sequence; append its frames and return True if valid."""
    from .geometry import iou_bev

    n_boxes = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
    lim = 0.5 * extent - margin
    centers = rng.uniform(-lim * 0.85, lim * 0.85, size=(n_boxes, 2))
    yaws = rng.uniform(-np.pi, np.pi, size=n_boxes)
    classes = rng.integers(0, spec.classes, size=n_boxes)
    sizes = np.zeros((n_boxes, 2))
    for k in range(n_boxes):
        (w_lo, w_hi), (l_lo, l_hi) = _CLASS_SIZES[classes[k] % len(_CLASS_SIZES)]
        sizes[k] = (rng.uniform(w_lo, w_hi), rng.uniform(l_lo, l_hi))
    vel = rng.uniform(-0.8, 0.8, size=(n_boxes, 2))
    yaw_rate = rng.uniform(-0.04, 0.04, size=n_boxes)

    ego_vel = rng.uniform(-1.2, 1.2, size=2)
    ego_yaw_rate = rng.uniform(-0.03, 0.03)

    frames = []
    for t in range(spec.seq_len):
        ego_theta = ego_yaw_rate * t
        ego_t = ego_vel * t
        ego_pose = RigidTransform.from_angle(ego_theta, ego_t)
        inv = ego_pose.inverse()
        boxes = []
        for k in range(n_boxes):
            wc = centers[k] + vel[k] * t
            wyaw = yaws[k] + yaw_rate[k] * t
            ec = inv.apply(wc)
            boxes.append(
                Box(
                    float(ec[0]),
                    float(ec[1]),
                    float(sizes[k, 0]),
                    float(sizes[k, 1]),
                    float(_wrap_angle(wyaw - ego_theta)),
                    int(classes[k]),
                )
            )
        if any(abs(b.cx) > lim or abs(b.cy) > lim for b in boxes):
            return False
        for i in range(n_boxes):
            for j in range(i + 1, n_boxes):
                if iou_bev(boxes[i], boxes[j]) >= 0.3:
                    return False
        frames.append(Scene(boxes=boxes, ego_pose=ego_pose, timestamp=t))
    scenes_out.extend(frames)
    return True


def _wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


# -- augmentation ----------------------------------------------------------------------


@dataclass
class AugmentDraw:
    """The realized augmentation, kept for geometric consistency checks."""

    shift_cells: tuple[int, int]  # (dy, dx)
    flip_y: bool
    dropout_rate: float = 0.0
    amp_factor: float = 1.0


def augment(
    sample: Sample,
    mode: str,
    seed: int,
    grid: Grid,
    max_shift_cells: int = 2,
    dropout_rate: float = 0.25,
    amp_jitter: float = 0.2,
) -> tuple[Sample, AugmentDraw]:
    """Geometrically consistent weak/strong augmentation.

    Both modes draw the same geometric part from the same seed, so a
    teacher fed ``weak`` output and a student fed ``strong`` output of the
    same (sample, seed) see identical geometry and pseudo-boxes transfer
    directly.
    """
    if mode not in ("weak", "strong"):
        raise ConfigurationError(f"unknown augmentation mode {mode!r}")
    rng = np.random.default_rng(seed)
    dy, dx = (int(v) for v in rng.integers(-max_shift_cells, max_shift_cells + 1, 2))
    flip = bool(rng.integers(0, 2))
    draw = AugmentDraw((dy, dx), flip)

    flip_mat = np.diag([1.0, -1.0]) if flip else np.eye(2)
    shift = np.array([dx * grid.cell, dy * grid.cell])

    def geo_point(p):
        return p @ flip_mat.T + shift

    cam_maps = []
    for m in sample.cam_maps:
        mm = m[:, ::-1, :] if flip else m
        cam_maps.append(_shift_map(mm, dy, dx))

    points = geo_point(sample.points) if len(sample.points) else sample.points
    boxes = [
        replace(
            b,
            cx=b.cx * flip_mat[0, 0] + shift[0],
            cy=b.cy * flip_mat[1, 1] + shift[1],
            yaw=_wrap_angle(-b.yaw) if flip else b.yaw,
        )
        for b in sample.boxes
    ]
    rel = []
    for T in sample.rel_transforms:
        rot = flip_mat @ T.rotation @ flip_mat
        trans = flip_mat @ T.translation + shift - rot @ shift
        rel.append(RigidTransform(rot, trans))

    if mode == "strong":
        draw.amp_factor = float(rng.uniform(1.0 - amp_jitter, 1.0 + amp_jitter))
        draw.dropout_rate = dropout_rate
        cam_maps = [m * draw.amp_factor for m in cam_maps]
        cam_maps = [_dropout_patches(m, dropout_rate, rng) for m in cam_maps]

    out = Sample(
        cam_maps=cam_maps,
        rel_transforms=rel,
        points=points,
        boxes=boxes,
        seq_id=sample.seq_id,
        frame_id=sample.frame_id,
    )
    return out, draw


def transform_boxes(boxes, draw: AugmentDraw, grid: Grid):
    """Apply an augmentation's geometric part to any box list."""
    dy, dx = draw.shift_cells
    sy = -1.0 if draw.flip_y else 1.0
    out = []
    for b in boxes:
        out.append(
            replace(
                b,
                cx=b.cx + dx * grid.cell,
                cy=sy * b.cy + dy * grid.cell,
                yaw=_wrap_angle(-b.yaw) if draw.flip_y else b.yaw,
            )
        )
    return out


def _shift_map(m: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer-cell translate with zero fill (rows move by dy, cols by dx)."""
    out = np.zeros_like(m)
    h, w = m.shape[-2:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = m[..., ys_src, xs_src]
    return out


def _dropout_patches(m: np.ndarray, rate: float, rng) -> np.ndarray:
    """Zero random rectangles totalling roughly ``rate`` of the map area."""
    if rate <= 0:
        return m
    h, w = m.shape[-2:]
    if rate >= 1.0:
        return np.zeros_like(m)
    out = m.copy()
    target = rate * h * w
    covered = 0.0
    for _ in range(64):
        if covered >= target:
            break
        ph = int(rng.integers(max(2, h // 8), max(3, h // 3)))
        pw = int(rng.integers(max(2, w // 8), max(3, w // 3)))
        r = int(rng.integers(0, h - ph + 1))
        c = int(rng.integers(0, w - pw + 1))
        out[..., r : r + ph, c : c + pw] = 0.0
        covered += ph * pw
    return out
