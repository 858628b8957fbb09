"""Two-stage detector on the fused BEV map plus auxiliary heads.

First stage is an anchor-free per-cell head: one objectness logit and six
box parameters (center offset in cells, log extent in meters, yaw as
sin/cos) per cell.  Decoded boxes at top-scoring cells become proposals;
a seeded random subset feeds the second stage, which pools a rotated 3x3
grid of features per proposal and refines class and box.

The per-cell occupancy head on the camera branch provides the auxiliary
supervision term, and two tiny 1x1 probe regressors on detached branch
features expose per-branch boxes for the cross-branch agreement metric
without influencing the representation they observe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import audit
from .encoders import (
    camera_encode,
    init_camera_encoder,
    init_lidar_encoder,
    init_temporal,
    lidar_to_bev,
    self_gate,
    temporal_enhance,
)
from .errors import ConfigurationError, DomainError
from .fusion import AlignmentFeatureNet, alignment_loss, fuse, init_fusion, moment_align
from .geometry import Box, Detection, Proposal, iou_bev, nms
from .params import ParamStore
from .tensor import (
    Tensor,
    add,
    bce_with_logits,
    bilinear_sample,
    concat,
    conv2d,
    matmul,
    mul,
    relu,
    reshape,
    smooth_l1,
    softmax_cross_entropy,
    take_channels,
    take_columns,
    tmean,
    transpose,
    tsum,
)
from .world import Grid, Sample, cells_inside_boxes, render_occupancy


@dataclass
class LossWeights:
    """Coefficients balancing the auxiliary and unsupervised terms."""

    lam: float = 0.5  # perspective-style occupancy supervision
    gamma: float = 0.1  # alignment loss
    kappa: float = 1.0  # unsupervised loss inside the student objective

    def __post_init__(self):
        for name in ("lam", "gamma", "kappa"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0")


@dataclass
class ForwardOut:
    """Everything a single forward pass produces that later stages read."""

    b_cam: Tensor
    b_lidar: Tensor
    b_fuse: Tensor
    rpn_obj: Tensor  # (1, H, W) logits
    rpn_box: Tensor  # (6, H, W)
    b_out: Tensor | None = None
    align: tuple | None = None  # (b_out_a, b_fuse_a, lidar_detached)
    cam_probe: tuple | None = None  # (obj, box) maps from detached camera branch
    lidar_probe: tuple | None = None


class Pipeline:
    """Owns the architecture hyperparameters and assembles forward passes."""

    def __init__(
        self,
        grid: Grid,
        classes: int = 3,
        channels: int = 8,
        history: int = 2,
        rpn_hidden: int = 16,
        roi_hidden: int = 32,
        rpn_topk: int = 48,
        roi_samples: int = 32,
        roi_min_neg: int = 6,
        pos_weight: float = 20.0,
        align_eps: float = 1e-5,
        surrogate_seed: int = 7,
        use_aligned_fusion: bool = True,
        use_temporal: bool = True,
        use_perspective: bool = True,
        probe_weight: float = 0.5,
    ):
        if grid.size % 16:
            raise ConfigurationError("grid size must be divisible by 16")
        self.grid = grid
        self.classes = classes
        self.channels = channels
        self.history = history
        self.rpn_hidden = rpn_hidden
        self.roi_hidden = roi_hidden
        self.rpn_topk = rpn_topk
        self.roi_samples = roi_samples
        self.roi_min_neg = roi_min_neg
        self.pos_weight = pos_weight
        self.align_eps = align_eps
        self.use_aligned_fusion = use_aligned_fusion
        self.use_temporal = use_temporal
        self.use_perspective = use_perspective
        self.probe_weight = probe_weight
        self.background = classes
        self.feature_net = AlignmentFeatureNet(channels, surrogate_seed)

    # -- parameters -------------------------------------------------------------

    def init_params(self, seed: int) -> ParamStore:
        from .encoders import he_conv

        rng = np.random.default_rng(seed)
        p = ParamStore()
        c = self.channels
        init_camera_encoder(p, rng, self.classes, c)
        init_temporal(p, rng, c, self.history)
        init_lidar_encoder(p, rng, c)
        if self.use_aligned_fusion:
            init_fusion(p, rng, c)
        else:
            p.add("naive1.w", he_conv(rng, c, 2 * c, 3))
            p.add("naive1.b", np.zeros(c))
            p.add("naive2.w", he_conv(rng, c, c, 3))
            p.add("naive2.b", np.zeros(c))
        p.add("rpn.conv1.w", he_conv(rng, self.rpn_hidden, c, 3))
        p.add("rpn.conv1.b", np.zeros(self.rpn_hidden))
        p.add("rpn.head.w", he_conv(rng, 7, self.rpn_hidden, 1))
        p.add("rpn.head.b", np.zeros(7))
        fan = c * 9
        p.add("roi.fc.w", rng.normal(0.0, np.sqrt(2.0 / fan), size=(fan, self.roi_hidden)))
        p.add("roi.fc.b", np.zeros(self.roi_hidden))
        p.add(
            "roi.cls.w",
            rng.normal(0.0, 0.05, size=(self.roi_hidden, self.classes + 1)),
        )
        p.add("roi.cls.b", np.zeros(self.classes + 1))
        p.add("roi.reg.w", rng.normal(0.0, 0.05, size=(self.roi_hidden, 6)))
        p.add("roi.reg.b", np.zeros(6))
        if self.use_perspective:
            p.add("pers.w", he_conv(rng, self.classes, c, 3))
            p.add("pers.b", np.zeros(self.classes))
        p.add("probe_cam.w", he_conv(rng, 7, c, 1))
        p.add("probe_cam.b", np.zeros(7))
        p.add("probe_lidar.w", he_conv(rng, 7, c, 1))
        p.add("probe_lidar.b", np.zeros(7))
        return p

    def lidar_param_names(self, params: ParamStore) -> list[str]:
        return [n for n in params.names() if n.startswith("lidar.")]

    # -- forward ------------------------------------------------------------------

    def forward(
        self,
        sample: Sample,
        params: ParamStore,
        need_alignment: bool = False,
        need_probes: bool = False,
        align_lidar_const: np.ndarray | None = None,
    ) -> ForwardOut:
        cam_frames = [camera_encode(m, params) for m in sample.cam_maps]
        pairs = (
            list(zip(cam_frames[1:], sample.rel_transforms))[: self.history]
            if self.use_temporal
            else []
        )
        b_cam = temporal_enhance(cam_frames[0], pairs, params, self.grid, self.history)
        b_lidar = self_gate(lidar_to_bev(sample.points, params, self.grid))

        b_out = None
        if self.use_aligned_fusion:
            b_out = moment_align(b_cam, b_lidar, self.align_eps)
            b_fuse = fuse(b_out, b_lidar, params)
        else:
            audit.record("naive_fuse")
            x = concat([b_cam, b_lidar], axis=0)
            x = relu(conv2d(x, params["naive1.w"], params["naive1.b"], padding=1))
            b_fuse = conv2d(x, params["naive2.w"], params["naive2.b"], padding=1)

        h = relu(conv2d(b_fuse, params["rpn.conv1.w"], params["rpn.conv1.b"], padding=1))
        maps = conv2d(h, params["rpn.head.w"], params["rpn.head.b"])
        rpn_obj = take_channels(maps, 0, 1)
        rpn_box = take_channels(maps, 1, 7)

        out = ForwardOut(b_cam, b_lidar, b_fuse, rpn_obj, rpn_box, b_out=b_out)
        if need_alignment and self.use_aligned_fusion:
            # gradients of the alignment loss must never reach the LiDAR
            # encoder, so its branch re-fuses from a detached LiDAR map
            lid_d = (
                Tensor(align_lidar_const)
                if align_lidar_const is not None
                else b_lidar.detach()
            )
            b_out_a = moment_align(b_cam, lid_d, self.align_eps)
            b_fuse_a = fuse(b_out_a, lid_d, params)
            out.align = (b_out_a, b_fuse_a, lid_d)
        if need_probes:
            out.cam_probe = self._probe_maps(b_cam.detach(), params, "probe_cam")
            out.lidar_probe = self._probe_maps(b_lidar.detach(), params, "probe_lidar")
        return out

    @staticmethod
    def _probe_maps(fm: Tensor, params: ParamStore, prefix: str):
        maps = conv2d(fm, params[f"{prefix}.w"], params[f"{prefix}.b"])
        return take_channels(maps, 0, 1), take_channels(maps, 1, 7)

    def perspective_logits(self, b_cam: Tensor, params: ParamStore) -> Tensor:
        audit.record("perspective_head")
        return conv2d(b_cam, params["pers.w"], params["pers.b"], padding=1)


# -- box encoding -------------------------------------------------------------------


def encode_cell_target(box: Box, row: int, col: int, grid: Grid) -> np.ndarray:
    """RPN regression target for the cell at (row, col)."""
    return np.array(
        [
            (box.cx - grid.x_of_col(col)) / grid.cell,
            (box.cy - grid.y_of_row(row)) / grid.cell,
            np.log(box.w),
            np.log(box.l),
            np.sin(box.yaw),
            np.cos(box.yaw),
        ]
    )


def decode_cell_box(vec: np.ndarray, row: int, col: int, grid: Grid) -> Box:
    dx, dy, lw, ll, sy, sx = vec
    return Box(
        cx=float(grid.x_of_col(col) + dx * grid.cell),
        cy=float(grid.y_of_row(row) + dy * grid.cell),
        w=float(np.exp(np.clip(lw, -4.0, 4.0))),
        l=float(np.exp(np.clip(ll, -4.0, 4.0))),
        yaw=float(np.arctan2(sy, sx)),
        class_id=0,
    )


def encode_roi_target(target: Box, proposal: Box, grid: Grid) -> np.ndarray:
    """Second-stage refinement target relative to the proposal box."""
    return np.array(
        [
            (target.cx - proposal.cx) / grid.cell,
            (target.cy - proposal.cy) / grid.cell,
            np.log(target.w / proposal.w),
            np.log(target.l / proposal.l),
            np.sin(target.yaw),
            np.cos(target.yaw),
        ]
    )


def apply_roi_delta(proposal: Box, vec: np.ndarray, grid: Grid, class_id: int) -> Box:
    dx, dy, dw, dl, sy, sx = vec
    return Box(
        cx=float(proposal.cx + dx * grid.cell),
        cy=float(proposal.cy + dy * grid.cell),
        w=float(proposal.w * np.exp(np.clip(dw, -3.0, 3.0))),
        l=float(proposal.l * np.exp(np.clip(dl, -3.0, 3.0))),
        yaw=float(np.arctan2(sy, sx)),
        class_id=class_id,
    )


# -- first stage ---------------------------------------------------------------------


def decode_proposals(
    obj_map: Tensor, box_map: Tensor, grid: Grid, topk: int
) -> list[Proposal]:
    """Top-K cells by objectness, decoded to proposals (all cells if K >= H*W)."""
    logits = obj_map.data.ravel()
    k = min(topk, logits.size)
    order = np.argsort(-logits, kind="stable")[:k]
    boxes = box_map.data.reshape(6, -1)
    props = []
    w = grid.size
    for flat in order:
        i, j = divmod(int(flat), w)
        props.append(
            Proposal(
                box=decode_cell_box(boxes[:, flat], i, j, grid),
                objectness=float(1.0 / (1.0 + np.exp(-np.clip(logits[flat], -500, 500)))),
                cell=(i, j),
            )
        )
    return props


def sample_proposals(proposals: list[Proposal], size: int, rng) -> list[Proposal]:
    """Seeded fixed-size random subset for second-stage training."""
    if len(proposals) <= size:
        return list(proposals)
    picks = rng.choice(len(proposals), size=size, replace=False)
    return [proposals[int(i)] for i in picks]


def assign_and_uncertainty(
    proposals: list[Proposal],
    pseudo_labels: list[Detection],
    delta: float,
    beta: float,
) -> list[Proposal]:
    """Label proposals by max overlap with pseudo-labels and score their noise.

    A proposal whose best overlap I exceeds ``delta`` adopts the matching
    pseudo-label (box, class, score s) and carries uncertainty
    u = 1 - (s * I)^{beta'}, beta' = sigmoid(beta); everything else is
    background with u = 0.
    """
    audit.record("assign_and_uncertainty")
    if not 0.0 < delta < 1.0:
        raise DomainError("delta must lie in (0, 1)")
    if not np.isfinite(beta):
        raise DomainError("beta must be finite")
    beta_p = 1.0 / (1.0 + np.exp(-beta))
    for prop in proposals:
        prop.assigned_class = -1
        prop.assigned_box = None
        prop.assigned_score = 0.0
        prop.iou_max = 0.0
        prop.uncertainty = 0.0
        if not pseudo_labels:
            continue
        ious = [iou_bev(prop.box, d.box) for d in pseudo_labels]
        best = int(np.argmax(ious))
        prop.iou_max = float(ious[best])
        if prop.iou_max > delta:
            d = pseudo_labels[best]
            prop.assigned_class = d.class_id
            prop.assigned_box = d.box
            prop.assigned_score = float(d.score)
            prop.uncertainty = float(
                1.0 - (prop.assigned_score * prop.iou_max) ** beta_p
            )
    return proposals


# -- second stage ----------------------------------------------------------------------


def roi_pool(b_fuse: Tensor, proposals: list[Proposal], grid: Grid) -> Tensor:
    """Rotated 3x3 feature grid per proposal, flattened to (P, 9C)."""
    fractions = (-1.0 / 3.0, 0.0, 1.0 / 3.0)
    pts = []
    for prop in proposals:
        b = prop.box
        c, s = np.cos(b.yaw), np.sin(b.yaw)
        rot = np.array([[c, -s], [s, c]])
        local = np.array(
            [[fx * b.w, fy * b.l] for fy in fractions for fx in fractions]
        )
        pts.append(local @ rot.T + np.array([b.cx, b.cy]))
    rc = grid.to_cells(np.stack(pts))  # (P, 9, 2)
    coords = Tensor(np.stack([rc[..., 0], rc[..., 1]], axis=0))  # (2, P, 9)
    feats = bilinear_sample(b_fuse, coords)  # (C, P, 9)
    p = len(proposals)
    return reshape(transpose(feats, (1, 0, 2)), (p, -1))


def roi_heads(feats: Tensor, params: ParamStore):
    h = relu(add(matmul(feats, params["roi.fc.w"]), params["roi.fc.b"]))
    cls_logits = add(matmul(h, params["roi.cls.w"]), params["roi.cls.b"])
    reg = add(matmul(h, params["roi.reg.w"]), params["roi.reg.b"])
    return cls_logits, reg


def roi_forward(
    b_fuse: Tensor,
    proposals: list[Proposal],
    params: ParamStore,
    grid: Grid,
    nms_thresh: float | None = 0.5,
    classes: int = 3,
) -> list[Detection]:
    """Classify and refine proposals; background dropped, class-wise NMS.

    Pass ``nms_thresh=None`` to get raw per-proposal detections (callers
    that filter by score before suppressing use this).
    """
    if not proposals:
        return []
    feats = roi_pool(b_fuse, proposals, grid)
    cls_logits, reg = roi_heads(feats, params)
    logits = cls_logits.data
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    probs = ex / ex.sum(axis=1, keepdims=True)
    dets = []
    for k, prop in enumerate(proposals):
        cid = int(np.argmax(probs[k]))
        if cid == classes:  # background
            continue
        dets.append(
            Detection(
                box=apply_roi_delta(prop.box, reg.data[k], grid, cid),
                class_id=cid,
                score=float(probs[k, cid]),
                class_probs=probs[k].copy(),
            )
        )
    if nms_thresh is None:
        return dets
    return classwise_nms(dets, nms_thresh, classes)


def classwise_nms(dets: list[Detection], nms_thresh: float, classes: int):
    kept = []
    for cid in range(classes):
        kept.extend(nms([d for d in dets if d.class_id == cid], nms_thresh))
    return sorted(kept, key=lambda d: -d.score)


# -- loss assembly ------------------------------------------------------------------------


def _as_boxes_and_scores(targets):
    """Accept GT boxes or scored detections as training targets."""
    if targets and isinstance(targets[0], Detection):
        return [d.box for d in targets], list(targets)
    boxes = list(targets)
    return boxes, [Detection(box=b, class_id=b.class_id, score=1.0) for b in boxes]


@dataclass
class LossParts:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    roi_cls: float = 0.0
    roi_reg: float = 0.0
    pers: float = 0.0
    align: float = 0.0
    fwd: ForwardOut | None = field(default=None, repr=False)
    plan: "LossPlan | None" = field(default=None, repr=False)

    def total_value(self, weights: LossWeights) -> float:
        return (
            self.rpn_cls
            + self.rpn_reg
            + self.roi_cls
            + self.roi_reg
            + weights.lam * self.pers
            + weights.gamma * self.align
        )


@dataclass
class LossPlan:
    """Frozen discrete structure of one loss evaluation.

    Proposal boxes, assignments, and uncertainty weights are data, not
    graph nodes; freezing them makes the loss a smooth function of the
    parameters (what finite-difference checks and a single SGD step both
    see).
    """

    pos_cells: np.ndarray
    pos_targets: np.ndarray  # (6, P) encoded regression targets
    cell_weights: np.ndarray  # (P,) uncertainty-derived (1 - u) factors
    roi_kept: list  # proposals with assignments baked in
    align_lidar: np.ndarray | None = None  # detached LiDAR map value


def detection_loss(
    pipe: Pipeline,
    sample: Sample,
    targets,
    params: ParamStore,
    weights: LossWeights,
    rng,
    delta: float = 0.5,
    beta: float = 0.0,
    use_uncertainty: bool = False,
    need_probes: bool = False,
    plan: LossPlan | None = None,
) -> tuple[Tensor, LossParts]:
    """Shared loss: RPN cls/reg + ROI cls/reg + lam*occupancy + gamma*align.

    ``targets`` may be ground-truth boxes or teacher detections; with
    ``use_uncertainty`` the RPN regression of each positive cell is scaled
    by (1 - u) from its decoded box's overlap with the targets.  With the
    flag off the two paths are computationally identical, which is the
    supervised/unsupervised equivalence the tests pin down.

    Passing a previously captured ``plan`` freezes the discrete structure
    (proposals, assignments, uncertainty weights) so repeated evaluations
    differ only through the smooth parameter dependence.
    """
    target_boxes, target_dets = _as_boxes_and_scores(targets)
    grid = pipe.grid
    hw = grid.size * grid.size
    need_align = weights.gamma != 0.0 and pipe.use_aligned_fusion
    fwd = pipe.forward(
        sample,
        params,
        need_alignment=need_align,
        need_probes=need_probes,
        align_lidar_const=plan.align_lidar if plan is not None else None,
    )
    parts = LossParts(fwd=fwd)

    # first stage: objectness over all cells
    owner = cells_inside_boxes(target_boxes, grid)
    obj_target = (owner >= 0).astype(float)[None]
    bce = bce_with_logits(fwd.rpn_obj, obj_target)
    wmap = 1.0 + (pipe.pos_weight - 1.0) * obj_target
    rpn_cls = mul(tsum(mul(bce, Tensor(wmap))), 1.0 / hw)
    parts.rpn_cls = rpn_cls.item()

    # first stage: box regression on owned cells, optionally noise-weighted
    if plan is None:
        pos = np.flatnonzero(owner.ravel() >= 0)
        rows, cols = np.divmod(pos, grid.size)
        tgt = (
            np.stack(
                [
                    encode_cell_target(target_boxes[owner.ravel()[f]], r, c, grid)
                    for f, r, c in zip(pos, rows, cols)
                ],
                axis=1,
            )
            if pos.size
            else np.zeros((6, 0))
        )
        cell_w = np.ones(pos.size)
        if use_uncertainty and pos.size:
            props = [
                Proposal(
                    box=decode_cell_box(fwd.rpn_box.data.reshape(6, -1)[:, f], r, c, grid),
                    objectness=0.0,
                    cell=(int(r), int(c)),
                )
                for f, r, c in zip(pos, rows, cols)
            ]
            assign_and_uncertainty(props, target_dets, delta, beta)
            cell_w = np.array([1.0 - p.uncertainty for p in props])
    else:
        pos, tgt, cell_w = plan.pos_cells, plan.pos_targets, plan.cell_weights

    total = rpn_cls
    if pos.size:
        preds = take_columns(reshape(fwd.rpn_box, (6, hw)), pos)
        sl = smooth_l1(preds, tgt)
        rpn_reg = mul(tsum(mul(sl, Tensor(cell_w[None, :]))), 1.0 / (6.0 * pos.size))
        parts.rpn_reg = rpn_reg.item()
        total = add(total, rpn_reg)

    # second stage on a seeded random sample of decoded proposals
    if plan is None:
        proposals = decode_proposals(fwd.rpn_obj, fwd.rpn_box, grid, pipe.rpn_topk)
        sampled = sample_proposals(proposals, pipe.roi_samples, rng)
        assign_and_uncertainty(sampled, target_dets, delta, beta)
        positives = [p for p in sampled if p.assigned_class >= 0]
        negatives = [p for p in sampled if p.assigned_class < 0]
        keep_neg = max(3 * len(positives), pipe.roi_min_neg)
        kept = positives + negatives[:keep_neg]
        parts.plan = LossPlan(
            pos, tgt, cell_w, kept,
            align_lidar=fwd.align[2].data.copy() if fwd.align else None,
        )
    else:
        kept = plan.roi_kept
        parts.plan = plan
    if kept:
        feats = roi_pool(fwd.b_fuse, kept, grid)
        cls_logits, reg = roi_heads(feats, params)
        labels = np.array(
            [p.assigned_class if p.assigned_class >= 0 else pipe.background for p in kept]
        )
        roi_cls = tmean(softmax_cross_entropy(cls_logits, labels))
        parts.roi_cls = roi_cls.item()
        total = add(total, roi_cls)
        pos_idx = np.flatnonzero(labels != pipe.background)
        if pos_idx.size:
            deltas = np.stack(
                [encode_roi_target(kept[i].assigned_box, kept[i].box, grid) for i in pos_idx],
                axis=1,
            )
            reg_pos = take_columns(transpose(reg, (1, 0)), pos_idx)
            roi_reg = tmean(smooth_l1(reg_pos, deltas))
            parts.roi_reg = roi_reg.item()
            total = add(total, roi_reg)

    if pipe.use_perspective and weights.lam != 0.0:
        logits = pipe.perspective_logits(fwd.b_cam, params)
        occ = render_occupancy(target_boxes, grid, pipe.classes, soft=False)
        pers = tmean(bce_with_logits(logits, occ))
        parts.pers = pers.item()
        total = add(total, mul(pers, weights.lam))

    if need_align:
        la = alignment_loss(*fwd.align, pipe.feature_net)
        parts.align = la.item()
        total = add(total, mul(la, weights.gamma))

    return total, parts


def supervised_loss(
    pipe, sample, labels, params, weights, rng, need_probes=False, plan=None
) -> tuple[Tensor, LossParts]:
    """Supervised objective over ground-truth boxes."""
    audit.record("supervised_loss")
    return detection_loss(
        pipe, sample, labels, params, weights, rng, need_probes=need_probes, plan=plan
    )


def unsupervised_loss(
    pipe,
    sample,
    pseudo_labels,
    params,
    weights,
    rng,
    delta=0.5,
    beta=0.0,
    use_uncertainty=True,
    need_probes=False,
    plan=None,
) -> tuple[Tensor, LossParts]:
    """Same structure over teacher pseudo-labels with (1-u) RPN weighting."""
    audit.record("unsupervised_loss")
    return detection_loss(
        pipe,
        sample,
        pseudo_labels,
        params,
        weights,
        rng,
        delta=delta,
        beta=beta,
        use_uncertainty=use_uncertainty,
        need_probes=need_probes,
        plan=plan,
    )


def perspective_aux_loss(pipe, camera_feature, labels, params) -> Tensor:
    """Occupancy BCE of the camera-branch head against rendered boxes."""
    logits = pipe.perspective_logits(camera_feature, params)
    occ = render_occupancy(labels, pipe.grid, pipe.classes, soft=False)
    return tmean(bce_with_logits(logits, occ))


def probe_loss(
    pipe: Pipeline, fwd: ForwardOut, target_boxes: list[Box], rng=None
) -> Tensor | None:
    """RPN-style losses for both branch probes (detached inputs).

    Kept outside the main objective so the headline losses match their
    documented decomposition exactly; probes never shape the branches.
    """
    if fwd.cam_probe is None or fwd.lidar_probe is None:
        return None
    grid = pipe.grid
    hw = grid.size * grid.size
    owner = cells_inside_boxes(target_boxes, grid)
    obj_target = (owner >= 0).astype(float)[None]
    wmap = Tensor(1.0 + (pipe.pos_weight - 1.0) * obj_target)
    pos = np.flatnonzero(owner.ravel() >= 0)
    total = None
    for obj_map, box_map in (fwd.cam_probe, fwd.lidar_probe):
        loss = mul(tsum(mul(bce_with_logits(obj_map, obj_target), wmap)), 1.0 / hw)
        if pos.size:
            rows, cols = np.divmod(pos, grid.size)
            tgt = np.stack(
                [
                    encode_cell_target(target_boxes[owner.ravel()[f]], r, c, grid)
                    for f, r, c in zip(pos, rows, cols)
                ],
                axis=1,
            )
            preds = take_columns(reshape(box_map, (6, hw)), pos)
            loss = add(loss, mul(tsum(smooth_l1(preds, tgt)), 1.0 / (6.0 * pos.size)))
        total = loss if total is None else add(total, loss)
    return total


def probe_detections(
    fwd: ForwardOut,
    which: str,
    grid: Grid,
    topk: int = 24,
    obj_thresh: float = 0.5,
    nms_thresh: float = 0.5,
) -> list[Detection]:
    """Decode one branch probe's maps into scored class-agnostic boxes."""
    obj_map, box_map = fwd.cam_probe if which == "cam" else fwd.lidar_probe
    props = decode_proposals(obj_map, box_map, grid, topk)
    dets = [
        Detection(box=p.box, class_id=0, score=p.objectness)
        for p in props
        if p.objectness >= obj_thresh
    ]
    return nms(dets, nms_thresh)


def detect(
    pipe: Pipeline,
    sample: Sample,
    params: ParamStore,
    score_thresh: float = 0.3,
    nms_thresh: float = 0.5,
    topk: int | None = None,
    need_probes: bool = False,
) -> tuple[list[Detection], ForwardOut]:
    """Full inference: proposals -> ROI refinement -> threshold -> NMS."""
    fwd = pipe.forward(sample, params, need_probes=need_probes)
    proposals = decode_proposals(
        fwd.rpn_obj, fwd.rpn_box, pipe.grid, topk or pipe.rpn_topk
    )
    proposals = [p for p in proposals if p.objectness >= 0.25]
    raw = roi_forward(
        fwd.b_fuse, proposals, params, pipe.grid, None, pipe.classes
    )
    raw = [d for d in raw if d.score >= score_thresh]
    return classwise_nms(raw, nms_thresh, pipe.classes), fwd
