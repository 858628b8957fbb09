"""Semi-supervised teacher/student orchestration.

One round promotes the highest-value unlabeled samples into the label
pool (their teacher detections frozen as labels), trains the student on
labeled plus pseudo-labeled data, folds the student into the teacher by
per-step EMA, and then refines the EMA teacher so it keeps agreeing with
its previous self: an output-consistency L1 term on unlabeled data plus a
quadratic penalty weighted by per-parameter importance (the mean absolute
gradient of the previous teacher's squared output norm over unlabeled
samples).  The refined teacher becomes the next round's reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from . import audit
from .detector import (
    LossWeights,
    Pipeline,
    detect,
    probe_loss,
    supervised_loss,
    unsupervised_loss,
)
from .errors import ConfigurationError, DomainError, TrainingError
from .geometry import Detection
from .params import Adam, ParamStore, SGD
from .tensor import Tensor, add, concat, l1_loss, mul, sub, tsum
from .world import SceneDataset, augment, transform_boxes


@dataclass
class TeacherState:
    """Previous-teacher snapshot, running EMA teacher, importances, round."""

    params_prev: ParamStore
    params_ema: ParamStore
    importance: dict = field(default_factory=dict)
    round: int = 0


@dataclass
class LabelPool:
    """Disjoint labeled/unlabeled index sets plus frozen promoted labels."""

    labeled: list[int]
    unlabeled: list[int]
    pseudo: dict[int, list[Detection]] = field(default_factory=dict)

    def check(self):
        if set(self.labeled) & set(self.unlabeled):
            raise ConfigurationError("labeled and unlabeled sets overlap")
        for idx in self.pseudo:
            if idx in self.unlabeled:
                raise ConfigurationError(f"promoted index {idx} still unlabeled")

    def promote(self, idx: int, dets: list[Detection]):
        if idx not in self.unlabeled:
            raise ConfigurationError(f"index {idx} not in the unlabeled pool")
        if idx in self.pseudo:
            raise ConfigurationError(f"index {idx} was already promoted once")
        self.unlabeled.remove(idx)
        self.labeled.append(idx)
        self.pseudo[idx] = list(dets)


def targets_for(pool: LabelPool | None, dataset: SceneDataset, idx: int):
    """Ground truth for originally labeled samples, frozen pseudo otherwise."""
    if pool is not None and idx in pool.pseudo:
        return pool.pseudo[idx]
    return dataset.scenes[idx].boxes


def transform_targets(targets, draw, grid):
    """Carry GT boxes or scored detections through an augmentation draw."""
    if targets and isinstance(targets[0], Detection):
        boxes = transform_boxes([d.box for d in targets], draw, grid)
        return [
            Detection(box=b, class_id=d.class_id, score=d.score, class_probs=d.class_probs)
            for b, d in zip(boxes, targets)
        ]
    return transform_boxes(list(targets), draw, grid)


def ema_update(prev: ParamStore, student: ParamStore, alpha: float) -> ParamStore:
    """theta_ema = alpha * theta_prev + (1 - alpha) * theta_student."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    if set(prev.entries) != set(student.entries):
        raise ConfigurationError("EMA requires matching parameter sets")
    out = ParamStore()
    for name, p in prev.items():
        s = student[name]
        if s.data.shape != p.data.shape:
            raise ConfigurationError(f"EMA shape mismatch for {name!r}")
        out.add(name, alpha * p.data + (1.0 - alpha) * s.data)
    return out


def rpn_output_maps(pipe: Pipeline, sample, params: ParamStore) -> Tensor:
    """Concatenated raw first-stage maps: the model output for importance."""
    fwd = pipe.forward(sample, params)
    return concat([fwd.rpn_obj, fwd.rpn_box], axis=0)


def accumulate_importance(forward_fn, params: ParamStore, samples) -> dict:
    """Mean absolute gradient of the squared output norm, per parameter.

    ``forward_fn(sample, params)`` must return the raw output tensor; the
    importance of every parameter entry is E_x |d ||out(x)||^2 / d theta|.
    """
    audit.record("accumulate_importance")
    samples = list(samples)
    if not samples:
        raise DomainError("importance needs at least one sample")
    acc = {name: np.zeros_like(p.data) for name, p in params.items()}
    for sample in samples:
        params.zero_grads()
        out = forward_fn(sample, params)
        tsum(mul(out, out)).backward()
        for name, p in params.items():
            if p.grad is not None:
                acc[name] += np.abs(p.grad)
    params.zero_grads()
    return {name: a / len(samples) for name, a in acc.items()}


def refine_teacher(
    params_start: ParamStore,
    params_prev: ParamStore,
    importance: dict,
    forward_fn,
    samples,
    eta: float,
    steps: int,
    lr: float,
    batch: int | None = None,
    rng=None,
) -> ParamStore:
    """Descend output-consistency-plus-anchor loss from the EMA weights.

    Per-step loss: mean L1 between current and previous-teacher raw
    outputs on (a batch of) unlabeled samples, plus
    eta * sum_ij Phi_ij (theta_ij - theta_prev_ij)^2.
    Plain gradient descent for ``steps`` iterations.
    """
    audit.record("refine_teacher")
    if eta < 0:
        raise ConfigurationError("eta must be >= 0")
    samples = list(samples)
    if not samples:
        raise DomainError("refinement needs at least one unlabeled sample")
    params = params_start.clone()
    prev_out = [forward_fn(s, params_prev).data.copy() for s in samples]
    opt = SGD(params, lr)
    rng = rng or np.random.default_rng(0)
    n = len(samples)
    for step in range(steps):
        if batch is not None and batch < n:
            picks = rng.choice(n, size=batch, replace=False)
        else:
            picks = np.arange(n)
        params.zero_grads()
        loss = None
        for i in picks:
            term = l1_loss(forward_fn(samples[int(i)], params), Tensor(prev_out[int(i)]))
            loss = term if loss is None else add(loss, term)
        loss = mul(loss, 1.0 / len(picks))
        if eta > 0:
            for name, p in params.items():
                phi = importance.get(name)
                if phi is None or not phi.any():
                    continue
                d = sub(p, Tensor(params_prev[name].data))
                loss = add(loss, mul(tsum(mul(Tensor(phi), mul(d, d))), eta))
        if not np.isfinite(loss.data):
            raise TrainingError(f"refinement loss non-finite at step {step}")
        loss.backward()
        opt.step()
    return params


def stable_refine_lr(lr: float, eta: float, importance: dict) -> float:
    """Cap the refinement step below the anchor term's stability bound.

    The quadratic penalty's per-coordinate curvature is 2*eta*Phi, so plain
    gradient descent diverges once lr * 2 * eta * max(Phi) exceeds 2; stay
    well inside that.
    """
    if eta <= 0 or not importance:
        return lr
    phi_max = max(float(a.max()) for a in importance.values() if a.size)
    if phi_max <= 0:
        return lr
    return min(lr, 0.25 / (eta * phi_max))


def refinement_loss_value(
    params: ParamStore,
    params_prev: ParamStore,
    importance: dict,
    forward_fn,
    samples,
    eta: float,
) -> float:
    """Full-batch value of the refinement objective (for descent checks)."""
    total = 0.0
    for s in samples:
        cur = forward_fn(s, params).data
        prev = forward_fn(s, params_prev).data
        total += float(np.abs(cur - prev).mean())
    total /= len(samples)
    if eta > 0:
        for name, p in params.items():
            phi = importance.get(name)
            if phi is not None:
                total += eta * float((phi * (p.data - params_prev[name].data) ** 2).sum())
    return total


def generate_pseudo_labels(
    pipe: Pipeline,
    params: ParamStore,
    sample,
    score_thresh: float,
    seed: int,
    nms_thresh: float = 0.5,
):
    """Teacher detections on the weakly augmented view of a sample.

    Also returns the augmentation draw so a student step can strongly
    augment the same geometry and reuse these labels directly.
    """
    audit.record("generate_pseudo_labels")
    weak, draw = augment(sample, "weak", seed, pipe.grid)
    dets, _ = detect(pipe, weak, params, score_thresh=score_thresh, nms_thresh=nms_thresh)
    return dets, draw


@dataclass
class ActiveScore:
    index: int
    difficulty: float
    information: float
    diversity: float
    score: float = 0.0
    pseudo: list = field(default_factory=list)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def active_select(
    pipe: Pipeline,
    params: ParamStore,
    dataset: SceneDataset,
    unlabeled: list[int],
    labeled: list[int],
    m: int,
    score_thresh: float = 0.3,
) -> list[ActiveScore]:
    """Rank unlabeled samples by difficulty/information/diversity.

    Difficulty is one minus the mean teacher detection score; information
    is the mean class entropy of the detections; diversity is the minimum
    distance of the sample's pooled fused-feature vector to the labeled
    pool's vectors.  Each is min-max normalized over the candidates and
    averaged; the top m indices are returned with frozen pseudo-labels.
    """
    audit.record("active_select")
    if m > len(unlabeled):
        raise DomainError(f"cannot promote {m} of {len(unlabeled)} unlabeled samples")
    if m < 0:
        raise DomainError("m must be >= 0")
    if m == 0:
        return []

    def pooled(idx):
        sample = dataset.sample(idx, history=pipe.history)
        dets, fwd = detect(pipe, sample, params, score_thresh=score_thresh)
        return dets, fwd.b_fuse.data.mean(axis=(1, 2))

    labeled_feats = [pooled(i)[1] for i in labeled] if labeled else []
    entries = []
    for idx in unlabeled:
        dets, feat = pooled(idx)
        difficulty = 1.0 - (float(np.mean([d.score for d in dets])) if dets else 0.0)
        if dets:
            ents = []
            for d in dets:
                if d.class_probs is None:
                    ents.append(0.0)
                    continue
                p = np.clip(d.class_probs, 1e-12, 1.0)
                ents.append(float(-(p * np.log(p)).sum()))
            information = float(np.mean(ents))
        else:
            information = 0.0
        if labeled_feats:
            diversity = float(min(np.linalg.norm(feat - lf) for lf in labeled_feats))
        else:
            diversity = 0.0
        entries.append(ActiveScore(idx, difficulty, information, diversity, pseudo=dets))

    for name, norm in (
        ("difficulty", _minmax(np.array([e.difficulty for e in entries]))),
        ("information", _minmax(np.array([e.information for e in entries]))),
        ("diversity", _minmax(np.array([e.diversity for e in entries]))),
    ):
        for e, v in zip(entries, norm):
            setattr(e, name, float(v))
    for e in entries:
        e.score = (e.difficulty + e.information + e.diversity) / 3.0
    entries.sort(key=lambda e: (-e.score, e.index))
    return entries[:m]


# -- training loops ---------------------------------------------------------------


@dataclass
class RoundConfig:
    """Knobs for one semi-supervised round (validated upstream)."""

    student_steps: int = 100
    lr: float = 3e-3
    alpha: float = 0.999
    kappa: float = 1.0
    eta: float = 1.0
    refine_steps: int = 50
    refine_lr: float = 1e-3
    refine_batch: int = 4
    promote_m: int = 0
    score_thresh: float = 0.4
    delta: float = 0.5
    beta: float = 0.0
    use_uncertainty: bool = True
    use_refinement: bool = True
    optimizer: str = "adam"


def train_supervised(
    pipe: Pipeline,
    params: ParamStore,
    dataset: SceneDataset,
    indices: list[int],
    pool: LabelPool | None,
    weights: LossWeights,
    steps: int,
    lr: float,
    seed: int,
    optimizer: str = "adam",
    on_step=None,
) -> ParamStore:
    """Supervised loop over the given labeled indices (updates in place)."""
    if not indices:
        raise ConfigurationError("supervised training needs labeled samples")
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr) if optimizer == "adam" else SGD(params, lr)
    for step in range(steps):
        idx = int(rng.choice(indices))
        sample = dataset.sample(idx, history=pipe.history)
        targets = targets_for(pool, dataset, idx)
        aug, draw = augment(sample, "weak", int(rng.integers(2**31)), pipe.grid)
        aug_targets = transform_targets(targets, draw, pipe.grid)
        params.zero_grads()
        loss, parts = supervised_loss(
            pipe, aug, aug_targets, params, weights, rng, need_probes=True
        )
        pl = probe_loss(pipe, parts.fwd, _boxes_of(aug_targets))
        if pl is not None:
            loss = add(loss, mul(pl, pipe.probe_weight))
        if not np.isfinite(loss.data):
            raise TrainingError(f"supervised loss non-finite at step {step} (seed {seed})")
        loss.backward()
        opt.step()
        if on_step:
            on_step(step, float(loss.data), parts)
    return params


def _boxes_of(targets):
    if targets and isinstance(targets[0], Detection):
        return [d.box for d in targets]
    return list(targets)


def init_teacher(
    pipe: Pipeline,
    dataset: SceneDataset,
    pool: LabelPool,
    weights: LossWeights,
    steps: int,
    lr: float,
    seed: int,
    optimizer: str = "adam",
    params: ParamStore | None = None,
    on_step=None,
) -> tuple[TeacherState, ParamStore]:
    """Supervised teacher warm-up; the student starts as an exact copy."""
    if not pool.labeled:
        raise ConfigurationError("init_teacher requires a non-empty labeled set")
    if params is None:
        params = pipe.init_params(seed)
    if steps > 0:
        train_supervised(
            pipe, params, dataset, pool.labeled, pool, weights, steps, lr, seed,
            optimizer=optimizer, on_step=on_step,
        )
    teacher = TeacherState(params_prev=params.clone(), params_ema=params.clone())
    student = params.clone()
    return teacher, student


@dataclass
class RoundMetrics:
    round: int
    promoted: list[int]
    mean_loss: float
    mean_sup: float
    mean_unsup: float
    mean_align: float
    mean_pers: float
    drift_from_prev: float


def run_round(
    pipe: Pipeline,
    state: TeacherState,
    student: ParamStore,
    pool: LabelPool,
    dataset: SceneDataset,
    weights: LossWeights,
    cfg: RoundConfig,
    seed: int,
    on_step=None,
) -> tuple[TeacherState, RoundMetrics]:
    """One full semi-supervised round; mutates the student and the pool.

    Order: active promotion -> student training on labeled + pseudo-labeled
    data with per-step EMA -> importance accumulation on the pre-promotion
    unlabeled set -> teacher refinement -> snapshot as the next reference.
    """
    audit.record("run_round")
    rng = np.random.default_rng(seed)
    unlabeled_before = list(pool.unlabeled)

    promoted = []
    if cfg.promote_m > 0:
        picks = active_select(
            pipe, state.params_prev, dataset, pool.unlabeled, pool.labeled,
            cfg.promote_m, cfg.score_thresh,
        )
        for e in picks:
            pool.promote(e.index, e.pseudo)
            promoted.append(e.index)
    pool.check()

    opt = Adam(student, cfg.lr) if cfg.optimizer == "adam" else SGD(student, cfg.lr)
    ema = state.params_ema
    losses, sups, unsups, aligns, perss = [], [], [], [], []
    for step in range(cfg.student_steps):
        lidx = int(rng.choice(pool.labeled))
        sample_l = dataset.sample(lidx, history=pipe.history)
        targets_l = targets_for(pool, dataset, lidx)
        aug_seed = int(rng.integers(2**31))
        strong_l, draw_l = augment(sample_l, "strong", aug_seed, pipe.grid)
        tgt_l = transform_targets(targets_l, draw_l, pipe.grid)

        student.zero_grads()
        loss, parts_l = supervised_loss(
            pipe, strong_l, tgt_l, student, weights, rng, need_probes=True
        )
        pl = probe_loss(pipe, parts_l.fwd, _boxes_of(tgt_l))
        if pl is not None:
            loss = add(loss, mul(pl, pipe.probe_weight))
        sup_value = float(loss.data)
        unsup_value = 0.0

        if cfg.kappa > 0 and pool.unlabeled:
            uidx = int(rng.choice(pool.unlabeled))
            sample_u = dataset.sample(uidx, history=pipe.history)
            u_seed = int(rng.integers(2**31))
            pseudo, draw_u = generate_pseudo_labels(
                pipe, state.params_prev, sample_u, cfg.score_thresh, u_seed
            )
            strong_u, _ = augment(sample_u, "strong", u_seed, pipe.grid)
            u_loss, parts_u = unsupervised_loss(
                pipe, strong_u, pseudo, student, weights, rng,
                delta=cfg.delta, beta=cfg.beta,
                use_uncertainty=cfg.use_uncertainty,
            )
            unsup_value = float(u_loss.data)
            loss = add(loss, mul(u_loss, cfg.kappa))
            aligns.append(parts_u.align)
            perss.append(parts_u.pers)

        if not np.isfinite(loss.data):
            raise TrainingError(f"student loss non-finite at round step {step}")
        loss.backward()
        opt.step()
        ema = ema_update(ema, student, cfg.alpha)
        losses.append(float(loss.data))
        sups.append(sup_value)
        unsups.append(unsup_value)
        aligns.append(parts_l.align)
        perss.append(parts_l.pers)
        if on_step:
            on_step(
                step,
                {
                    "total": float(loss.data),
                    "sup": sup_value,
                    "unsup": unsup_value,
                    "align": parts_l.align,
                    "pers": parts_l.pers,
                },
            )

    if cfg.use_refinement:
        fn = lambda s, p: rpn_output_maps(pipe, s, p)
        samples_u = [dataset.sample(i, history=pipe.history) for i in unlabeled_before]
        if samples_u:
            importance = accumulate_importance(fn, state.params_prev, samples_u)
            refined = refine_teacher(
                ema, state.params_prev, importance, fn, samples_u,
                cfg.eta, cfg.refine_steps, stable_refine_lr(cfg.refine_lr, cfg.eta, importance),
                batch=cfg.refine_batch, rng=rng,
            )
        else:
            importance, refined = {}, ema.clone()
    else:
        importance, refined = {}, ema.clone()

    drift = float(
        np.linalg.norm(refined.flat_values() - state.params_prev.flat_values())
    )
    new_state = TeacherState(
        params_prev=refined,
        params_ema=refined.clone(),
        importance=importance,
        round=state.round + 1,
    )
    metrics = RoundMetrics(
        round=new_state.round,
        promoted=promoted,
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        mean_sup=float(np.mean(sups)) if sups else 0.0,
        mean_unsup=float(np.mean(unsups)) if unsups else 0.0,
        mean_align=float(np.mean(aligns)) if aligns else 0.0,
        mean_pers=float(np.mean(perss)) if perss else 0.0,
        drift_from_prev=drift,
    )
    return new_state, metrics
