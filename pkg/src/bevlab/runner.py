"""Experiment runner: dataset IO, training phases, checkpoints, reports.

metrics.csv has a fixed column order so runs diff cleanly:
run_id, round, step, loss_total, loss_s, loss_u, loss_a, loss_pers,
map_lite, delta_forgetting, wall_ms.  Timing is written as 0 unless
``train.real_timing`` is set; identical configs then produce byte
identical files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .detector import Pipeline, detect, probe_detections
from .errors import ConfigurationError, DomainError, TrainingError
from .metrics import EvalResult, cross_branch_iou, evaluate_detections, forgetting_delta
from .params import ParamStore, importance_from_blob, importance_to_blob
from .teacher import LabelPool, TeacherState, init_teacher, run_round
from .world import SceneDataset, generate_dataset

_COLUMNS = (
    "run_id",
    "round",
    "step",
    "loss_total",
    "loss_s",
    "loss_u",
    "loss_a",
    "loss_pers",
    "map_lite",
    "delta_forgetting",
    "wall_ms",
)

_TEST_SEED_OFFSET = 100003


class MetricsWriter:
    """Appends fixed-schema rows; floats via repr for byte stability."""

    def __init__(self, path: Path, run_id: str, real_timing: bool):
        self.path = Path(path)
        self.run_id = run_id
        self.real_timing = real_timing
        self._t0 = time.perf_counter()
        self.path.write_text(",".join(_COLUMNS) + "\n")

    def _wall(self) -> str:
        if not self.real_timing:
            return "0"
        return str(int((time.perf_counter() - self._t0) * 1000))

    def row(self, **kw):
        vals = {"run_id": self.run_id, "wall_ms": self._wall()}
        vals.update(kw)
        cells = []
        for col in _COLUMNS:
            v = vals.get(col, "")
            if isinstance(v, float):
                v = repr(v)
            cells.append(str(v))
        with self.path.open("a") as f:
            f.write(",".join(cells) + "\n")


# -- dataset handling -------------------------------------------------------------


def generate_datasets(config: ExperimentConfig, root) -> tuple[SceneDataset, SceneDataset]:
    """Write train/ and test/ dataset directories under root."""
    root = Path(root)
    train = generate_dataset(config.dataset_spec())
    test_spec = config.dataset_spec(
        seed_offset=_TEST_SEED_OFFSET, n_sequences=config.data.test_sequences
    )
    test_spec.labeled_fraction = 1.0
    test = generate_dataset(test_spec)
    train.save(root / "train")
    test.save(root / "test")
    return train, test


def load_datasets(root) -> tuple[SceneDataset, SceneDataset]:
    root = Path(root)
    if not (root / "train" / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset at {root}")
    return SceneDataset.load(root / "train"), SceneDataset.load(root / "test")


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(
    path,
    config: ExperimentConfig,
    teacher_prev: ParamStore,
    teacher_ema: ParamStore,
    student: ParamStore,
    importance: dict,
    round_idx: int,
    rng_state: dict | None = None,
):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "round": round_idx,
        "config_hash": config.config_hash(),
        "rng_state": rng_state or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "config.json").write_text(config.to_json())
    (path / "teacher_prev.bin").write_bytes(teacher_prev.to_blob())
    (path / "teacher_ema.bin").write_bytes(teacher_ema.to_blob())
    (path / "student.bin").write_bytes(student.to_blob())
    (path / "importance.bin").write_bytes(importance_to_blob(importance))


@dataclass
class Checkpoint:
    manifest: dict
    config: ExperimentConfig
    teacher_prev: ParamStore
    teacher_ema: ParamStore
    student: ParamStore
    importance: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    manifest = json.loads((path / "manifest.json").read_text())
    config = ExperimentConfig.from_json((path / "config.json").read_text())
    return Checkpoint(
        manifest=manifest,
        config=config,
        teacher_prev=ParamStore.from_blob((path / "teacher_prev.bin").read_bytes()),
        teacher_ema=ParamStore.from_blob((path / "teacher_ema.bin").read_bytes()),
        student=ParamStore.from_blob((path / "student.bin").read_bytes()),
        importance=importance_from_blob((path / "importance.bin").read_bytes()),
    )


# -- evaluation -----------------------------------------------------------------------


def evaluate_model(
    pipe: Pipeline,
    params: ParamStore,
    dataset: SceneDataset,
    indices,
    score_thresh: float = 0.3,
    with_probes: bool = True,
) -> EvalResult:
    """mAP-lite over the given scene indices, plus cross-branch agreement."""
    indices = list(indices)
    if not indices:
        raise DomainError("evaluation needs a non-empty split")
    frames = []
    branch_ious = []
    for idx in indices:
        sample = dataset.sample(idx, history=pipe.history)
        dets, fwd = detect(
            pipe, sample, params, score_thresh=score_thresh, need_probes=with_probes
        )
        frames.append((idx, dets, sample.boxes))
        if with_probes:
            cam = probe_detections(fwd, "cam", pipe.grid)
            lid = probe_detections(fwd, "lidar", pipe.grid)
            if cam or lid:
                branch_ious.append(cross_branch_iou(cam, lid))
    result = evaluate_detections(frames, pipe.classes)
    if branch_ious:
        result.cross_branch = float(np.mean(branch_ious))
    return result


# -- training entry points ---------------------------------------------------------------


def run_training(config: ExperimentConfig, dataset_root, out_dir, mode: str) -> dict:
    """Train per config and write metrics.csv + final checkpoint.

    ``mode`` is ``supervised`` (labeled split only) or ``semi`` (supervised
    warm-up or checkpoint init, then teacher/student rounds).
    """
    if mode not in ("supervised", "semi"):
        raise ConfigurationError(f"unknown training mode {mode!r}")
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_datasets(dataset_root)
    pipe = config.pipeline()
    run_id = f"{config.config_hash()}-{mode}"
    writer = MetricsWriter(out_dir / "metrics.csv", run_id, config.train.real_timing)
    weights = config.weights()
    pool = LabelPool(labeled=list(train_ds.labeled), unlabeled=list(train_ds.unlabeled))
    test_idx = range(len(test_ds))

    def step_writer(round_idx):
        def cb(step, loss, parts):
            writer.row(
                round=round_idx,
                step=step,
                loss_total=float(loss),
                loss_s=float(loss),
                loss_u=0.0,
                loss_a=float(parts.align),
                loss_pers=float(parts.pers),
            )

        return cb

    if config.train.init_from:
        ck = load_checkpoint(config.train.init_from)
        if ck.manifest["config_hash"] != config.config_hash():
            raise ConfigurationError("init_from checkpoint has a different config hash")
        teacher = TeacherState(
            params_prev=ck.teacher_prev.clone(), params_ema=ck.teacher_prev.clone()
        )
        student = ck.teacher_prev.clone()
    else:
        teacher, student = init_teacher(
            pipe,
            train_ds,
            pool,
            weights,
            config.train.supervised_steps,
            config.train.lr,
            config.seed,
            optimizer=config.train.optimizer,
            on_step=step_writer(0),
        )

    summary = {"run_id": run_id, "mode": mode}
    if mode == "supervised":
        result = evaluate_model(
            pipe, teacher.params_prev, test_ds, test_idx, config.train.eval_score_thresh
        )
        writer.row(round=0, step="", map_lite=result.map_lite * 100.0)
        save_checkpoint(
            out_dir / "checkpoint",
            config,
            teacher.params_prev,
            teacher.params_ema,
            student,
            {},
            0,
        )
        summary["map_lite"] = result.map_lite * 100.0
        summary["cross_branch_iou"] = result.cross_branch
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        return summary

    n_unlabeled_initial = len(pool.unlabeled)
    rc = config.round_config(n_unlabeled_initial)
    for r in range(1, config.train.rounds + 1):
        round_seed = config.seed * 1_000_003 + r

        def round_cb(step, info, _r=r):
            writer.row(
                round=_r,
                step=step,
                loss_total=info["total"],
                loss_s=info["sup"],
                loss_u=info["unsup"],
                loss_a=info["align"],
                loss_pers=info["pers"],
            )

        teacher, _rm = run_round(
            pipe, teacher, student, pool, train_ds, weights, rc, round_seed,
            on_step=round_cb,
        )
        result = evaluate_model(
            pipe, teacher.params_prev, test_ds, test_idx, config.train.eval_score_thresh
        )
        writer.row(round=r, step="", map_lite=result.map_lite * 100.0)
        summary[f"round_{r}_map"] = result.map_lite * 100.0
    result = evaluate_model(
        pipe, teacher.params_prev, test_ds, test_idx, config.train.eval_score_thresh
    )
    save_checkpoint(
        out_dir / "checkpoint",
        config,
        teacher.params_prev,
        teacher.params_ema,
        student,
        teacher.importance,
        teacher.round,
    )
    summary["map_lite"] = result.map_lite * 100.0
    summary["cross_branch_iou"] = result.cross_branch
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _split_indices(train_ds: SceneDataset, test_ds: SceneDataset, split: str):
    if split == "test":
        return test_ds, list(range(len(test_ds)))
    if split == "train":
        return train_ds, list(range(len(train_ds)))
    if split == "labeled":
        return train_ds, list(train_ds.labeled)
    if split == "unlabeled":
        return train_ds, list(train_ds.unlabeled)
    raise ConfigurationError(f"unknown split {split!r}")


def run_eval(checkpoint_path, dataset_root, split: str, out_path=None) -> dict:
    """Evaluate a checkpoint's teacher on a dataset split; write a report."""
    ck = load_checkpoint(checkpoint_path)
    train_ds, test_ds = load_datasets(dataset_root)
    ds, indices = _split_indices(train_ds, test_ds, split)
    if not indices:
        raise DomainError(f"split {split!r} is empty")
    pipe = ck.config.pipeline()
    result = evaluate_model(
        pipe, ck.teacher_prev, ds, indices, ck.config.train.eval_score_thresh
    )
    report = {
        "checkpoint": str(checkpoint_path),
        "split": split,
        "config_hash": ck.manifest["config_hash"],
        "map_lite": result.map_lite * 100.0,
        "per_class_ap": {str(k): v * 100.0 for k, v in result.per_class_ap.items()},
        "cross_branch_iou": result.cross_branch,
        "n_matched": len(result.matched_gt_ids),
    }
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def run_forgetting(ck_supervised_path, ck_semi_path, dataset_root, out_path=None) -> dict:
    """Delta-percent report: what the semi model lost of the supervised one.

    Both checkpoints must come from the same config lineage (hash match).
    """
    ck_sup = load_checkpoint(ck_supervised_path)
    ck_semi = load_checkpoint(ck_semi_path)
    if ck_sup.manifest["config_hash"] != ck_semi.manifest["config_hash"]:
        raise ConfigurationError("checkpoints come from different config lineages")
    _, test_ds = load_datasets(dataset_root)
    indices = list(range(len(test_ds)))
    if not indices:
        raise DomainError("test split is empty")
    pipe = ck_sup.config.pipeline()
    thresh = ck_sup.config.train.eval_score_thresh
    res_sup = evaluate_model(pipe, ck_sup.teacher_prev, test_ds, indices, thresh, with_probes=False)
    res_semi = evaluate_model(pipe, ck_semi.teacher_prev, test_ds, indices, thresh, with_probes=False)
    if not res_sup.matched_gt_ids:
        raise DomainError("supervised model matched no test objects (V1 empty)")
    delta = forgetting_delta(res_sup.matched_gt_ids, res_semi.matched_gt_ids)
    report = {
        "config_hash": ck_sup.manifest["config_hash"],
        "labeled_fraction": ck_sup.config.data.labeled_fraction,
        "map_supervised": res_sup.map_lite * 100.0,
        "map_semi": res_semi.map_lite * 100.0,
        "v1": len(res_sup.matched_gt_ids),
        "v2": len(res_semi.matched_gt_ids),
        "v1_and_v2": len(res_sup.matched_gt_ids & res_semi.matched_gt_ids),
        "delta_forgetting": delta,
    }
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
