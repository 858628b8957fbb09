"""Experiment configuration: one nested, validated, JSON-round-trippable tree.

Every run is fully described by an ExperimentConfig; the canonical JSON
form (sorted keys) is hashed into checkpoints and metrics so lineages can
be verified.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .detector import LossWeights, Pipeline
from .errors import ConfigurationError
from .teacher import RoundConfig
from .world import DatasetSpec, Grid


@dataclass
class DataConfig:
    n_sequences: int = 16
    seq_len: int = 3
    grid_size: int = 64
    extent: float = 51.2
    classes: int = 3
    labeled_fraction: float = 0.25
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
    test_sequences: int = 8

    def validate(self):
        if self.n_sequences < 1 or self.seq_len < 1 or self.test_sequences < 0:
            raise ConfigurationError("sequence counts must be positive")
        if self.grid_size % 16:
            raise ConfigurationError("grid_size must be divisible by 16")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigurationError("labeled_fraction must lie in (0, 1]")
        if self.classes < 1 or self.classes > 3:
            raise ConfigurationError("classes must lie in [1, 3]")
        if self.points_per_box <= 0 or self.clutter_points < 0:
            raise ConfigurationError("point counts must be non-negative")
        if min(self.lidar_noise, self.camera_noise, self.distortion_amp) < 0:
            raise ConfigurationError("noise amplitudes must be non-negative")
        if self.min_boxes < 1 or self.max_boxes < self.min_boxes:
            raise ConfigurationError("box count range invalid")


@dataclass
class ModelConfig:
    channels: int = 8
    history: int = 2
    rpn_hidden: int = 16
    roi_hidden: int = 32
    rpn_topk: int = 48
    roi_samples: int = 32
    pos_weight: float = 20.0
    align_eps: float = 1e-5
    surrogate_seed: int = 7
    probe_weight: float = 0.5

    def validate(self):
        if self.channels < 1 or self.history < 0:
            raise ConfigurationError("channels/history out of range")
        if self.rpn_topk < 1 or self.roi_samples < 1:
            raise ConfigurationError("proposal counts must be positive")
        if self.pos_weight < 1 or self.align_eps <= 0:
            raise ConfigurationError("pos_weight >= 1 and align_eps > 0 required")


@dataclass
class LossConfig:
    lam: float = 0.5
    gamma: float = 0.1
    kappa: float = 1.0
    delta: float = 0.5
    beta: float = 0.0

    def validate(self):
        if min(self.lam, self.gamma, self.kappa) < 0:
            raise ConfigurationError("loss coefficients must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")


@dataclass
class TrainConfig:
    supervised_steps: int = 250
    lr: float = 3e-3
    optimizer: str = "adam"
    rounds: int = 2
    student_steps: int = 120
    alpha: float = 0.999
    eta: float = 1.0
    refine_steps: int = 50
    refine_lr: float = 1e-3
    refine_batch: int = 4
    m_fraction: float = 0.05
    score_thresh: float = 0.4
    eval_score_thresh: float = 0.3
    init_from: str | None = None
    real_timing: bool = False

    def validate(self):
        if self.supervised_steps < 0 or self.student_steps < 0 or self.rounds < 0:
            raise ConfigurationError("step counts must be >= 0")
        if self.lr <= 0 or self.refine_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.eta < 0 or self.refine_steps < 0 or self.refine_batch < 1:
            raise ConfigurationError("refinement settings out of range")
        if not 0.0 <= self.m_fraction <= 1.0:
            raise ConfigurationError("m_fraction must lie in [0, 1]")
        if not 0.0 <= self.score_thresh <= 1.0 or not 0.0 <= self.eval_score_thresh <= 1.0:
            raise ConfigurationError("score thresholds must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be adam or sgd")


@dataclass
class AblationConfig:
    use_aligned_fusion: bool = True
    use_uncertainty: bool = True
    use_refinement: bool = True
    use_temporal: bool = True
    use_perspective: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        return self

    # -- serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        def build(cls, sub):
            known = {f.name for f in dataclasses.fields(cls)}
            extra = set(sub) - known
            if extra:
                raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
            return cls(**sub)

        cfg = ExperimentConfig(
            seed=d.get("seed", 0),
            data=build(DataConfig, d.get("data", {})),
            model=build(ModelConfig, d.get("model", {})),
            loss=build(LossConfig, d.get("loss", {})),
            train=build(TrainConfig, d.get("train", {})),
            ablation=build(AblationConfig, d.get("ablation", {})),
        )
        return cfg.validate()

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    def config_hash(self) -> str:
        """Lineage hash: stable across warm-starts and timing toggles."""
        d = self.to_dict()
        d["train"]["init_from"] = None
        d["train"]["real_timing"] = False
        canonical = json.dumps(d, indent=2, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    # -- factories -----------------------------------------------------------------

    def grid(self) -> Grid:
        return Grid(self.data.grid_size, self.data.extent)

    def dataset_spec(self, seed_offset: int = 0, n_sequences: int | None = None) -> DatasetSpec:
        d = self.data
        return DatasetSpec(
            seed=self.seed + seed_offset,
            n_sequences=n_sequences if n_sequences is not None else d.n_sequences,
            seq_len=d.seq_len,
            grid=self.grid(),
            classes=d.classes,
            labeled_fraction=d.labeled_fraction,
            points_per_box=d.points_per_box,
            lidar_noise=d.lidar_noise,
            clutter_points=d.clutter_points,
            camera_noise=d.camera_noise,
            max_boxes=d.max_boxes,
            min_boxes=d.min_boxes,
            misalign_cells=d.misalign_cells,
            misalign_deg=d.misalign_deg,
            distortion_amp=d.distortion_amp,
            distortion_freq=d.distortion_freq,
        )

    def pipeline(self) -> Pipeline:
        m, a = self.model, self.ablation
        return Pipeline(
            grid=self.grid(),
            classes=self.data.classes,
            channels=m.channels,
            history=m.history,
            rpn_hidden=m.rpn_hidden,
            roi_hidden=m.roi_hidden,
            rpn_topk=m.rpn_topk,
            roi_samples=m.roi_samples,
            pos_weight=m.pos_weight,
            align_eps=m.align_eps,
            surrogate_seed=m.surrogate_seed,
            use_aligned_fusion=a.use_aligned_fusion,
            use_temporal=a.use_temporal,
            use_perspective=a.use_perspective,
            probe_weight=m.probe_weight,
        )

    def weights(self) -> LossWeights:
        return LossWeights(lam=self.loss.lam, gamma=self.loss.gamma, kappa=self.loss.kappa)

    def round_config(self, n_unlabeled_initial: int) -> RoundConfig:
        t, l, a = self.train, self.loss, self.ablation
        return RoundConfig(
            student_steps=t.student_steps,
            lr=t.lr,
            alpha=t.alpha,
            kappa=l.kappa,
            eta=t.eta,
            refine_steps=t.refine_steps,
            refine_lr=t.refine_lr,
            refine_batch=t.refine_batch,
            promote_m=int(round(t.m_fraction * n_unlabeled_initial)),
            score_thresh=t.score_thresh,
            delta=l.delta,
            beta=l.beta,
            use_uncertainty=a.use_uncertainty,
            use_refinement=a.use_refinement,
            optimizer=t.optimizer,
        )
