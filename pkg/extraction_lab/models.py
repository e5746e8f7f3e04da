"""Pydantic models for configuration, verdicts and experiment results."""

from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

# Hidden-layer count per fully-connected preset; every hidden layer has the same width.
ARCHITECTURE_PRESETS: dict[str, int] = {"fc1": 1, "fc2": 2, "fc3": 3, "fc4": 4}


class Activation(str, Enum):
    """Layer activation tags."""

    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


class OptimizerKind(str, Enum):
    """Supported optimizers."""

    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class CraftMethod(str, Enum):
    """Adversarial example crafting algorithms."""

    FGSM = "fgsm"
    IFGSM = "ifgsm"
    MIFGSM = "mifgsm"


class CraftMode(str, Enum):
    """Direction of the crafting step."""

    TARGETED = "targeted"
    NON_TARGETED = "non_targeted"


class Synthesis(str, Enum):
    """Synthetic query generation strategies."""

    JBDA = "jbda"
    TRND_FGSM = "trnd_fgsm"
    TRND_IFGSM = "trnd_ifgsm"
    COLOR = "color"
    TRAMER = "tramer"


class HyperStrategy(str, Enum):
    """How the substitute's training hyperparameters are chosen."""

    PAPERNOT_RULE = "papernot_rule"
    SAME = "same"
    CV_SEARCH = "cv_search"


class ResponseMode(str, Enum):
    """What the prediction API returns."""

    LABELS = "labels"
    PROBABILITIES = "probabilities"


class RetrainMode(str, Enum):
    """Substitute retraining between duplication rounds."""

    FROM_SCRATCH = "from_scratch"
    INCREMENTAL = "incremental"


class Provenance(str, Enum):
    """Origin of a queried sample."""

    SEED = "seed"
    SYNTHETIC = "synthetic"
    RANDOM = "random"
    LINESEARCH = "linesearch"


class VerdictStatus(str, Enum):
    """Per-query detector outcome."""

    WARMING_UP = "warming_up"
    BENIGN = "benign"
    ATTACK = "attack"


class DistanceMetric(str, Enum):
    """Distance between two queries."""

    L2 = "l2"
    L1 = "l1"


class ResponsePolicy(str, Enum):
    """What the defended API does once an alarm is raised."""

    FLAG = "flag"
    BLOCK = "block"
    DECEIVE = "deceive"


class StreamMode(str, Enum):
    """Benign client simulation scenarios."""

    IID_NATURAL = "iid_natural"
    RANDOM_UNIFORM = "random_uniform"
    SEQUENCES = "sequences"


class QueryKind(str, Enum):
    """Role of an entry in an evasion plan."""

    USEFUL = "useful"
    DUMMY = "dummy"


class TrainingConfig(BaseModel):
    """Hyperparameters for one training run."""

    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = Field(default=0.001, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=32, ge=1)
    dropout_rate: float = Field(default=0.0, ge=0, lt=1)
    seed: int = 0
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)


class CraftSpec(BaseModel):
    """L-infinity bounded crafting parameters."""

    method: CraftMethod = CraftMethod.FGSM
    mode: CraftMode = CraftMode.NON_TARGETED
    epsilon: float = Field(default=64 / 255, ge=0)
    steps: int | None = Field(default=None, ge=1)
    momentum_decay: float = Field(default=1.0, ge=0)
    clip_range: tuple[float, float] = (-1.0, 1.0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "CraftSpec":
        lo, hi = self.clip_range
        if lo >= hi:
            raise ValueError(f"clip_range must satisfy lo < hi, got {self.clip_range}")
        if self.epsilon > hi - lo:
            raise ValueError(f"epsilon {self.epsilon} exceeds feature range {hi - lo}")
        if self.steps is None:
            self.steps = 1 if self.method == CraftMethod.FGSM else 11
        elif self.method == CraftMethod.FGSM and self.steps != 1:
            raise ValueError("fgsm is a single-step method (steps must be 1)")
        return self

    @property
    def step_size(self) -> float:
        return self.epsilon / (self.steps or 1)


class AttackConfig(BaseModel):
    """Strategy bundle for one extraction run."""

    seeds_per_class: int = Field(default=10, ge=1)
    budget: int = Field(default=102_400, ge=1)
    duplication_rounds: int = Field(default=6, ge=0)
    synthesis: Synthesis = Synthesis.JBDA
    step: float = Field(default=25.5 / 255, gt=0)
    expansion_factor: int = Field(default=2, ge=2)
    hyper_strategy: HyperStrategy = HyperStrategy.PAPERNOT_RULE
    response_mode: ResponseMode = ResponseMode.LABELS
    reservoir_fraction: float = Field(default=1.0, gt=0, le=1)
    retrain_mode: RetrainMode | None = None
    ifgsm_steps: int = Field(default=11, ge=1)
    color_channels: int = Field(default=1, ge=1)
    substitute_hidden: list[int] = Field(default_factory=lambda: [32, 32])
    seed: int = 0

    @model_validator(mode="after")
    def _check_expansion(self) -> "AttackConfig":
        if self.synthesis == Synthesis.JBDA and self.expansion_factor != 2:
            raise ValueError("jbda doubles the labeled set: expansion_factor must be 2")
        return self

    def effective_retrain_mode(self) -> RetrainMode:
        """Explicit retrain mode, else incremental for the Papernot rule only."""
        if self.retrain_mode is not None:
            return self.retrain_mode
        if self.hyper_strategy == HyperStrategy.PAPERNOT_RULE:
            return RetrainMode.INCREMENTAL
        return RetrainMode.FROM_SCRATCH


class HyperRange(BaseModel):
    """Log-scale search box over learning rate and training epochs."""

    lr_bounds: tuple[float, float] = (1e-4, 1e-2)
    epoch_bounds: tuple[float, float] = (10, 320)

    @model_validator(mode="after")
    def _check_order(self) -> "HyperRange":
        for name, (lo, hi) in (("lr_bounds", self.lr_bounds), ("epoch_bounds", self.epoch_bounds)):
            if not 0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lower < upper, got {(lo, hi)}")
        return self


class SearchRecord(BaseModel):
    """One hyperparameter evaluation of a CV-search."""

    index: int
    phase: Literal["corner", "random", "gp"]
    learning_rate: float
    epochs: int
    fold_accuracies: list[float] = []
    mean_accuracy: float | None = None
    failed: bool = False


class DetectorConfig(BaseModel):
    """PRADA detector parameters."""

    delta: float = Field(default=0.9, gt=0, lt=1)
    window_min: int = Field(default=100, ge=3)
    outlier_sigmas: float = Field(default=3.0, gt=0)
    distance_metric: DistanceMetric = DistanceMetric.L2
    response_mode: ResponsePolicy = ResponsePolicy.FLAG
    freeze_on_alarm: bool = True


class Verdict(BaseModel):
    """Detector outcome for a single query."""

    index: int
    label: int
    status: VerdictStatus
    current_w: float | None = None
    d_min: float | None = None
    trimmed_count: int = 0
    attack: bool = False
    alarm: bool = False
    degenerate: bool = False


class DefendedResponse(BaseModel):
    """What the defended API hands back to the client."""

    label: int | None
    probabilities: list[float] | None
    denied: bool = False
    alarm: bool = False
    status: VerdictStatus


class BenignStreamSpec(BaseModel):
    """Benign client simulation parameters."""

    mode: StreamMode = StreamMode.IID_NATURAL
    length: int = Field(default=6000, gt=0)
    sequence_length: int = Field(default=30, ge=1)
    input_dim: int | None = Field(default=None, ge=1)
    noise_scale: float = Field(default=0.2, ge=0)
    noise_floor: float = Field(default=0.5, ge=0, le=1)
    seed: int = 0


class PlanEntry(BaseModel):
    """One distance in an evasion schedule."""

    d_min: float
    kind: QueryKind


class EvasionPlan(BaseModel):
    """Interleaved useful and dummy distances."""

    entries: list[PlanEntry]
    useful_count: int
    dummy_count: int

    @property
    def overhead_ratio(self) -> float:
        return self.dummy_count / self.useful_count if self.useful_count else 0.0

    def distances(self) -> list[float]:
        return [e.d_min for e in self.entries]

    def useful_distances(self) -> list[float]:
        return [e.d_min for e in self.entries if e.kind == QueryKind.USEFUL]


class MetricsReport(BaseModel):
    """Headline results of one experiment."""

    name: str
    seed: int
    status: Literal["ok", "failed"] = "ok"
    failed_stage: str | None = None
    error: str | None = None

    test_agreement: float | None = Field(default=None, ge=0, le=1)
    round0_test_agreement: float | None = Field(default=None, ge=0, le=1)
    ru_agreement: float | None = Field(default=None, ge=0, le=1)
    transfer_targeted: float | None = Field(default=None, ge=0, le=1)
    transfer_nontargeted: float | None = Field(default=None, ge=0, le=1)
    target_accuracy: float | None = Field(default=None, ge=0, le=1)

    fpr: float | None = Field(default=None, ge=0, le=1)
    fpr_by_mode: dict[str, float] = {}
    detection_index: int | None = None
    queries_total: int = 0
    growing_set_bytes: int = 0

    evasion_dummies: int | None = None
    evasion_overhead: float | None = None
    negative_controls_suppressed: dict[str, bool] = {}

    flags: list[str] = []
    training_config: dict[str, Any] | None = None
    config: dict[str, Any] = {}


class ExperimentConfig(BaseModel):
    """Flat experiment configuration, one key per line of the YAML file."""

    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    seed: int = 0
    output_dir: str = "outputs"

    # Data
    dataset: Literal["blobs", "digits", "csv"] = "blobs"
    dataset_path: str | None = None
    blobs_classes: int = Field(default=3, ge=2)
    blobs_dim: int = Field(default=2, ge=1)
    blobs_per_class: int = Field(default=300, ge=1)
    blobs_margin: float = Field(default=6.0, gt=0)
    test_fraction: float = Field(default=0.25, gt=0, lt=1)
    attacker_fraction: float = Field(default=0.25, gt=0, lt=1)

    # Target model
    target_architecture: str = "fc2"
    hidden_width: int = Field(default=32, ge=1)
    target_epochs: int = Field(default=100, ge=0)
    target_learning_rate: float = Field(default=0.001, gt=0)
    target_batch_size: int = Field(default=32, ge=1)

    # Attack
    synthesis: Synthesis = Synthesis.JBDA
    seeds_per_class: int = Field(default=10, ge=1)
    budget: int = Field(default=102_400, ge=1)
    duplication_rounds: int = Field(default=5, ge=0)
    step: float = Field(default=25.5 / 255, gt=0)
    expansion_factor: int = Field(default=2, ge=2)
    hyper_strategy: HyperStrategy = HyperStrategy.PAPERNOT_RULE
    response_mode: ResponseMode = ResponseMode.LABELS
    reservoir_fraction: float = Field(default=1.0, gt=0, le=1)
    retrain_mode: RetrainMode | None = None
    substitute_architecture: str = "fc2"
    ifgsm_steps: int = Field(default=11, ge=1)
    color_channels: int = Field(default=1, ge=1)

    # Detector
    delta: float = Field(default=0.9, gt=0, lt=1)
    window_min: int = Field(default=100, ge=3)
    outlier_sigmas: float = Field(default=3.0, gt=0)
    distance_metric: DistanceMetric = DistanceMetric.L2
    response_policy: ResponsePolicy = ResponsePolicy.FLAG
    sweep_deltas: list[float] = Field(
        default_factory=lambda: [0.80, 0.84, 0.88, 0.90, 0.92, 0.94, 0.96, 0.98]
    )

    # Benign clients
    benign_modes: list[StreamMode] = Field(default_factory=lambda: list(StreamMode))
    benign_clients: int = Field(default=5, ge=1)
    benign_length: int = Field(default=6000, ge=1)
    sequence_length: int = Field(default=30, ge=1)
    sequence_noise: float = Field(default=0.2, ge=0)
    sequence_noise_floor: float = Field(default=0.5, ge=0, le=1)

    # Metrics
    compute_agreement: bool = True
    compute_transferability: bool = True
    compute_detection: bool = True
    compute_fpr: bool = True
    compute_evasion: bool = False
    transfer_method: CraftMethod = CraftMethod.MIFGSM
    transfer_epsilon: float = Field(default=64 / 255, ge=0)
    ru_samples: int = Field(default=4000, ge=1)

    @model_validator(mode="after")
    def _check_presets(self) -> "ExperimentConfig":
        for field in ("target_architecture", "substitute_architecture"):
            preset = getattr(self, field)
            if preset not in ARCHITECTURE_PRESETS:
                raise ValueError(
                    f"{field}={preset!r} is not a known preset {sorted(ARCHITECTURE_PRESETS)}"
                )
        if self.dataset == "csv" and not self.dataset_path:
            raise ValueError("dataset 'csv' requires dataset_path")
        return self

    def hidden_layers(self, preset: str) -> list[int]:
        return [self.hidden_width] * ARCHITECTURE_PRESETS[preset]

    def target_training(self) -> TrainingConfig:
        return TrainingConfig(
            optimizer=OptimizerKind.ADAM,
            learning_rate=self.target_learning_rate,
            epochs=self.target_epochs,
            batch_size=self.target_batch_size,
            seed=self.seed,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            seeds_per_class=self.seeds_per_class,
            budget=self.budget,
            duplication_rounds=self.duplication_rounds,
            synthesis=self.synthesis,
            step=self.step,
            expansion_factor=self.expansion_factor,
            hyper_strategy=self.hyper_strategy,
            response_mode=self.response_mode,
            reservoir_fraction=self.reservoir_fraction,
            retrain_mode=self.retrain_mode,
            ifgsm_steps=self.ifgsm_steps,
            color_channels=self.color_channels,
            substitute_hidden=self.hidden_layers(self.substitute_architecture),
            seed=self.seed,
        )

    def detector_config(self, delta: float | None = None) -> DetectorConfig:
        return DetectorConfig(
            delta=self.delta if delta is None else delta,
            window_min=self.window_min,
            outlier_sigmas=self.outlier_sigmas,
            distance_metric=self.distance_metric,
            response_mode=self.response_policy,
        )
