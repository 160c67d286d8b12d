"""
PYDANTIC SCHEMAS - Configuration and report data validation

This file defines the structured data the toolkit reads and writes using Pydantic.
These schemas provide:
1. Experiment configuration (YAML files, versioned by config_version)
2. Optimizer / schedule / suggestion settings with defaults per task
3. Report structures: INQ step log, memory report, bench report, metric records
4. Automatic JSON serialization for JSON-lines logs and CLI output

Each schema corresponds to one config section or one artifact the harness emits.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from powquant.utils import Constants, validate_bit_width, validate_percentage

Task = Literal["seg", "cls", "asr"]
ModelSize = Literal["full", "small"]
Strategy = Literal["magnitude", "random"]
Recipe = Literal[
    "bitwidth-sweep", "parallel-sweep", "bitwidth-x-parallel", "small-model",
    "sa-nt", "partition-compare", "memory",
]
MetricName = Literal[
    "dice", "object_f1", "seg_avg", "top1_error", "accuracy", "frame_error_rate", "memory_ratio",
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(_Section):
    """
    Momentum SGD settings.

    lr_decay is applied per step as lr <- lr * (1 - lr_decay); step_drop_at /
    step_drop_lr implement the segmentation recipe's one-time drop.
    """
    learning_rate: float = Field(Constants.CLS_LR, gt=0)
    lr_decay: float = Field(Constants.LR_DECAY, ge=0, lt=1)
    momentum: float = Field(Constants.MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(Constants.WEIGHT_DECAY, ge=0)
    step_drop_at: Optional[int] = Field(None, gt=0)
    step_drop_lr: Optional[float] = Field(None, gt=0)
    batch_size: int = Field(Constants.DEFAULT_BATCH_SIZE, gt=0)
    epochs: int = Field(10, ge=0)

    def build(self):
        """Fresh optimizer state (velocity buffers empty)."""
        from powquant.services.nncore import OptimizerState
        return OptimizerState(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            step_drop_at=self.step_drop_at,
            step_drop_lr=self.step_drop_lr,
        )


def default_optimizer(task: str) -> OptimizerConfig:
    """Retraining optimizer defaults per task."""
    if task == "seg":
        return OptimizerConfig(learning_rate=Constants.SEG_LR, lr_decay=0.0, momentum=Constants.MOMENTUM,
                               step_drop_at=Constants.SEG_STEP_DROP_AT, step_drop_lr=Constants.SEG_LR_DROPPED,
                               epochs=2)
    lr = Constants.CLS_LR if task == "cls" else Constants.ASR_LR
    return OptimizerConfig(learning_rate=lr, lr_decay=Constants.LR_DECAY, momentum=Constants.MOMENTUM, epochs=2)


def default_pretrain(task: str) -> OptimizerConfig:
    """From-scratch float training at desk scale."""
    epochs = {"seg": 12, "cls": 10, "asr": 12}[task]
    return OptimizerConfig(learning_rate=1e-2, lr_decay=0.0, momentum=Constants.MOMENTUM,
                           weight_decay=0.0, epochs=epochs)


class ScheduleConfig(_Section):
    """Incremental quantization schedule and partition settings."""
    fractions: Tuple[float, ...] = Constants.DEFAULT_SCHEDULE
    epochs_per_step: int = Field(Constants.DEFAULT_EPOCHS_PER_STEP, ge=0)
    strategy: Strategy = "magnitude"
    max_level_override: Optional[float] = Field(None, gt=0)

    @field_validator("fractions")
    @classmethod
    def _accumulated(cls, v):
        if not v or v[-1] != 1.0:
            raise ValueError("schedule must end at 1.0")
        if any(not 0.0 < f <= 1.0 for f in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("schedule fractions must be strictly increasing within (0, 1]")
        return v


class DataConfig(_Section):
    """Synthetic dataset sizes and shapes (IDX files used when idx_dir is set, relative to POWQUANT_DATA_DIR)."""
    n_train: int = Field(2000, gt=0)
    n_val: int = Field(500, ge=0)
    n_test: int = Field(1000, gt=0)
    image_size: int = Field(16, ge=8)
    n_classes: int = Field(10, ge=2)
    seq_len: int = Field(50, gt=0)
    n_features: int = Field(13, gt=0)
    label_noise: float = Field(0.0, ge=0, le=1)
    idx_dir: Optional[str] = None

    @field_validator("image_size")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("image_size must be even")
        return v


class SuggestionConfig(_Section):
    """Suggestive-annotation loop settings (defaults U=16, R=8, T=120)."""
    uncertainty_take: int = Field(Constants.SA_UNCERTAINTY_TAKE, gt=0)
    representative_take: int = Field(Constants.SA_REPRESENTATIVE_TAKE, gt=0)
    iterations: int = Field(Constants.SA_ITERATIONS, ge=1)
    quantize_suggestors: Optional[int] = None
    ensemble_size: int = Field(3, ge=2)
    seed_set_size: int = Field(16, ge=1)
    reuse_ensemble: bool = False
    member_epochs: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _takes(self):
        if self.representative_take > self.uncertainty_take:
            raise ValueError("representative_take must not exceed uncertainty_take")
        if self.quantize_suggestors is not None:
            validate_bit_width(self.quantize_suggestors)
        return self


class SweepConfig(_Section):
    """Experiment axes."""
    recipe: Recipe = "bitwidth-sweep"
    bit_widths: List[int] = Field(default_factory=lambda: list(range(2, 10)))
    parallel: List[int] = Field(default_factory=lambda: [2, 3, 4, 5, 6, 7])
    seeds: List[int] = Field(default_factory=lambda: list(Constants.DEFAULT_SEEDS))
    member_bits: Optional[int] = None
    workers: int = Field(1, ge=1)

    @field_validator("bit_widths")
    @classmethod
    def _bits(cls, v):
        return [validate_bit_width(b) for b in v]

    @field_validator("parallel")
    @classmethod
    def _parallel(cls, v):
        if any(k < 1 for k in v):
            raise ValueError("parallel numbers must be >= 1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("seeds must not be empty")
        return v


class OutputConfig(_Section):
    out_dir: str = "runs/latest"
    save_models: bool = True


class ExperimentConfig(_Section):
    """
    Full experiment description.

    YAML layout:
        config_version: 1
        task: cls
        model_size: full
        data: {...}
        optimizer: {...}      # INQ retraining (defaults per task)
        pretrain: {...}       # float baseline training
        schedule: {...}
        sweep: {...}
        suggestion: {...}
        output: {...}
    """
    config_version: int = Constants.CONFIG_VERSION
    task: Task = "cls"
    model_size: ModelSize = "full"
    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: Optional[OptimizerConfig] = None
    pretrain: Optional[OptimizerConfig] = None
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    suggestion: SuggestionConfig = Field(default_factory=SuggestionConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @field_validator("config_version")
    @classmethod
    def _version(cls, v):
        if v != Constants.CONFIG_VERSION:
            raise ValueError(f"Unsupported config_version {v} (expected {Constants.CONFIG_VERSION})")
        return v

    @model_validator(mode="after")
    def _task_defaults(self):
        if self.optimizer is None:
            self.optimizer = default_optimizer(self.task)
        if self.pretrain is None:
            self.pretrain = default_pretrain(self.task)
        if self.task == "cls" and self.schedule.max_level_override is None \
                and "max_level_override" not in self.schedule.model_fields_set:
            self.schedule.max_level_override = Constants.CLS_MAX_LEVEL
        return self

    @classmethod
    def from_yaml(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """Load a YAML config; dotted override keys ("sweep.seeds") win over file values."""
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        for dotted, value in (overrides or {}).items():
            node = raw
            *parents, leaf = dotted.split(".")
            for key in parents:
                node = node.setdefault(key, {})
            node[leaf] = value
        return cls.model_validate(raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


# Report structures
class InqStepRecord(BaseModel):
    """One partition / quantize / retrain step."""
    step: int
    target_fraction: float
    quantized_fraction: float
    quantized_counts: Dict[str, int]
    layer_sizes: Dict[str, int]
    losses: List[float] = Field(default_factory=list)
    val_metric: Optional[float] = None


class InqLog(BaseModel):
    bit_width: int
    strategy: Strategy
    steps: List[InqStepRecord] = Field(default_factory=list)


class TensorMemory(BaseModel):
    name: str
    dtype: Literal["float32", "packed"]
    count: int
    bit_width: Optional[int] = None
    stored_bytes: int


class MemoryReport(BaseModel):
    """Weights-only headline ratio plus an honest whole-model figure."""
    float_bytes: int
    packed_bytes: int
    whole_model_float_bytes: int
    whole_model_bytes: int
    reduction_ratio: float
    whole_model_ratio: float
    tensors: List[TensorMemory] = Field(default_factory=list)


class BenchReport(BaseModel):
    repetitions: int
    batch_size: int
    multiply_median_s: float
    shiftadd_median_s: float
    ratio: float
    skip_rate: float
    multiply_times_s: List[float]
    shiftadd_times_s: List[float]


class MetricRecord(BaseModel):
    """One CSV cell: task, axis values, metric, value in percent, seed."""
    task: Task
    recipe: str
    axes: Dict[str, Union[int, str]]
    metric: MetricName
    value: float
    seed: int

    @field_validator("value")
    @classmethod
    def _percent(cls, v, info):
        if info.data.get("metric") != "memory_ratio":
            validate_percentage(v)
        return v


class SuggestionResult(BaseModel):
    """Accumulated suggested set (indices into the pool's dataset)."""
    indices: List[int]
    iterations_run: int
    exhausted: bool
    per_iteration: List[List[int]] = Field(default_factory=list)
