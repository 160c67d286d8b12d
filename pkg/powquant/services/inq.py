"""
INQ SERVICE - Incremental power-of-two quantization

This service runs the loop of weight partition, group-wise quantization and re-training:
1. PartitionState - per layer: free mask (still floating), codes of the quantized group, level set
2. partition_layer - pick the free weights that raise a layer to its target quantized fraction
3. quantize_group - quantize the picked weights onto P_l ∪ {0} and freeze them
4. inq_train - walk the accumulated-fraction schedule, retraining free weights between steps

Level sets are derived once per layer from the initial float weights (or the
max level override) and stay fixed. Biases are never quantized.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from powquant.schemas import InqLog, InqStepRecord, OptimizerConfig
from powquant.services.nncore import ModelGraph, fit
from powquant.services.quantlevels import LevelSet, derive_level_set, encode_array, quantize_array
from powquant.utils import (
    Constants, LevelSetError, PartitionError, get_logger, validate_bit_width, validate_fraction,
)

logger = get_logger(__name__)

STRATEGIES = ("magnitude", "random")


@dataclass(frozen=True)
class InqSchedule:
    """Accumulated quantized fractions, strictly increasing and ending at 1.0."""

    fractions: Tuple[float, ...] = Constants.DEFAULT_SCHEDULE
    epochs_per_step: int = Constants.DEFAULT_EPOCHS_PER_STEP

    def __post_init__(self):
        fractions = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fractions)
        if not fractions or fractions[-1] != 1.0:
            raise ValueError("schedule must end at 1.0")
        if any(not 0.0 < f <= 1.0 for f in fractions):
            raise ValueError("schedule fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("schedule fractions must be strictly increasing")
        if self.epochs_per_step < 0:
            raise ValueError("epochs_per_step must be >= 0")


@dataclass
class PartitionState:
    """
    Per-layer partition bookkeeping.

    free_masks[name] is True where the weight is still floating (the group
    that keeps training); False positions hold a level value whose code is in
    codes[name]. Masks and codes are flat, in the weight's row-major order.
    initial_magnitudes[name] keeps |w| as it was when quantization started;
    magnitude partitioning ranks by it so retraining cannot reorder groups.
    """

    level_sets: Dict[str, LevelSet]
    free_masks: Dict[str, np.ndarray]
    codes: Dict[str, np.ndarray]
    initial_magnitudes: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def start(cls, model: ModelGraph, bit_width: int,
              max_level_override: Optional[float] = None,
              names: Optional[Sequence[str]] = None) -> "PartitionState":
        """All weights free; one level set per quantizable tensor from its current max |w|."""
        bit_width = validate_bit_width(bit_width)
        params = model.params
        names = list(names) if names is not None else model.quantizable_names()
        level_sets, free, codes, magnitudes = {}, {}, {}, {}
        for name in names:
            w = params[name]
            level_sets[name] = derive_level_set(float(np.max(np.abs(w))) if w.size else 0.0,
                                                bit_width, max_level_override)
            free[name] = np.ones(w.size, dtype=bool)
            codes[name] = np.zeros(w.size, dtype=np.uint32)
            magnitudes[name] = np.abs(w.reshape(-1).astype(np.float64))
        return cls(level_sets=level_sets, free_masks=free, codes=codes, initial_magnitudes=magnitudes)

    def quantized_count(self, name: str) -> int:
        return int(self.free_masks[name].size - np.count_nonzero(self.free_masks[name]))

    def quantized_fraction(self) -> float:
        total = sum(m.size for m in self.free_masks.values())
        if total == 0:
            return 1.0
        return sum(self.quantized_count(n) for n in self.free_masks) / total

    def is_complete(self) -> bool:
        return all(not m.any() for m in self.free_masks.values())

    def freeze_masks(self, model: ModelGraph) -> Dict[str, np.ndarray]:
        """Optimizer freeze masks (True = quantized, do not update) in parameter shapes."""
        params = model.params
        return {name: ~free.reshape(params[name].shape) for name, free in self.free_masks.items()}


def target_count(fraction: float, n: int) -> int:
    """round(fraction * n), half up."""
    return int(np.floor(fraction * n + 0.5))


def partition_layer(weights: np.ndarray, free_mask: np.ndarray, target_fraction: float,
                    strategy: str = "magnitude", rng: Optional[np.random.Generator] = None,
                    ranking: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Flat positions to quantize so the layer reaches round(target_fraction * N) quantized weights.

    magnitude: largest |w| among free weights first, ties by ascending index;
    |w| is taken from ranking (flat, e.g. the initial magnitudes) when given.
    random: uniform sample of free positions from rng.
    """
    validate_fraction(target_fraction)
    if strategy not in STRATEGIES:
        raise ValueError(f"Unknown partition strategy '{strategy}'")
    flat = np.asarray(weights).reshape(-1)
    free = np.asarray(free_mask, dtype=bool).reshape(-1)
    n = flat.size
    already = n - int(np.count_nonzero(free))
    need = target_count(target_fraction, n) - already
    if need < 0:
        raise PartitionError(
            f"target fraction {target_fraction} is below the current quantized fraction {already / max(n, 1):.4f}"
        )
    free_idx = np.flatnonzero(free)
    if need == 0:
        return np.zeros(0, dtype=np.int64)

    # STEP 1: Rank free weights
    if strategy == "magnitude":
        if ranking is None:
            keys = np.abs(flat).astype(np.float64)
        else:
            keys = np.asarray(ranking, dtype=np.float64).reshape(-1)
        if keys.size != n:
            raise PartitionError(f"ranking covers {keys.size} of {n} weights")
        order = np.lexsort((free_idx, -keys[free_idx]))
        return free_idx[order[:need]]

    # STEP 2: Or sample them
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(free_idx, size=need, replace=False))


def quantize_group(state: PartitionState, name: str, weights: np.ndarray, positions: np.ndarray) -> PartitionState:
    """
    Quantize the selected free weights of one layer in place, record their codes, clear their free bits.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return state
    free = state.free_masks[name]
    if not np.all(free[positions]):
        raise PartitionError(f"{name}: position already quantized (groups must stay disjoint)")
    if np.unique(positions).size != positions.size:
        raise PartitionError(f"{name}: duplicate positions in quantization group")

    ls = state.level_sets[name]
    flat = weights.reshape(-1)
    values = quantize_array(flat[positions], ls)
    flat[positions] = values
    state.codes[name][positions] = encode_array(flat[positions], ls)
    free[positions] = False
    return state


def check_partition(state: PartitionState, model: ModelGraph) -> None:
    """
    Raise PartitionError unless every quantized position holds its level value.

    Disjointness and exhaustiveness hold by construction of the boolean free
    mask (each position is in exactly one group); what can break is the
    content of the quantized group, e.g. an optimizer touching frozen weights.
    """
    params = model.params
    for name, free in state.free_masks.items():
        flat = params[name].reshape(-1)
        if free.size != flat.size:
            raise PartitionError(f"{name}: mask covers {free.size} of {flat.size} weights")
        quantized = ~free
        if not quantized.any():
            continue
        try:
            expected = encode_array(flat[quantized], state.level_sets[name])
        except LevelSetError as e:
            raise PartitionError(f"{name}: quantized weight left its level set ({e})") from e
        if not np.array_equal(expected, state.codes[name][quantized]):
            raise PartitionError(f"{name}: quantized weights drifted from their recorded codes")


def inq_train(model: ModelGraph, train_data: Tuple[np.ndarray, np.ndarray], schedule: InqSchedule,
              bit_width: int, opt_config: OptimizerConfig, strategy: str = "magnitude",
              evaluate_fn: Optional[Callable[[ModelGraph], float]] = None,
              max_level_override: Optional[float] = None, seed: int = 0,
              progress: bool = False) -> Tuple[ModelGraph, PartitionState, InqLog]:
    """
    Incrementally quantize every quantizable tensor of a model.

    For each accumulated fraction: partition each layer, quantize the selected
    group, then retrain the still-free weights for epochs_per_step epochs with
    the quantized ones frozen. The model is modified in place and returned
    with its final PartitionState and the per-step log.
    """
    X, Y = train_data
    state = PartitionState.start(model, bit_width, max_level_override)
    opt = opt_config.build()
    rng = np.random.default_rng(seed)
    log = InqLog(bit_width=bit_width, strategy=strategy)
    sizes = {name: int(mask.size) for name, mask in state.free_masks.items()}

    for step, fraction in enumerate(schedule.fractions, start=1):
        # STEP 1: Partition + group-wise quantization, layer by layer
        params = model.params
        for name in state.free_masks:
            positions = partition_layer(params[name], state.free_masks[name], fraction, strategy, rng,
                                        ranking=state.initial_magnitudes.get(name))
            quantize_group(state, name, params[name], positions)
        check_partition(state, model)

        # STEP 2: Re-train the remaining floating weights
        losses = []
        if schedule.epochs_per_step > 0 and not state.is_complete():
            losses = fit(model, X, Y, opt, schedule.epochs_per_step, batch_size=opt_config.batch_size,
                         freeze_mask=state.freeze_masks(model), seed=seed * 1000 + step, progress=progress)
            check_partition(state, model)

        # STEP 3: Record the step
        metric = evaluate_fn(model) if evaluate_fn is not None else None
        record = InqStepRecord(
            step=step,
            target_fraction=fraction,
            quantized_fraction=state.quantized_fraction(),
            quantized_counts={name: state.quantized_count(name) for name in state.free_masks},
            layer_sizes=sizes,
            losses=losses,
            val_metric=metric,
        )
        log.steps.append(record)
        logger.info(
            f"{model.name} INQ step {step}: {record.quantized_fraction:.4f} quantized at {bit_width} bits",
            extra={"event": "inq_step", "model": model.name, "step": step, "bits": bit_width,
                   "target_fraction": fraction, "quantized_fraction": record.quantized_fraction,
                   "val_metric": metric},
        )

    return model, state, log
