"""
ENSEMBLE SA SERVICE - Ensembles and suggestive annotation

This service drives the label-budget loop built on a suggestive ensemble:
1. Ensemble / ensemble_predict - K shape-compatible members, probability averaging
2. uncertainty_score(s) - mean across-member variance of predicted probabilities
3. representative_select - greedy max-coverage under cosine similarity of descriptors
4. suggest_training_set - uncertainty top-U, representative R, repeated T times
5. train_ensemble - concurrent member training, optionally quantized with INQ

Members differ by RNG seed; quantized members also differ in where their
weights land on the level sets, which keeps the ensemble diverse.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from powquant.schemas import OptimizerConfig, SuggestionConfig, SuggestionResult
from powquant.services.inq import InqSchedule, inq_train
from powquant.services.nncore import MatmulKernel, ModelGraph, predict, predict_features
from powquant.utils import EnsembleError, get_logger

logger = get_logger(__name__)

FeatureFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Ensemble:
    """K trained members sharing input and output shapes."""

    members: List[ModelGraph]

    def __post_init__(self):
        if not self.members:
            raise EnsembleError("ensemble needs at least one member")
        first = self.members[0]
        for member in self.members[1:]:
            if member.input_shape != first.input_shape or member.output_shape != first.output_shape:
                raise EnsembleError(
                    f"member {member.name} shapes {member.input_shape}->{member.output_shape} do not match "
                    f"{first.input_shape}->{first.output_shape}"
                )

    @property
    def size(self) -> int:
        return len(self.members)


def member_probabilities(ens: Ensemble, batch: np.ndarray, kernel: Optional[MatmulKernel] = None) -> np.ndarray:
    """Stacked member outputs, shape (K, batch, ...)."""
    outputs = [predict(member, batch, kernel=kernel) for member in ens.members]
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise EnsembleError(f"member outputs disagree in shape: {sorted(shapes)}")
    return np.stack(outputs, axis=0)


def ensemble_predict(ens: Ensemble, batch: np.ndarray, kernel: Optional[MatmulKernel] = None) -> np.ndarray:
    """Arithmetic mean of member probability outputs."""
    return member_probabilities(ens, batch, kernel).mean(axis=0)


def variance_scores(stack: np.ndarray) -> np.ndarray:
    """
    Per-sample uncertainty from a (K, batch, ...) probability stack.

    Population variance across members, averaged over every output element of a sample.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.shape[0] < 2:
        raise EnsembleError("uncertainty undefined for fewer than 2 members")
    var = stack.var(axis=0)
    return var.reshape(var.shape[0], -1).mean(axis=1)


def uncertainty_scores(ens: Ensemble, batch: np.ndarray) -> np.ndarray:
    """Batched uncertainty_score."""
    if ens.size < 2:
        raise EnsembleError("uncertainty undefined for fewer than 2 members")
    return variance_scores(member_probabilities(ens, batch))


def uncertainty_score(ens: Ensemble, sample: np.ndarray) -> float:
    return float(uncertainty_scores(ens, np.asarray(sample)[None])[0])


def representative_select(candidates: np.ndarray, pool: np.ndarray, r: int, feature_fn: FeatureFn) -> List[int]:
    """
    Greedy max-coverage pick of r candidate positions.

    Each round adds the candidate maximizing sum over the pool of the best
    cosine similarity to any chosen candidate; ties go to the lowest index.
    """
    if len(pool) == 0:
        raise EnsembleError("representative selection needs a nonempty pool")
    if not 0 <= r <= len(candidates):
        raise EnsembleError(f"cannot select {r} of {len(candidates)} candidates")
    if r == 0:
        return []

    sim = cosine_similarity(feature_fn(pool), feature_fn(candidates))
    coverage = np.full(sim.shape[0], -np.inf)
    available = np.ones(sim.shape[1], dtype=bool)
    chosen: List[int] = []
    for _ in range(r):
        gains = np.maximum(coverage[:, None], sim).sum(axis=0)
        gains[~available] = -np.inf
        pick = int(np.argmax(gains))
        chosen.append(pick)
        available[pick] = False
        coverage = np.maximum(coverage, sim[:, pick])
    return chosen


def coverage_value(candidates: np.ndarray, pool: np.ndarray, feature_fn: FeatureFn) -> float:
    """Objective value of a candidate set: sum over the pool of the best similarity."""
    if len(candidates) == 0:
        return 0.0
    sim = cosine_similarity(feature_fn(pool), feature_fn(candidates))
    return float(sim.max(axis=1).sum())


def first_member_features(ens: Ensemble) -> FeatureFn:
    """Representativeness descriptor: penultimate-layer features of the first member."""
    return lambda samples: predict_features(ens.members[0], samples)


def suggest_training_set(X: np.ndarray, labeled: Sequence[int], pool: Sequence[int],
                         config: SuggestionConfig, trainer: Callable[[List[int]], Ensemble],
                         feature_fn: Optional[FeatureFn] = None) -> SuggestionResult:
    """
    Run the suggestion loop over a pool of unlabeled sample indices into X.

    Each iteration trains (or reuses) the suggestive ensemble on the labeled
    seed set plus everything suggested so far, ranks the remaining pool by
    uncertainty, keeps the top U and moves the R most representative of them
    to the suggested set.
    """
    remaining = np.array(sorted(set(int(i) for i in pool)), dtype=np.int64)
    if remaining.size == 0:
        raise EnsembleError("suggestion pool is empty")
    labeled = [int(i) for i in labeled]
    suggested: List[int] = []
    per_iteration: List[List[int]] = []
    ensemble: Optional[Ensemble] = None
    exhausted = False

    for iteration in range(1, config.iterations + 1):
        if remaining.size == 0:
            exhausted = True
            break

        # STEP 1: Train or refresh the suggestive ensemble
        if ensemble is None or not config.reuse_ensemble:
            ensemble = trainer(labeled + suggested)

        # STEP 2: Uncertainty ranking, highest first, ties by sample index
        scores = uncertainty_scores(ensemble, X[remaining])
        u = min(config.uncertainty_take, remaining.size)
        top = remaining[np.lexsort((remaining, -scores))[:u]]

        # STEP 3: Representativeness filter
        r = min(config.representative_take, u)
        if r < config.representative_take:
            exhausted = True
        features = feature_fn or first_member_features(ensemble)
        picked = top[representative_select(X[top], X[remaining], r, features)]

        suggested.extend(int(i) for i in picked)
        per_iteration.append([int(i) for i in picked])
        remaining = np.setdiff1d(remaining, picked, assume_unique=True)
        logger.info(f"suggestion iteration {iteration}: +{len(picked)} ({len(suggested)} total)",
                    extra={"event": "suggest_iteration", "iteration": iteration, "picked": len(picked),
                           "suggested": len(suggested), "remaining": int(remaining.size),
                           "mean_uncertainty": float(scores.mean())})

    if exhausted:
        logger.warning(f"suggestion pool exhausted after {len(per_iteration)} iterations")
    return SuggestionResult(indices=suggested, iterations_run=len(per_iteration),
                            exhausted=exhausted, per_iteration=per_iteration)


def random_training_set(pool: Sequence[int], budget: int, seed: int = 0) -> List[int]:
    """Random-selection baseline with the same label budget."""
    pool = np.array(sorted(set(int(i) for i in pool)), dtype=np.int64)
    budget = min(budget, pool.size)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(pool, size=budget, replace=False))


# Member training
def make_inq_quantizer(train_data: Tuple[np.ndarray, np.ndarray], schedule: InqSchedule,
                       opt_config: OptimizerConfig, strategy: str = "magnitude",
                       max_level_override: Optional[float] = None) -> Callable[[ModelGraph, int, int], ModelGraph]:
    """Quantizer for train_ensemble backed by inq_train."""

    def quantize(model: ModelGraph, bits: int, seed: int) -> ModelGraph:
        model, _, _ = inq_train(model, train_data, schedule, bits, opt_config, strategy=strategy,
                                max_level_override=max_level_override, seed=seed)
        return model

    return quantize


def train_ensemble(member_trainer: Callable[[int], ModelGraph], k: int, seeds: Optional[Sequence[int]] = None,
                   quantize_bits: Optional[int] = None,
                   quantizer: Optional[Callable[[ModelGraph, int, int], ModelGraph]] = None,
                   workers: int = 1) -> Ensemble:
    """
    Train k members concurrently, one seed each; member order follows the seeds.
    """
    seeds = list(seeds) if seeds is not None else list(range(k))
    if len(seeds) != k:
        raise EnsembleError(f"{k} members need {k} seeds, got {len(seeds)}")
    if quantize_bits is not None and quantizer is None:
        raise EnsembleError("quantize_bits set without a quantizer")

    def build(seed: int) -> ModelGraph:
        model = member_trainer(seed)
        if quantize_bits is not None:
            model = quantizer(model, quantize_bits, seed)
        return model

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        members = list(pool.map(build, seeds))
    return Ensemble(members=members)


def pairwise_member_distance(ens: Ensemble) -> float:
    """Mean L1 distance per weight between members' quantizable tensors, over all pairs."""
    if ens.size < 2:
        return 0.0
    flat = [np.concatenate([m.params[n].reshape(-1).astype(np.float64) for n in m.quantizable_names()])
            for m in ens.members]
    distances = [float(np.mean(np.abs(a - b))) for a, b in combinations(flat, 2)]
    return float(np.mean(distances))
