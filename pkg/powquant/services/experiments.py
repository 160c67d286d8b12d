"""
EXPERIMENT SERVICE - Recipes that produce the CSV tables

This service runs a validated ExperimentConfig end to end:
1. Building blocks - model_io, train_float, quantize_model, evaluate_model, load_model
2. Recipes - bitwidth-sweep, parallel-sweep, bitwidth-x-parallel, small-model,
   sa-nt, partition-compare, memory
3. run_experiment - one job per seed (concurrent up to sweep.workers), then a
   single-writer merge into <out>/<recipe>.csv with per-axis mean and best rows,
   SQW files for quantized models, <out>/run.jsonl and rows in the results store

Every number in a CSV is a pure function of (config, seed).
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from sqlalchemy.orm import sessionmaker

from powquant import config as settings
from powquant.schemas import ExperimentConfig, MetricRecord, OptimizerConfig, ScheduleConfig
from powquant.services import packstore
from powquant.services.datasets import DatasetSplits, Split, generate_dataset
from powquant.services.ensemble_sa import (
    Ensemble,
    ensemble_predict,
    make_inq_quantizer,
    pairwise_member_distance,
    random_training_set,
    suggest_training_set,
    train_ensemble,
)
from powquant.services.inq import InqSchedule, PartitionState, inq_train
from powquant.services.metrics import HIGHER_IS_BETTER, PRIMARY_METRIC, evaluate_task
from powquant.services.nncore import ModelGraph, copy_model, fit, predict
from powquant.services.zoo import build_model
from powquant.utils import DatasetError, attach_jsonl_log, detach_log, get_logger

logger = get_logger(__name__)

METRIC_COLUMNS = ("dice", "object_f1", "seg_avg", "top1_error", "accuracy", "frame_error_rate", "memory_ratio")
SMALL_MODEL_PRECISIONS = ("float", 4, 8)


# Building blocks
def model_io(config: ExperimentConfig) -> Tuple[Tuple[int, ...], int]:
    """Model input shape and class count implied by the config."""
    data = config.data
    if config.task == "asr":
        return (data.seq_len, data.n_features), data.n_classes
    n_classes = 2 if config.task == "seg" else data.n_classes
    return (data.image_size, data.image_size, 1), n_classes


def new_model(config: ExperimentConfig, seed: int, size: Optional[str] = None) -> ModelGraph:
    input_shape, n_classes = model_io(config)
    return build_model(config.task, input_shape, n_classes, size or config.model_size, seed=seed)


def load_dataset(config: ExperimentConfig, seed: int) -> DatasetSplits:
    splits = generate_dataset(config.task, config.data, seed)
    expected, _ = model_io(config)
    if splits.input_shape != expected:
        raise DatasetError(f"dataset samples have shape {splits.input_shape}, config implies {expected}")
    return splits


def train_float(config: ExperimentConfig, train: Split, seed: int, size: Optional[str] = None,
                epochs: Optional[int] = None) -> ModelGraph:
    """Float baseline from scratch with the pretrain optimizer."""
    model = new_model(config, seed, size)
    opt_config = config.pretrain
    fit(model, train.X, train.Y, opt_config.build(), opt_config.epochs if epochs is None else epochs,
        batch_size=opt_config.batch_size, seed=seed, progress=settings.SHOW_PROGRESS)
    return model


def inq_schedule(schedule: ScheduleConfig) -> InqSchedule:
    return InqSchedule(fractions=tuple(schedule.fractions), epochs_per_step=schedule.epochs_per_step)


def evaluate_model(config: ExperimentConfig, model: ModelGraph, split: Split,
                   kernel=None) -> Dict[str, float]:
    return evaluate_task(config.task, predict(model, split.X, kernel=kernel), split.Y)


def quantize_model(config: ExperimentConfig, model: ModelGraph, splits: DatasetSplits, bits: int, seed: int,
                   strategy: Optional[str] = None) -> Tuple[ModelGraph, PartitionState]:
    """INQ on a copy of a float model; the validation metric is logged per step."""
    primary = PRIMARY_METRIC[config.task]
    evaluate_fn = None
    if len(splits.val):
        evaluate_fn = lambda m: evaluate_model(config, m, splits.val)[primary]  # noqa: E731
    quantized, state, _ = inq_train(
        copy_model(model), (splits.train.X, splits.train.Y), inq_schedule(config.schedule), bits,
        config.optimizer, strategy=strategy or config.schedule.strategy, evaluate_fn=evaluate_fn,
        max_level_override=config.schedule.max_level_override, seed=seed, progress=settings.SHOW_PROGRESS,
    )
    return quantized, state


def quantize_untrained(model: ModelGraph, bits: int, max_level_override: Optional[float] = None) -> PartitionState:
    """Quantize every quantizable tensor in one step without retraining."""
    _, state, _ = inq_train(model, (None, None), InqSchedule(fractions=(1.0,), epochs_per_step=0), bits,
                            OptimizerConfig(), max_level_override=max_level_override)
    return state


def load_model(config: ExperimentConfig, path, seed: int = 0) -> Tuple[ModelGraph, packstore.PackedModel]:
    """Rebuild the recipe model and load an SQW file into it."""
    packed = packstore.read_sqw(path)
    model = new_model(config, seed)
    packed.load_into(model)
    return model, packed


def state_from_packed(model: ModelGraph, packed: packstore.PackedModel) -> PartitionState:
    """PartitionState with every packed tensor complete (used when repacking loaded models)."""
    level_sets = packed.level_sets
    params = model.params
    return PartitionState(
        level_sets=level_sets,
        free_masks={name: np.zeros(params[name].size, dtype=bool) for name in level_sets},
        codes={name: packed[name].codes() for name in level_sets},
    )


def _with_memory(metrics: Dict[str, float], model: ModelGraph, state: PartitionState) -> Dict[str, float]:
    report = packstore.memory_report(packstore.pack_tensors(model, state))
    return {**metrics, "memory_ratio": round(report.reduction_ratio, 4)}


# Recipe context
@dataclass
class SeedContext:
    """Everything one seed's job needs."""

    config: ExperimentConfig
    seed: int
    out_dir: Path
    splits: DatasetSplits
    sqw_files: List[Path] = field(default_factory=list)
    _float: Dict[str, ModelGraph] = field(default_factory=dict)

    def float_model(self, size: Optional[str] = None) -> ModelGraph:
        size = size or self.config.model_size
        if size not in self._float:
            self._float[size] = train_float(self.config, self.splits.train, self.seed, size)
        return self._float[size]

    def save(self, tag: str, model: ModelGraph, state: Optional[PartitionState]) -> None:
        if not self.config.output.save_models:
            return
        path = self.out_dir / "models" / f"{self.config.sweep.recipe}-{tag}-s{self.seed}.sqw"
        packstore.write_sqw(path, model, state)
        self.sqw_files.append(path)

    def row(self, axes: Dict[str, Any], metrics: Dict[str, float], **extra) -> Dict[str, Any]:
        out = dict(axes)
        out["seed"] = self.seed
        out.update(metrics)
        out.update(extra)
        logger.info(f"{self.config.sweep.recipe} {axes} seed {self.seed}: {metrics}",
                    extra={"event": "sweep_point", "recipe": self.config.sweep.recipe, "axes": axes,
                           "seed": self.seed, "metrics": metrics})
        return out


def _baseline(ctx: SeedContext) -> Dict[str, float]:
    metrics = evaluate_model(ctx.config, ctx.float_model(), ctx.splits.test)
    return {f"float_{k}": v for k, v in metrics.items()}


# Recipes
def recipe_bitwidth_sweep(ctx: SeedContext) -> List[Dict[str, Any]]:
    rows = []
    baseline = _baseline(ctx)
    for bits in ctx.config.sweep.bit_widths:
        model, state = quantize_model(ctx.config, ctx.float_model(), ctx.splits, bits, ctx.seed)
        metrics = _with_memory(evaluate_model(ctx.config, model, ctx.splits.test), model, state)
        ctx.save(f"b{bits}", model, state)
        rows.append(ctx.row({"bits": bits}, metrics, **baseline))
    return rows


def _member_seeds(seed: int, k: int) -> List[int]:
    return [seed * 100 + j for j in range(k)]


def _ensemble_rows(ctx: SeedContext, members: List[ModelGraph], axes_fn: Callable[[int], Dict[str, Any]]):
    rows = []
    primary = PRIMARY_METRIC[ctx.config.task]
    singles = [evaluate_model(ctx.config, m, ctx.splits.test)[primary] for m in members]
    for k in ctx.config.sweep.parallel:
        ens = Ensemble(members=members[:k])
        probs = ensemble_predict(ens, ctx.splits.test.X)
        metrics = evaluate_task(ctx.config.task, probs, ctx.splits.test.Y)
        rows.append(ctx.row(axes_fn(k), metrics,
                            **{f"member_mean_{primary}": round(float(np.mean(singles[:k])), 4),
                               "member_distance": round(pairwise_member_distance(ens), 6)}))
    return rows


def _float_members(ctx: SeedContext) -> List[ModelGraph]:
    k = max(ctx.config.sweep.parallel)
    trainer = lambda s: train_float(ctx.config, ctx.splits.train, s)  # noqa: E731
    return train_ensemble(trainer, k, seeds=_member_seeds(ctx.seed, k), workers=settings.WORKERS).members


def _quantized_members(ctx: SeedContext, members: List[ModelGraph], bits: int) -> List[ModelGraph]:
    seeds = _member_seeds(ctx.seed, len(members))
    return [quantize_model(ctx.config, m, ctx.splits, bits, s)[0] for m, s in zip(members, seeds)]


def recipe_parallel_sweep(ctx: SeedContext) -> List[Dict[str, Any]]:
    members = _float_members(ctx)
    bits = ctx.config.sweep.member_bits
    if bits is not None:
        members = _quantized_members(ctx, members, bits)
    label = bits if bits is not None else "float"
    return _ensemble_rows(ctx, members, lambda k: {"parallel": k, "member_bits": label})


def recipe_bitwidth_x_parallel(ctx: SeedContext) -> List[Dict[str, Any]]:
    rows = []
    members = _float_members(ctx)
    for bits in ctx.config.sweep.bit_widths:
        quantized = _quantized_members(ctx, members, bits)
        rows += _ensemble_rows(ctx, quantized, lambda k, b=bits: {"bits": b, "parallel": k})
    return rows


def recipe_small_model(ctx: SeedContext) -> List[Dict[str, Any]]:
    rows = []
    for size in ("full", "small"):
        model = ctx.float_model(size)
        n_params = model.parameter_count()
        for precision in SMALL_MODEL_PRECISIONS:
            if precision == "float":
                metrics = evaluate_model(ctx.config, model, ctx.splits.test)
            else:
                quantized, state = quantize_model(ctx.config, model, ctx.splits, precision, ctx.seed)
                metrics = _with_memory(evaluate_model(ctx.config, quantized, ctx.splits.test), quantized, state)
                ctx.save(f"{size}-b{precision}", quantized, state)
            rows.append(ctx.row({"model": size, "precision": str(precision)}, metrics, parameters=n_params))
    return rows


def recipe_partition_compare(ctx: SeedContext) -> List[Dict[str, Any]]:
    rows = []
    baseline = _baseline(ctx)
    for strategy in ("magnitude", "random"):
        for bits in ctx.config.sweep.bit_widths:
            model, state = quantize_model(ctx.config, ctx.float_model(), ctx.splits, bits, ctx.seed, strategy)
            metrics = evaluate_model(ctx.config, model, ctx.splits.test)
            rows.append(ctx.row({"strategy": strategy, "bits": bits}, metrics, **baseline))
    return rows


def recipe_memory(ctx: SeedContext) -> List[Dict[str, Any]]:
    rows = []
    for bits in ctx.config.sweep.bit_widths:
        model = new_model(ctx.config, ctx.seed)
        state = quantize_untrained(model, bits, ctx.config.schedule.max_level_override)
        report = packstore.memory_report(packstore.pack_tensors(model, state))
        ctx.save(f"b{bits}", model, state)
        rows.append(ctx.row({"bits": bits}, {"memory_ratio": round(report.reduction_ratio, 4)},
                            whole_model_ratio=round(report.whole_model_ratio, 4),
                            packed_bytes=report.packed_bytes, float_bytes=report.float_bytes))
    return rows


def suggestion_trainer(ctx: SeedContext, quantize_bits: Optional[int]) -> Callable[[List[int]], Ensemble]:
    sugg = ctx.config.suggestion
    train = ctx.splits.train

    def trainer(labeled: List[int]) -> Ensemble:
        subset = train.subset(labeled)
        member_trainer = lambda s: train_float(ctx.config, subset, s, epochs=sugg.member_epochs)  # noqa: E731
        quantizer = None
        if quantize_bits is not None:
            quantizer = make_inq_quantizer((subset.X, subset.Y), inq_schedule(ctx.config.schedule),
                                           ctx.config.optimizer, ctx.config.schedule.strategy,
                                           ctx.config.schedule.max_level_override)
        return train_ensemble(member_trainer, sugg.ensemble_size,
                              seeds=_member_seeds(ctx.seed, sugg.ensemble_size),
                              quantize_bits=quantize_bits, quantizer=quantizer, workers=settings.WORKERS)

    return trainer


def seed_and_pool(n_train: int, seed_set_size: int, seed: int) -> Tuple[List[int], List[int]]:
    """Labeled seed set and unlabeled pool as a seeded split of the training indices."""
    order = np.random.default_rng([seed, 7]).permutation(n_train)
    return sorted(int(i) for i in order[:seed_set_size]), sorted(int(i) for i in order[seed_set_size:])


def recipe_sa_nt(ctx: SeedContext) -> List[Dict[str, Any]]:
    """
    Suggestion schemes against a fixed label budget.

    random / float-SA + float NT give the baselines; per bit width, float-SA +
    quantized NT and quantized-SA + float NT.
    """
    sugg = ctx.config.suggestion
    labeled, pool = seed_and_pool(len(ctx.splits.train), sugg.seed_set_size, ctx.seed)
    budget = sugg.representative_take * sugg.iterations
    train = ctx.splits.train

    def nt_model(indices: List[int]) -> ModelGraph:
        return train_float(ctx.config, train.subset(sorted(labeled + list(indices))), ctx.seed)

    def suggested(bits: Optional[int]) -> List[int]:
        result = suggest_training_set(train.X, labeled, pool, sugg, suggestion_trainer(ctx, bits))
        return result.indices

    rows = []
    random_nt = nt_model(random_training_set(pool, budget, ctx.seed))
    rows.append(ctx.row({"scheme": "random+float-nt", "bits": "float"},
                        evaluate_model(ctx.config, random_nt, ctx.splits.test)))
    float_sa = suggested(None)
    float_nt = nt_model(float_sa)
    rows.append(ctx.row({"scheme": "float-sa+float-nt", "bits": "float"},
                        evaluate_model(ctx.config, float_nt, ctx.splits.test)))

    for bits in ctx.config.sweep.bit_widths:
        splits = DatasetSplits(train=train.subset(sorted(labeled + float_sa)), val=ctx.splits.val,
                               test=ctx.splits.test, n_classes=ctx.splits.n_classes)
        q_nt, state = quantize_model(ctx.config, float_nt, splits, bits, ctx.seed)
        rows.append(ctx.row({"scheme": "float-sa+quantized-nt", "bits": bits},
                            evaluate_model(ctx.config, q_nt, ctx.splits.test)))
        q_sa_nt = nt_model(suggested(bits))
        rows.append(ctx.row({"scheme": "quantized-sa+float-nt", "bits": bits},
                            evaluate_model(ctx.config, q_sa_nt, ctx.splits.test)))
    return rows


RECIPES: Dict[str, Callable[[SeedContext], List[Dict[str, Any]]]] = {
    "bitwidth-sweep": recipe_bitwidth_sweep,
    "parallel-sweep": recipe_parallel_sweep,
    "bitwidth-x-parallel": recipe_bitwidth_x_parallel,
    "small-model": recipe_small_model,
    "sa-nt": recipe_sa_nt,
    "partition-compare": recipe_partition_compare,
    "memory": recipe_memory,
}


# Tables
def _higher_is_better(column: str) -> bool:
    for metric, higher in HIGHER_IS_BETTER.items():
        if column == metric or column.endswith("_" + metric):
            return higher
    return True


def build_table(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """Per-(axis, seed) rows followed by a mean and a best row per axis value."""
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    axes = [c for c in ("scheme", "strategy", "model", "precision", "bits", "parallel", "member_bits")
            if c in frame.columns]
    frame = frame.sort_values(["_order", "seed"], kind="stable").reset_index(drop=True)
    values = [c for c in frame.columns if c not in axes + ["seed", "_order"]]
    summary = []
    for _, group in frame.groupby("_order", sort=True):
        head = {a: group.iloc[0][a] for a in axes}
        mean_row = {**head, "seed": "mean"}
        best_row = {**head, "seed": "best"}
        for column in values:
            series = pd.to_numeric(group[column], errors="coerce")
            mean_row[column] = float(series.mean())
            higher = _higher_is_better(column)
            best_row[column] = float(series.max() if higher else series.min())
        summary += [mean_row, best_row]
    table = pd.concat([frame.drop(columns="_order"), pd.DataFrame(summary)], ignore_index=True)
    return table[axes + ["seed"] + values]


def pivot_table(recipe: str, table: pd.DataFrame, task: str) -> Optional[pd.DataFrame]:
    """Wide view of the mean rows, where a recipe has one."""
    primary = PRIMARY_METRIC[task]
    means = table[table["seed"] == "mean"]
    means = means.astype({c: str for c in ("bits", "parallel", "precision") if c in means.columns})
    if means.empty or primary not in means.columns:
        return None
    if recipe == "small-model":
        out = means.pivot(index="model", columns="precision", values=primary)
        out = out.rename(columns={"4": "4 bit", "8": "8 bit"})
        return out[["float", "4 bit", "8 bit"]].reset_index()
    if recipe == "bitwidth-x-parallel":
        out = means.pivot(index="bits", columns="parallel", values=primary)
        return out.loc[sorted(out.index, key=int), sorted(out.columns, key=int)].reset_index()
    if recipe in ("sa-nt", "partition-compare"):
        key = "scheme" if recipe == "sa-nt" else "strategy"
        return means.pivot(index=key, columns="bits", values=primary).reset_index()
    return None


def write_csv(table: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.4f")
    return path


def metric_records(config: ExperimentConfig, rows: List[Dict[str, Any]]) -> List[MetricRecord]:
    """MetricRecords for every recognized metric cell of the per-seed rows."""
    axis_keys = ("scheme", "strategy", "model", "precision", "bits", "parallel", "member_bits")
    records = []
    for row in rows:
        axes = {k: row[k] for k in axis_keys if k in row}
        for metric in METRIC_COLUMNS:
            if metric in row:
                records.append(MetricRecord(task=config.task, recipe=config.sweep.recipe, axes=axes,
                                            metric=metric, value=float(row[metric]), seed=int(row["seed"])))
    return records


# Store
def _store_run(config: ExperimentConfig, out_dir: Path, records: List[MetricRecord], status: str,
               factory: Optional[sessionmaker]) -> Optional[int]:
    from powquant.db import get_session, init_db
    from powquant.models import ExperimentRun, MetricRow

    try:
        if factory is None:
            init_db()
        else:
            init_db(factory.kw["bind"])
        with get_session(factory) as db:
            run = ExperimentRun(recipe=config.sweep.recipe, task=config.task, model_size=config.model_size,
                                config_yaml=config.to_yaml(), out_dir=str(out_dir), status=status)
            for record in records:
                axis = ",".join(f"{k}={v}" for k, v in record.axes.items())
                run.metrics.append(MetricRow(axis=axis, metric=record.metric, value=record.value, seed=record.seed))
            db.add(run)
            db.flush()
            return run.id
    except Exception as exc:
        # Advisory store: CSVs are already on disk
        logger.warning(f"could not record run in results store: {exc}")
        return None


@dataclass
class ExperimentResult:
    out_dir: Path
    table: pd.DataFrame
    csv_files: List[Path]
    sqw_files: List[Path]
    run_id: Optional[int] = None


def _run_seed(config: ExperimentConfig, seed: int, out_dir: Path) -> Tuple[List[Dict[str, Any]], List[Path]]:
    ctx = SeedContext(config=config, seed=seed, out_dir=out_dir, splits=load_dataset(config, seed))
    rows = RECIPES[config.sweep.recipe](ctx)
    for order, row in enumerate(rows):
        row["_order"] = order
    return rows, ctx.sqw_files


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   session_factory: Optional[sessionmaker] = None, record: bool = True) -> ExperimentResult:
    """
    Run a recipe for every seed and write its tables.

    Seeds run concurrently up to sweep.workers; rows are merged in (axis, seed)
    order. If a seed fails, rows from finished seeds are flushed to
    <recipe>.partial.csv before the error propagates.
    """
    out = Path(out_dir or config.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = attach_jsonl_log(out / "run.jsonl")
    recipe = config.sweep.recipe
    (out / "config.yaml").write_text(config.to_yaml(), encoding="utf-8")
    try:
        logger.info(f"Running {recipe} on {config.task} for seeds {config.sweep.seeds}",
                    extra={"event": "experiment_start", "recipe": recipe, "task": config.task})

        # STEP 1: One job per seed
        with ThreadPoolExecutor(max_workers=config.sweep.workers) as pool:
            futures = [pool.submit(_run_seed, config, seed, out) for seed in config.sweep.seeds]
        rows, sqw_files, error = [], [], None
        for future in futures:
            try:
                seed_rows, seed_files = future.result()
                rows += seed_rows
                sqw_files += seed_files
            except Exception as exc:
                error = error or exc

        # STEP 2: Partial flush on failure
        if error is not None:
            if rows:
                write_csv(build_table(rows), out / f"{recipe}.partial.csv")
            if record:
                _store_run(config, out, metric_records(config, rows), "failed", session_factory)
            logger.error(f"{recipe} failed after {len(rows)} rows: {error}")
            raise error

        # STEP 3: Single-writer merge
        table = build_table(rows)
        csv_files = [write_csv(table, out / f"{recipe}.csv")]
        pivot = pivot_table(recipe, table, config.task)
        if pivot is not None:
            csv_files.append(write_csv(pivot, out / f"{recipe}_table.csv"))

        # STEP 4: Results store
        run_id = None
        if record:
            run_id = _store_run(config, out, metric_records(config, rows), "done", session_factory)
        logger.info(f"{recipe} finished: {len(rows)} rows, {len(sqw_files)} model files",
                    extra={"event": "experiment_done", "recipe": recipe, "rows": len(rows),
                           "csv": [str(p) for p in csv_files]})
        return ExperimentResult(out_dir=out, table=table, csv_files=csv_files, sqw_files=sqw_files, run_id=run_id)
    finally:
        detach_log(handler)


def dump_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, default=str), encoding="utf-8")
    return path
