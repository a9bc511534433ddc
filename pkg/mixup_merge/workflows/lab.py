"""Desk-scale experiments on a pair of networks fine-tuned from a shared start.

A lab instance trains a small network on a shared pretext objective, then
fine-tunes two copies of it on two related regression tasks. The pair is used
to scan the interpolation segment between the two models, to run alpha sweeps
of the random-interpolation merges and to compare them with a fixed midpoint
merge over many seeds. A comparison study scores every baseline with and
without the random interpolation and with and without DARE on one pair.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from mixup_merge.components.config import LabConfig
from mixup_merge.components.manifest import MergeManifest
from mixup_merge.errors import MixupMergeError, PDRUndefinedError
from mixup_merge.methods import average_merge, merge
from mixup_merge.prng import mix_seed
from mixup_merge.recipe import MergeRecipe, RecipeTemplate, SparsifyConfig, iter_grid
from mixup_merge.sampler import SamplingRecord, SweepSchedule, make_sweep
from mixup_merge.tensors import TensorMap, lerp
from mixup_merge.workflows.evaluators import Evaluator, LabEvaluator
from mixup_merge.workflows.toy import TASK_IDS, ToyTasks, init_params, make_tasks, train

__all__ = [
    "PathScan",
    "RobustnessReport",
    "SweepRecord",
    "SweepResult",
    "ToyTaskPair",
    "basin_study",
    "build_toy_pair",
    "compare_methods",
    "compute_pdr",
    "load_pdr_table",
    "run_sweep",
    "scan_path",
    "scan_segment",
]

logger = logging.getLogger(__name__)

PDR_TOLERANCE = 0.02
SCAN_COLUMNS = ["lambda", "loss_task1", "loss_task2", "combined"]
COMPARE_COLUMNS = [
    "method", "m3", "dare", "scaling_term", "retain_ratio", "lambda_m", *TASK_IDS, "avg",
]
# baseline -> its random-interpolation counterpart
COMPARED_METHODS = {
    "average": "m3_average",
    "task_arithmetic": "m3_task_arithmetic",
    "ties": "m3_ties",
}


@dataclass(frozen=True)
class ToyTaskPair:
    """Pretrained network, its two fine-tuned children and the task data."""

    seed: int
    pretrained: TensorMap
    model_t1: TensorMap
    model_t2: TensorMap
    tasks: ToyTasks = field(repr=False)
    config: LabConfig = field(default_factory=LabConfig, repr=False)

    @property
    def evaluator(self) -> LabEvaluator:
        return LabEvaluator(self.seed, self.config, tasks=self.tasks)

    def lineage(self) -> dict:
        """Identities of the three checkpoints and how each was produced."""
        c = self.config
        return {
            "seed": self.seed,
            "pretrained": {
                "identity": self.pretrained.identity,
                "parent": None,
                "objective": "pretext",
                "steps": c.pretext_steps,
            },
            "task1": {
                "identity": self.model_t1.identity,
                "parent": self.pretrained.identity,
                "objective": "task1",
                "steps": c.task1_steps,
            },
            "task2": {
                "identity": self.model_t2.identity,
                "parent": self.pretrained.identity,
                "objective": "task2",
                "steps": c.task2_steps,
            },
            "config": c.model_dump(mode="json"),
        }


def build_toy_pair(seed: int, config: LabConfig | None = None) -> ToyTaskPair:
    """Train the pretrained network and both fine-tuned children for ``seed``.

    Fine-tuning starts from the stored float32 pretrained checkpoint, so both
    children descend from exactly the parameters in ``pretrained``.

    Raises
    ------
    TrainingDivergedError
        If a loss becomes non-finite in any phase.
    """
    c = config or LabConfig()
    tasks = make_tasks(seed, c.n_inputs, c.n_train, c.n_test)
    x = tasks.x_train

    params = init_params(seed, c.n_inputs, c.hidden)
    params = train(
        params, x, tasks.y_train["pretext"], c.pretext_steps, c.learning_rate,
        seed=seed, phase="pretext",
    )
    pretrained = TensorMap(params)
    start = {n: pretrained.as_float64(n) for n in pretrained}

    children = []
    for task, steps in zip(TASK_IDS, (c.task1_steps, c.task2_steps), strict=True):
        fine = train(start, x, tasks.y_train[task], steps, c.learning_rate, seed=seed, phase=task)
        children.append(TensorMap(fine))

    pair = ToyTaskPair(
        seed=seed,
        pretrained=pretrained,
        model_t1=children[0],
        model_t2=children[1],
        tasks=tasks,
        config=c,
    )
    logger.info(f"Built lab pair for seed {seed} ({pretrained.n_parameters} parameters)")
    return pair


@dataclass(frozen=True)
class PathScan:
    """Task losses along ``lam * a + (1 - lam) * b`` for an ascending grid of ``lam``."""

    table: pd.DataFrame

    @property
    def lambdas(self) -> np.ndarray:
        return self.table["lambda"].to_numpy()

    def barrier(self) -> float:
        """Largest combined loss on the segment over the larger endpoint loss.

        A segment whose endpoints both have zero loss has barrier 1 when the
        whole path is at zero loss and infinity otherwise.
        """
        combined = self.table["combined"].to_numpy()
        peak = float(combined.max())
        ends = float(max(combined[0], combined[-1]))
        if ends <= 0.0:
            return 1.0 if peak <= 0.0 else float("inf")
        return peak / ends


def scan_segment(
    a: TensorMap,
    b: TensorMap,
    losses: Callable[[TensorMap], Sequence[float]],
    grid_size: int,
) -> PathScan:
    """Evaluate ``losses`` at ``grid_size`` evenly spaced points from ``b`` (0) to ``a`` (1)."""
    if grid_size < 2:
        raise MixupMergeError(f"A path scan needs at least 2 grid points, got {grid_size}")
    rows = []
    for lam in np.linspace(0.0, 1.0, grid_size):
        l1, l2 = losses(lerp(a, b, float(lam)))
        rows.append((float(lam), l1, l2, 0.5 * (l1 + l2)))
    return PathScan(table=pd.DataFrame(rows, columns=SCAN_COLUMNS))


def scan_path(pair: ToyTaskPair, grid_size: int = 11) -> PathScan:
    """Scan the segment between the two fine-tuned models of ``pair``."""
    ev = pair.evaluator
    scan = scan_segment(
        pair.model_t1,
        pair.model_t2,
        lambda t: [ev.loss(t, task) for task in TASK_IDS],
        grid_size,
    )
    logger.debug(f"seed {pair.seed}: barrier {scan.barrier():.4f}")
    return scan


@dataclass(frozen=True)
class SweepRecord:
    sampling: SamplingRecord
    digest: str
    scores: dict[str, float]
    avg: float | None
    error: str | None = None
    checkpoint: TensorMap | None = field(default=None, repr=False, compare=False)
    manifest: MergeManifest | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "alpha": self.sampling.alpha,
            "seed": self.sampling.seed,
            "lambda_m": self.sampling.lambda_m,
            "digest": self.digest,
            "scores": self.scores,
            "avg": self.avg,
            "error": self.error,
        }


@dataclass(frozen=True)
class SweepResult:
    """One record per alpha of the schedule and the index of the best average."""

    records: list[SweepRecord]
    task_ids: tuple[str, ...]
    method: str
    evaluator: str

    @property
    def selected(self) -> int | None:
        candidates = [(i, r) for i, r in enumerate(self.records) if r.ok]
        if not candidates:
            return None
        # highest average first, then the smaller alpha
        return min(candidates, key=lambda ir: (-ir[1].avg, ir[1].sampling.alpha, ir[0]))[0]

    @property
    def best(self) -> SweepRecord | None:
        i = self.selected
        return None if i is None else self.records[i]

    @property
    def table_columns(self) -> list[str]:
        return ["alpha", "lambda_m", *self.task_ids, "avg"]

    def to_table(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"alpha": r.sampling.alpha, "lambda_m": r.sampling.lambda_m}
            row.update({t: r.scores.get(t, np.nan) for t in self.task_ids})
            row["avg"] = np.nan if r.avg is None else r.avg
            rows.append(row)
        return pd.DataFrame(rows, columns=self.table_columns)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "evaluator": self.evaluator,
            "task_ids": list(self.task_ids),
            "selected": self.selected,
            "records": [r.to_dict() for r in self.records],
        }


def run_sweep(
    pair: ToyTaskPair | Sequence[TensorMap],
    schedule: SweepSchedule | None = None,
    template: RecipeTemplate | None = None,
    evaluator: Evaluator | None = None,
    base: TensorMap | None = None,
) -> SweepResult:
    """Merge once per alpha of ``schedule`` and score every merge on each task.

    Parameters
    ----------
    pair : ToyTaskPair or sequence of two TensorMap
        The models to merge. A lab pair also supplies the base and the default
        evaluator.
    schedule : SweepSchedule, optional
        Alphas and base seed, the seven default alphas when omitted.
    template : RecipeTemplate, optional
        M3 recipe without a coefficient, ``m3_average`` when omitted.
    evaluator : Evaluator, optional
        Scores a checkpoint per task.
    base : TensorMap, optional
        Pretrained checkpoint for the offset-space templates.

    Returns
    -------
    SweepResult
        A failed evaluation is recorded with its error and the sweep goes on.
    """
    schedule = schedule or SweepSchedule()
    template = template or RecipeTemplate()
    if isinstance(pair, ToyTaskPair):
        models = (pair.model_t1, pair.model_t2)
        base = base or pair.pretrained
        evaluator = evaluator or pair.evaluator
    else:
        models = tuple(pair)
    if evaluator is None:
        raise MixupMergeError("A sweep over plain checkpoints needs an evaluator")

    records = []
    for sampling in make_sweep(schedule):
        recipe = template.instantiate(sampling)
        merged, manifest = merge(recipe, base if recipe.needs_base else None, models)
        scores: dict[str, float] = {}
        error = None
        try:
            for task in evaluator.task_ids:
                scores[task] = float(evaluator.score(merged, task))
        except MixupMergeError as e:
            error = str(e)
            logger.warning(f"alpha={sampling.alpha:g}: evaluation failed: {e}")
        avg = float(np.mean([scores[t] for t in evaluator.task_ids])) if error is None else None
        records.append(
            SweepRecord(
                sampling=sampling,
                digest=manifest.output.digest,
                scores=scores,
                avg=avg,
                error=error,
                checkpoint=merged,
                manifest=manifest,
            )
        )
        if avg is not None:
            logger.info(
                f"alpha={sampling.alpha:g} lambda_m={sampling.lambda_m:.4f} avg={avg:.3f}"
            )
    return SweepResult(
        records=records,
        task_ids=tuple(evaluator.task_ids),
        method=template.method,
        evaluator=evaluator.spec,
    )


def basin_study(
    seeds: Sequence[int],
    config: LabConfig | None = None,
    schedule: SweepSchedule | None = None,
    grid_size: int = 11,
) -> tuple[pd.DataFrame, dict[str, float]]:
    """Barrier and sweep-versus-midpoint comparison over many lab seeds.

    Returns
    -------
    tuple of (pandas.DataFrame, dict)
        One row per seed with columns ``seed, barrier, best_alpha,
        best_lambda, best_avg, fixed_avg, win`` and a summary with the median
        barrier and the fraction of seeds where the sweep's best average is at
        least the fixed midpoint merge's average.
    """
    schedule = schedule or SweepSchedule()
    rows = []
    for seed in seeds:
        pair = build_toy_pair(seed, config)
        scan = scan_path(pair, grid_size)
        seed_schedule = SweepSchedule(
            alphas=schedule.alphas, base_seed=mix_seed(schedule.base_seed, seed)
        )
        sweep = run_sweep(pair, seed_schedule)
        best = sweep.best
        if best is None:
            raise MixupMergeError(f"Every evaluation of the sweep failed for seed {seed}")
        ev = pair.evaluator
        fixed = average_merge(pair.model_t1, pair.model_t2)
        fixed_avg = float(np.mean([ev.score(fixed, t) for t in TASK_IDS]))
        rows.append(
            {
                "seed": seed,
                "barrier": scan.barrier(),
                "best_alpha": best.sampling.alpha,
                "best_lambda": best.sampling.lambda_m,
                "best_avg": best.avg,
                "fixed_avg": fixed_avg,
                "win": bool(best.avg >= fixed_avg),
            }
        )
    df = pd.DataFrame(rows)
    summary = {
        "n_seeds": float(len(df)),
        "median_barrier": float(df["barrier"].median()),
        "max_barrier": float(df["barrier"].max()),
        "win_fraction": float(df["win"].mean()),
        "mean_gain": float((df["best_avg"] - df["fixed_avg"]).mean()),
    }
    logger.info(
        f"Basin study over {len(df)} seeds: median barrier {summary['median_barrier']:.4f}, "
        f"sweep wins {summary['win_fraction']:.0%}"
    )
    return df, summary


def _score(evaluator: Evaluator, checkpoint: TensorMap) -> tuple[dict[str, float], float]:
    scores = {t: float(evaluator.score(checkpoint, t)) for t in evaluator.task_ids}
    return scores, float(np.mean(list(scores.values())))


def _best_baseline(
    pair: ToyTaskPair, method: str, dare: SparsifyConfig | None
) -> tuple[MergeRecipe, dict[str, float], float]:
    """Best recipe of the search grid of ``method``; the first one wins a tie."""
    if method == "average":
        candidates = [MergeRecipe(method="average", dare=dare)]
    else:
        candidates = list(iter_grid(method, dare))
    best = None
    for recipe in candidates:
        base = pair.pretrained if recipe.needs_base else None
        merged, _ = merge(recipe, base, [pair.model_t1, pair.model_t2])
        scores, avg = _score(pair.evaluator, merged)
        if best is None or avg > best[2]:
            best = (recipe, scores, avg)
    return best


def compare_methods(
    pair: ToyTaskPair,
    schedule: SweepSchedule | None = None,
    drop_rate: float = 0.2,
    dare_seed: int = 0,
) -> pd.DataFrame:
    """Score Average, Task Arithmetic and TIES with and without M3 and DARE.

    A baseline with hyperparameters keeps the best recipe of its search grid.
    Its M3 counterpart reuses those hyperparameters, replaces the fixed
    combination by a random interpolation and keeps the best record of an
    alpha sweep. Every variant is run once without and once with DARE.

    Parameters
    ----------
    pair : ToyTaskPair
        Lab pair, which also supplies the evaluator.
    schedule : SweepSchedule, optional
        Alphas and base seed of the M3 sweeps, the seven default alphas when omitted.
    drop_rate : float
        DARE drop rate of the sparsified variants.
    dare_seed : int
        Seed of the DARE masks.

    Returns
    -------
    pandas.DataFrame
        One row per method, M3 switch and DARE switch, with columns
        :data:`COMPARE_COLUMNS`. ``lambda_m`` is empty for the baselines.
    """
    schedule = schedule or SweepSchedule()
    rows = []
    for dare in (None, SparsifyConfig(drop_rate=drop_rate, seed=dare_seed)):
        for method, m3_method in COMPARED_METHODS.items():
            recipe, scores, avg = _best_baseline(pair, method, dare)
            rows.append(
                {
                    "method": method,
                    "m3": False,
                    "dare": dare is not None,
                    "scaling_term": recipe.scaling_term,
                    "retain_ratio": recipe.retain_ratio,
                    "lambda_m": None,
                    **scores,
                    "avg": avg,
                }
            )
            template = RecipeTemplate(
                method=m3_method,
                scaling_term=recipe.scaling_term if m3_method == "m3_ties" else None,
                retain_ratio=recipe.retain_ratio,
                dare=dare,
            )
            best = run_sweep(pair, schedule, template).best
            if best is None:
                raise MixupMergeError(f"Every evaluation of the {m3_method} sweep failed")
            rows.append(
                {
                    "method": method,
                    "m3": True,
                    "dare": dare is not None,
                    "scaling_term": template.scaling_term,
                    "retain_ratio": template.retain_ratio,
                    "lambda_m": best.sampling.lambda_m,
                    **best.scores,
                    "avg": best.avg,
                }
            )
            logger.info(
                f"{method} dare={dare is not None}: {avg:.3f} fixed, {best.avg:.3f} with M3"
            )
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)


@dataclass(frozen=True)
class RobustnessReport:
    """Performance drop under attack, all values in percent."""

    metric_no_attack: float
    metric_attack: float
    pdr: float


def compute_pdr(metric_no_attack: float, metric_attack: float) -> RobustnessReport:
    """Performance drop rate ``(no_attack - attack) / no_attack`` as a percentage."""
    if metric_no_attack <= 0:
        raise PDRUndefinedError(
            f"PDR is undefined for a metric without attack of {metric_no_attack}"
        )
    if metric_attack < 0:
        raise MixupMergeError(f"Metric under attack must be non-negative, got {metric_attack}")
    pdr = 100.0 * (metric_no_attack - metric_attack) / metric_no_attack
    return RobustnessReport(
        metric_no_attack=float(metric_no_attack),
        metric_attack=float(metric_attack),
        pdr=pdr,
    )


def load_pdr_table(path: str | Path) -> pd.DataFrame:
    """Read a CSV of metrics with and without attack and recompute every PDR.

    Adds ``pdr_recomputed`` and, when a printed ``pdr`` column exists,
    ``deviation``. Rows deviating by more than 0.02 points without a ``note``
    are logged as warnings.
    """
    df = pd.read_csv(path, keep_default_na=False, na_values=[""])
    required = ["metric_no_attack", "metric_attack"]
    if not all(col in df.columns for col in required):
        raise MixupMergeError(
            f"PDR table {path} needs the columns {required}, found {df.columns.tolist()}"
        )
    df["pdr_recomputed"] = [
        compute_pdr(n, a).pdr for n, a in zip(df["metric_no_attack"], df["metric_attack"])
    ]
    if "pdr" in df.columns:
        df["deviation"] = (df["pdr_recomputed"] - df["pdr"]).abs()
        if "note" in df.columns:
            noted = df["note"].notna()
        else:
            noted = pd.Series(False, index=df.index)
        for _, row in df[(df["deviation"] > PDR_TOLERANCE) & ~noted].iterrows():
            logger.warning(
                f"Printed PDR {row['pdr']} differs from recomputed {row['pdr_recomputed']:.4f}"
            )
    return df
