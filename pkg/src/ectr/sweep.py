"""Hyperparameter sweeps over beta, step sizes and seeds."""

from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Optional, Tuple

import anyio
import anyio.to_thread
import numpy as np

from .config import config
from .data import Dataset
from .errors import ConfigError
from .logutil import logger
from .models import RunConfig, RunReport, SweepAggregate, SweepRow, TrainConfig
from .trainer import train


@dataclass(frozen=True)
class SweepTask:
    point: int
    params: Dict[str, float]
    seed: int
    train_config: TrainConfig


def expand_grid(run: RunConfig) -> List[SweepTask]:
    """Cartesian product of the non-empty axes, crossed with the seed list."""
    axes = run.sweep.axes()
    if not axes and not run.sweep.seed:
        raise ConfigError("sweep grid is empty: set at least one of sweep.beta, sweep.lr_*, sweep.seed")
    seeds = run.sweep.seed or [run.train.seed]
    names = list(axes)

    tasks = []
    for point, values in enumerate(product(*(axes[n] for n in names))):
        params = {n: float(v) for n, v in zip(names, values)}
        for seed in seeds:
            cfg = run.train.model_copy(update={**params, "seed": seed})
            tasks.append(SweepTask(point=point, params=params, seed=seed, train_config=cfg))
    return tasks


class _RowSink:
    """Serialized collector for results arriving from worker threads."""

    def __init__(self):
        self._lock = anyio.Lock()
        self.rows: List[SweepRow] = []

    async def put(self, row: SweepRow) -> None:
        async with self._lock:
            self.rows.append(row)


def _row(task: SweepTask, report: RunReport) -> SweepRow:
    final = report.final_train
    return SweepRow(
        point=task.point,
        params=task.params,
        seed=task.seed,
        mean=report.mean,
        worst=report.worst,
        final_kl_env=final.kl_env if final else 0.0,
        final_p_tv=final.p_tv if final else 0.0,
    )


async def _run_all(tasks: List[SweepTask], dataset: Dataset, jobs: int) -> List[SweepRow]:
    limiter = anyio.CapacityLimiter(jobs)
    sink = _RowSink()

    async def run_one(task: SweepTask) -> None:
        report = await anyio.to_thread.run_sync(train, dataset, task.train_config, limiter=limiter)
        await sink.put(_row(task, report))
        logger.info("sweep point %d seed %d: mean %.4f worst %.4f", task.point, task.seed, report.mean, report.worst)

    async with anyio.create_task_group() as tg:
        for task in tasks:
            tg.start_soon(run_one, task)
    return sorted(sink.rows, key=lambda r: (r.point, r.seed))


def aggregate(rows: List[SweepRow]) -> List[SweepAggregate]:
    """Mean and population std over seeds per grid point."""
    by_point: Dict[int, List[SweepRow]] = {}
    for r in rows:
        by_point.setdefault(r.point, []).append(r)

    out = []
    for point in sorted(by_point):
        group = by_point[point]
        means = np.array([r.mean for r in group])
        worsts = np.array([r.worst for r in group])
        out.append(
            SweepAggregate(
                point=point,
                params=group[0].params,
                n_seeds=len(group),
                mean_mean=float(means.mean()),
                mean_std=float(means.std()),
                worst_mean=float(worsts.mean()),
                worst_std=float(worsts.std()),
                final_kl_env_mean=float(np.mean([r.final_kl_env for r in group])),
            )
        )
    return out


def run_sweep(
    run: RunConfig,
    dataset: Dataset,
    jobs: Optional[int] = None,
    cap: Optional[int] = None,
) -> Tuple[List[SweepRow], List[SweepAggregate]]:
    """Train every (grid point, seed) with at most ``jobs`` runs in flight."""
    tasks = expand_grid(run)
    limit = cap or run.sweep.max_runs or config.sweep_cap
    if len(tasks) > limit:
        raise ConfigError(f"sweep grid has {len(tasks)} runs, above the cap of {limit}")

    workers = jobs or config.jobs
    logger.info("sweeping %d runs with %d workers", len(tasks), workers)
    rows = anyio.run(_run_all, tasks, dataset, workers)
    return rows, aggregate(rows)
