"""Path validation and premise studies: rolling averages, segment-interpolation
continuity checks, per-point metric tables, and multi-seed variance studies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .llpf_core import PathRecord
from .nn_engine.engine import NormState, init_params
from .nn_engine.graph import ModelGraph
from .nn_engine.trainer import (
    Dataset,
    StopRule,
    TrainerConfig,
    evaluate,
    fixed_subset,
    train_until,
)
from .param_space import ParamVector, l2_distance, layer_stats, radial_norm_sq

log = logging.getLogger(__name__)


def rolling_average(series: Sequence[float], window: int) -> list[float]:
    """Windowed mean where the warm-up uses the available prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        return []
    csum = np.concatenate(([0.0], np.cumsum(values)))
    out = []
    for i in range(values.size):
        lo = max(0, i - window + 1)
        out.append(float((csum[i + 1] - csum[lo]) / (i + 1 - lo)))
    return out


@dataclass
class ContinuityReport:
    segment_losses: list[list[float]]
    segment_bounds: list[tuple[int, int]]
    samples: int

    @property
    def segment_max_loss(self) -> list[float]:
        return [max(losses) for losses in self.segment_losses]

    @property
    def global_max_loss(self) -> float:
        return max(self.segment_max_loss)


def interpolation_continuity(
    path: PathRecord,
    samples: int,
    graph: ModelGraph,
    data: Dataset,
    eval_size: int = 2048,
    eval_seed: int = 1,
    use_full_set: bool = False,
    norm_state: NormState | None = None,
) -> ContinuityReport:
    """Training loss along straight lines between consecutive stored points.

    Every alpha is evaluated on one fixed, seeded subset of the training set
    so segment curves are comparable and the check is deterministic.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    stored = path.stored_points()
    if len(stored) < 2:
        raise ValueError("need at least two stored full-parameter points")
    subset = data if use_full_set else fixed_subset(data, eval_size, eval_seed)
    alphas = np.linspace(0.0, 1.0, samples)
    seg_losses = []
    bounds = []
    for a, b in zip(stored, stored[1:]):
        pa = a.params.data.astype(np.float64)
        pb = b.params.data.astype(np.float64)
        losses = []
        for alpha in alphas:
            blend = ((1.0 - alpha) * pa + alpha * pb).astype(a.params.dtype)
            params = ParamVector(blend, a.params.layout)
            loss, _ = evaluate(graph, params, subset, norm_state)
            losses.append(loss)
        seg_losses.append(losses)
        bounds.append((a.iteration, b.iteration))
    return ContinuityReport(seg_losses, bounds, samples)


def path_metrics(
    path: PathRecord,
    destination: ParamVector | str = "origin",
    graph: ModelGraph | None = None,
    test_data: Dataset | None = None,
    recompute: bool = False,
) -> list[dict[str, float]]:
    """One row per path point: iteration, phase, rolling train loss, per-layer
    distance to the destination (per-layer norm when it is the origin), test
    loss and accuracy.

    Rows come from the recorded point metrics; with ``recompute=True`` the
    distance and test columns are recomputed from stored checkpoints instead,
    which is the cross-check oracle (points without checkpoints are skipped).
    """
    rows = []
    for p in path.points:
        if recompute:
            if p.params is None:
                continue
            if isinstance(destination, str):
                dists = {
                    name: float(np.sqrt(radial_norm_sq(p.params.get(name))))
                    for name in p.per_layer_dist
                }
            else:
                dists = l2_distance(p.params, destination, list(p.per_layer_dist))
            if test_data is not None and graph is not None:
                t_loss, t_acc = evaluate(graph, p.params, test_data)
            else:
                t_loss, t_acc = p.test_loss, p.test_acc
        else:
            dists = dict(p.per_layer_dist)
            t_loss, t_acc = p.test_loss, p.test_acc
        row: dict[str, float] = {
            "iteration": p.iteration,
            "phase": p.phase,
            "rolling_train_loss": p.rolling_train_loss,
        }
        for name in sorted(dists):
            row[f"dist:{name}"] = dists[name]
        row["test_loss"] = t_loss
        row["test_acc"] = t_acc
        rows.append(row)
    return rows


@dataclass
class SeedStudyTable:
    """Per-layer (seed, variance, mean) tuples plus the spread summary.

    The summary covers weight slices only; bias and normalization slices are
    tabulated but excluded from the variance-consistency reasoning.
    """

    per_layer: dict[str, list[tuple[int, float, float]]]
    summary: dict[str, dict[str, float]]
    failed_seeds: list[int] = field(default_factory=list)


def seed_variance_study(
    graph: ModelGraph,
    trainer: TrainerConfig,
    n_seeds: int,
    data: Dataset,
    rule: StopRule | None = None,
    seeds: Sequence[int] | None = None,
    acceptance_loss: float | None = None,
    eval_size: int = 2048,
    augment: bool = True,
) -> SeedStudyTable:
    """Train modes from independent seeds and tabulate per-layer statistics.

    ``rule=None`` (or ``max_rounds`` absent) skips training and studies the
    initialization itself.  Seeds whose final loss misses the acceptance bar
    are excluded from the table and reported in ``failed_seeds``.
    """
    if seeds is None:
        seeds = list(range(n_seeds))
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    per_layer: dict[str, list[tuple[int, float, float]]] = {
        name: [] for name in graph.slice_names()
    }
    failed = []
    for seed in seeds:
        params = init_params(graph, seed)
        if rule is not None:
            rng = np.random.default_rng(seed)
            result = train_until(graph, params, data, trainer, rule, rng, augment=augment)
            params = result.params
            if acceptance_loss is not None:
                subset = fixed_subset(data, eval_size)
                loss, _ = evaluate(graph, params, subset)
                if loss >= acceptance_loss:
                    log.warning("seed %d failed mode acceptance (loss %.4g)", seed, loss)
                    failed.append(seed)
                    continue
        for name in graph.slice_names():
            stats = layer_stats(params.get(name))
            per_layer[name].append((seed, stats.variance, stats.mean))

    kinds = {info.name: info.kind for info in graph.layout}
    summary = {}
    for name, rows in per_layer.items():
        if kinds[name] != "weight" or not rows:
            continue
        variances = np.array([r[1] for r in rows])
        means = np.array([r[2] for r in rows])
        cov = float(variances.std() / variances.mean()) if variances.mean() > 0 else float("inf")
        ratios = np.abs(means) / np.sqrt(variances)
        summary[name] = {
            "variance_cov": cov,
            "max_abs_mean_over_std": float(ratios.max()),
        }
    return SeedStudyTable(per_layer=per_layer, summary=summary, failed_seeds=failed)


def aggregate_records(
    records: Sequence[PathRecord], metric: str = "rolling_train_loss"
) -> list[dict[str, float]]:
    """Mean and standard deviation of one metric across repeated runs, keyed
    by iteration index (the shaded-band post-processing step)."""
    by_iter: dict[int, list[float]] = {}
    for record in records:
        for p in record.points:
            by_iter.setdefault(p.iteration, []).append(getattr(p, metric))
    rows = []
    for iteration in sorted(by_iter):
        values = np.asarray(by_iter[iteration], dtype=np.float64)
        rows.append(
            {
                "iteration": iteration,
                "mean": float(values.mean()),
                "std": float(values.std()),
                "count": len(values),
            }
        )
    return rows
