"""Low-loss path search between trained modes.

Two drivers live here.  The model-to-model search walks one mode toward
another along their shared per-layer variance spheres: move a little, project
back onto the sphere, retrain briefly, project again.  The model-to-origin
search walks a mode radially inward across shrinking spheres, rescaling each
layer's learning rate so update angles stay comparable as the radius drops;
it never applies variance correction and never touches normalization
parameters.  Their composition connects modes that sit on different spheres.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .nn_engine.engine import NormState
from .nn_engine.graph import ModelGraph
from .nn_engine.trainer import (
    Dataset,
    StopRule,
    TrainerConfig,
    evaluate,
    fixed_subset,
    train_until,
)
from .param_space import (
    EPS_VAR,
    ParamVector,
    VarianceTarget,
    arc_length,
    l2_distance,
    layer_stats,
    variance_correction,
)

log = logging.getLogger(__name__)


class PrerequisiteError(RuntimeError):
    """A path search was started from modes that violate its preconditions."""


@dataclass(frozen=True)
class StepParams:
    """Per-iteration move distance: ``step_a * |to dest| + step_c * arc + step_f``."""

    step_a: float = 0.0
    step_c: float = 0.0
    step_f: float = 0.0

    def __post_init__(self):
        if min(self.step_a, self.step_c, self.step_f) < 0:
            raise ValueError("step coefficients must be non-negative")
        if self.step_a == 0 and self.step_c == 0 and self.step_f == 0:
            raise ValueError("at least one step coefficient must be positive")


@dataclass(frozen=True)
class Phase:
    active_layers: tuple[str, ...]
    iterations: int
    step: StepParams
    stop: StopRule


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a plan needs at least one phase")

    def validate_against(self, graph: ModelGraph) -> None:
        all_slices = set(graph.slice_names())
        for i, phase in enumerate(self.phases):
            unknown = set(phase.active_layers) - all_slices
            if unknown:
                raise ValueError(f"phase {i + 1} names unknown layers {sorted(unknown)}")
        if set(self.phases[-1].active_layers) != all_slices:
            raise ValueError("final phase must cover all trainable layers")


@dataclass
class PathPoint:
    iteration: int
    phase: int
    rolling_train_loss: float
    per_layer_dist: dict[str, float]
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    params: ParamVector | None = None
    train_exhausted: bool = False


@dataclass
class PathRecord:
    points: list[PathPoint]
    config_hash: str = ""
    endpoints: tuple[str, str] = ("start", "dest")
    stage_boundary: int | None = None

    def __post_init__(self):
        if not self.points:
            raise ValueError("a path record cannot be empty")
        iters = [p.iteration for p in self.points]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("path iterations must be strictly increasing")

    def stored_points(self) -> list[PathPoint]:
        return [p for p in self.points if p.params is not None]


@dataclass(frozen=True)
class SearchSettings:
    """Bookkeeping shared by both drivers."""

    seed: int = 0
    checkpoint_stride: int = 10
    eval_subset: int = 2048
    eval_seed: int = 1
    variance_ratio_bound: float = 1.5
    mode_acceptance_loss: float | None = None
    record_test_metrics: bool = True
    augment_path_steps: bool = False
    config_hash: str = ""
    endpoint_ids: tuple[str, str] = ("start", "dest")


@dataclass(frozen=True)
class M2OConfig:
    iterations: int
    step: StepParams
    stop: StopRule
    eta_base: float
    excluded_kinds: tuple[str, ...] = ("norm_scale", "norm_shift")
    excluded_layers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.eta_base <= 0:
            raise ValueError("eta_base must be positive")


# -- elementary steps ---------------------------------------------------------


def move_toward(
    current: ParamVector,
    dest: ParamVector,
    arc0: Mapping[str, float] | None,
    step: StepParams,
    active_layers: Iterable[str],
) -> ParamVector:
    """Move each active layer a bounded distance straight toward the
    destination; the step never overshoots, and inactive layers are copied
    unchanged.  ``arc0`` supplies the per-layer arc anchor captured at phase
    start (required only when ``step_c`` is nonzero)."""
    current.require_compatible(dest)
    if step.step_c > 0 and arc0 is None:
        raise ValueError("step_c > 0 requires per-layer arc anchors")
    updates = {}
    for name in active_layers:
        a = current.get(name).astype(np.float64)
        b = dest.get(name).astype(np.float64)
        gap = b - a
        dist = float(np.linalg.norm(gap))
        if dist == 0.0:
            continue
        s = step.step_a * dist + step.step_f
        if step.step_c > 0:
            s += step.step_c * arc0.get(name, 0.0)
        moved = a + (min(s, dist) / dist) * gap
        updates[name] = moved.astype(current.dtype)
    if not updates:
        return ParamVector(current.copy_data(), current.layout)
    return current.with_slices(updates)


def angle_conformal(
    n_params: ParamVector,
    v_base: Mapping[str, float],
    eta_base: float,
    excluded: Iterable[str] = (),
) -> dict[str, float]:
    """Per-layer learning rates scaled by the current-to-base variance ratio,
    so update angles stay comparable as a layer's sphere shrinks.  Excluded
    layers get a zero rate and are therefore never trained."""
    excluded = set(excluded)
    rates = {}
    for info in n_params.layout:
        name = info.name
        if name in excluded:
            rates[name] = 0.0
            continue
        if name not in v_base:
            raise KeyError(f"missing base variance for layer {name!r}")
        base = v_base[name]
        if base <= 0:
            raise ValueError(f"base variance must be positive for layer {name!r}")
        current = layer_stats(n_params.get(name)).variance
        rates[name] = eta_base * current / base
    return rates


def _capture_targets(params: ParamVector, source_id: str) -> VarianceTarget:
    targets = {info.name: layer_stats(params.get(info.name)).variance for info in params.layout}
    return VarianceTarget(targets=targets, captured_from=source_id)


def correctable_layers(params: ParamVector, targets: VarianceTarget) -> tuple[str, ...]:
    """Weight slices whose captured target variance is meaningfully positive.
    Bias and normalization slices move but are never variance-corrected."""
    return tuple(
        info.name
        for info in params.layout
        if info.kind == "weight" and targets[info.name] > EPS_VAR
    )


def _correct(params: ParamVector, names: Iterable[str], targets: VarianceTarget) -> ParamVector:
    updates = {
        name: variance_correction(params.get(name), targets[name]) for name in names
    }
    if not updates:
        return params
    return params.with_slices(updates)


def _acceptance_loss(
    graph: ModelGraph,
    params: ParamVector,
    data: Dataset,
    settings: SearchSettings,
    norm_state: NormState | None,
) -> float:
    subset = fixed_subset(data, settings.eval_subset, settings.eval_seed)
    loss, _ = evaluate(graph, params, subset, norm_state)
    return loss


def _check_mode_acceptance(
    graph, params, data, settings, threshold, label, norm_state=None
) -> float:
    loss = _acceptance_loss(graph, params, data, settings, norm_state)
    if threshold is not None and threshold > 0 and loss >= threshold:
        raise PrerequisiteError(
            f"{label} mode fails low-loss acceptance: loss {loss:.4g} >= {threshold:.4g}"
        )
    return loss


def _path_trainer(trainer: TrainerConfig) -> TrainerConfig:
    # path-step training always runs without momentum or weight decay
    return replace(trainer, momentum=0.0, weight_decay=0.0)


def _maybe_eval(graph, params, test_data, settings, norm_state):
    if test_data is None or not settings.record_test_metrics:
        return float("nan"), float("nan")
    return evaluate(graph, params, test_data, norm_state)


def _store_params(i: int, total: int, stride: int) -> bool:
    return i % stride == 0 or i == total


# -- model-to-model search ------------------------------------------------------


def llpf_m2m(
    start: ParamVector,
    dest: ParamVector,
    plan: PhasePlan,
    trainer: TrainerConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    *,
    graph: ModelGraph,
    settings: SearchSettings = SearchSettings(),
    norm_state: NormState | None = None,
) -> PathRecord:
    """Walk ``start`` toward ``dest`` along their shared variance spheres.

    Each iteration moves the active layers a small absolute distance toward
    the destination, projects them back onto the start mode's captured
    per-layer variance spheres, retrains briefly, and projects again.  Both
    endpoints must already be low-loss modes whose correctable layers sit on
    nearby spheres.
    """
    start.require_compatible(dest)
    plan.validate_against(graph)
    rng = np.random.default_rng(settings.seed)
    trainer = _path_trainer(trainer)

    targets = _capture_targets(start, settings.endpoint_ids[0])
    correctable = correctable_layers(start, targets)

    bound = settings.variance_ratio_bound
    if bound <= 1:
        raise ValueError("variance_ratio_bound must exceed 1")
    dest_stats = {name: layer_stats(dest.get(name)).variance for name in correctable}
    for name in correctable:
        if dest_stats[name] <= EPS_VAR:
            continue
        ratio = targets[name] / dest_stats[name]
        if not (1.0 / bound <= ratio <= bound):
            raise PrerequisiteError(
                f"modes on distant variance spheres (layer {name!r} ratio {ratio:.3g});"
                " use connect_cross_variance"
            )

    acceptance = settings.mode_acceptance_loss
    if acceptance is None:
        acceptance = plan.phases[0].stop.loss_threshold
    if acceptance <= 0:
        log.warning("no positive mode-acceptance threshold; skipping the check")
    start_loss = _check_mode_acceptance(
        graph, start, train_data, settings, acceptance, "start", norm_state
    )
    _check_mode_acceptance(graph, dest, train_data, settings, acceptance, "dest", norm_state)

    total_iters = sum(p.iterations for p in plan.phases)
    all_layers = graph.slice_names()
    t_loss, t_acc = _maybe_eval(graph, start, test_data, settings, norm_state)
    points = [
        PathPoint(
            iteration=0,
            phase=0,
            rolling_train_loss=start_loss,
            per_layer_dist=l2_distance(start, dest, all_layers),
            test_loss=t_loss,
            test_acc=t_acc,
            params=start,
        )
    ]

    current = start
    iteration = 0
    for phase_idx, phase in enumerate(plan.phases):
        arc0 = None
        if phase.step.step_c > 0:
            arc0 = _phase_arcs(current, dest, phase.active_layers)
        for _ in range(phase.iterations):
            iteration += 1
            moved = move_toward(current, dest, arc0, phase.step, phase.active_layers)
            active_correctable = [n for n in phase.active_layers if n in correctable]
            corrected = _correct(moved, active_correctable, targets)
            result = train_until(
                graph, corrected, train_data, trainer, phase.stop, rng,
                norm_state=norm_state, augment=settings.augment_path_steps,
            )
            current = _correct(result.params, active_correctable, targets)
            exhausted = phase.stop.loss_threshold > 0 and not result.hit_threshold
            t_loss, t_acc = _maybe_eval(graph, current, test_data, settings, norm_state)
            points.append(
                PathPoint(
                    iteration=iteration,
                    phase=phase_idx,
                    rolling_train_loss=result.rolling_loss,
                    per_layer_dist=l2_distance(current, dest, all_layers),
                    test_loss=t_loss,
                    test_acc=t_acc,
                    params=current if _store_params(iteration, total_iters, settings.checkpoint_stride) else None,
                    train_exhausted=exhausted,
                )
            )
    return PathRecord(
        points=points,
        config_hash=settings.config_hash,
        endpoints=settings.endpoint_ids,
    )


def _phase_arcs(current, dest, active_layers):
    arcs = {}
    for name in active_layers:
        a = current.get(name)
        b = dest.get(name)
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            arcs[name] = 0.0  # arc undefined at the center; contributes nothing
        else:
            arcs[name] = arc_length(a, b)
    return arcs


# -- model-to-origin search ------------------------------------------------------


def llpf_m2o(
    start: ParamVector,
    cfg: M2OConfig,
    trainer: TrainerConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    *,
    graph: ModelGraph,
    settings: SearchSettings = SearchSettings(),
    norm_state: NormState | None = None,
    destination: ParamVector | None = None,
    var_stop: tuple[VarianceTarget, float] | None = None,
) -> PathRecord:
    """Walk a mode inward across shrinking variance spheres.

    The destination defaults to the origin restricted to the non-excluded
    layers.  There is no variance correction; instead each layer's learning
    rate is rescaled by its current-to-start variance ratio, so excluded
    layers (all normalization parameters by default) stay bit-identical.
    ``var_stop`` optionally ends the walk once every correctable layer's
    variance is within a factor of the given targets (used by the
    cross-sphere connection).
    """
    rng = np.random.default_rng(settings.seed)
    trainer = _path_trainer(trainer)

    excluded = set(cfg.excluded_layers)
    excluded.update(
        info.name for info in start.layout if info.kind in cfg.excluded_kinds
    )
    active = tuple(n for n in graph.slice_names() if n not in excluded)
    if not active:
        raise ValueError("every layer is excluded; nothing to move")

    v_base = {name: layer_stats(start.get(name)).variance for name in active}
    for name, v in v_base.items():
        if v <= 0:
            raise ValueError(f"base variance must be positive for layer {name!r}")

    acceptance = settings.mode_acceptance_loss
    if acceptance is None:
        acceptance = cfg.stop.loss_threshold
    start_loss = _check_mode_acceptance(
        graph, start, train_data, settings, acceptance, "start", norm_state
    )

    if destination is None:
        dest = start.with_slices({n: np.zeros(start.info(n).length) for n in active})
        arc0 = {n: float(np.linalg.norm(start.get(n).astype(np.float64))) for n in active}
    else:
        start.require_compatible(destination)
        dest = destination
        arc0 = _phase_arcs(start, dest, active) if cfg.step.step_c > 0 else None

    t_loss, t_acc = _maybe_eval(graph, start, test_data, settings, norm_state)
    points = [
        PathPoint(
            iteration=0,
            phase=0,
            rolling_train_loss=start_loss,
            per_layer_dist=l2_distance(start, dest, active),
            test_loss=t_loss,
            test_acc=t_acc,
            params=start,
        )
    ]

    current = start
    step_trainer = replace(trainer, lr=cfg.eta_base)
    for i in range(1, cfg.iterations + 1):
        if var_stop is not None and _vars_within(current, *var_stop):
            break
        moved = move_toward(current, dest, arc0, cfg.step, active)
        rates = angle_conformal(moved, v_base, cfg.eta_base, excluded)
        result = train_until(
            graph, moved, train_data, step_trainer,
            cfg.stop, rng, norm_state=norm_state, lr_map=rates,
            augment=settings.augment_path_steps,
        )
        current = result.params
        exhausted = cfg.stop.loss_threshold > 0 and not result.hit_threshold
        t_loss, t_acc = _maybe_eval(graph, current, test_data, settings, norm_state)
        points.append(
            PathPoint(
                iteration=i,
                phase=0,
                rolling_train_loss=result.rolling_loss,
                per_layer_dist=l2_distance(current, dest, active),
                test_loss=t_loss,
                test_acc=t_acc,
                params=current if _store_params(i, cfg.iterations, settings.checkpoint_stride) else None,
                train_exhausted=exhausted,
            )
        )
    if points[-1].params is None:
        points[-1].params = current
    return PathRecord(
        points=points,
        config_hash=settings.config_hash,
        endpoints=(settings.endpoint_ids[0], "origin" if destination is None else settings.endpoint_ids[1]),
    )


def _vars_within(params: ParamVector, targets: VarianceTarget, rtol: float) -> bool:
    for name in correctable_layers(params, targets):
        current = layer_stats(params.get(name)).variance
        ratio = current / targets[name]
        if not (1.0 / rtol <= ratio <= rtol):
            return False
    return True


# -- cross-sphere connection ------------------------------------------------------


@dataclass(frozen=True)
class CrossVarianceConfig:
    m2o: M2OConfig
    m2m_plan: PhasePlan
    sphere_match_rtol: float = 1.05


def connect_cross_variance(
    start: ParamVector,
    dest: ParamVector,
    cfg: CrossVarianceConfig,
    trainer: TrainerConfig,
    train_data: Dataset,
    test_data: Dataset | None = None,
    *,
    graph: ModelGraph,
    settings: SearchSettings = SearchSettings(),
    norm_state: NormState | None = None,
) -> PathRecord:
    """Connect modes on different variance spheres.

    Stage one walks ``start`` inward to the projection of itself onto the
    destination's per-layer spheres (the inward walk only shrinks, so the
    start must sit on the larger spheres on average).  Stage two runs the
    same-sphere search from that intermediate point to ``dest``.  The
    returned record is the concatenation, with the hand-off point recorded
    once at ``stage_boundary``.
    """
    start.require_compatible(dest)

    dest_targets = _capture_targets(dest, settings.endpoint_ids[1])
    correctable = correctable_layers(dest, dest_targets)
    if not correctable:
        raise ValueError("no correctable layers to project")
    ratios = []
    for name in correctable:
        v_start = layer_stats(start.get(name)).variance
        ratios.append(v_start / dest_targets[name])
    if float(np.mean(ratios)) < 1.0:
        raise PrerequisiteError("destination on larger sphere; swap endpoints")

    projection = _correct(start, correctable, dest_targets)

    stage1 = llpf_m2o(
        start,
        cfg.m2o,
        trainer,
        train_data,
        test_data,
        settings=replace(settings, endpoint_ids=(settings.endpoint_ids[0], "sphere-projection")),
        norm_state=norm_state,
        graph=graph,
        destination=projection,
        var_stop=(dest_targets, cfg.sphere_match_rtol),
    )
    hand_off = stage1.points[-1].params
    assert hand_off is not None

    stage2 = llpf_m2m(
        hand_off,
        dest,
        cfg.m2m_plan,
        trainer,
        train_data,
        test_data,
        settings=replace(settings, endpoint_ids=("stage-1-endpoint", settings.endpoint_ids[1])),
        norm_state=norm_state,
        graph=graph,
    )

    boundary = len(stage1.points) - 1
    offset = stage1.points[-1].iteration
    phase_offset = max(p.phase for p in stage1.points) + 1
    merged = list(stage1.points)
    for p in stage2.points[1:]:
        merged.append(
            PathPoint(
                iteration=p.iteration + offset,
                phase=p.phase + phase_offset,
                rolling_train_loss=p.rolling_train_loss,
                per_layer_dist=p.per_layer_dist,
                test_loss=p.test_loss,
                test_acc=p.test_acc,
                params=p.params,
                train_exhausted=p.train_exhausted,
            )
        )
    return PathRecord(
        points=merged,
        config_hash=settings.config_hash,
        endpoints=settings.endpoint_ids,
        stage_boundary=boundary,
    )


# -- data-flow phase ordering ------------------------------------------------------


def fdf_phase_plan(
    graph: ModelGraph,
    iterations: int,
    step: StepParams,
    stop: StopRule,
) -> PhasePlan:
    """Cumulative phase plan that follows the data flow.

    The node DAG splits into linear segments at forks and joins; segments are
    visited in topological order from the input, so parallel branches become
    consecutive individual phases (lexicographic order on a branch's first
    node breaks ties).  Within a segment, consecutive nodes sharing a dotted
    name prefix ("block1.conv_a" -> "block1") form one block, which is how
    architecture modules group under the usual naming convention.  Phase k
    extends phase k-1 with the next block's layers; a final all-layers phase
    is always appended.
    """
    segments = _segment_nodes(graph)
    ordered = _order_segments(graph, segments)

    slice_by_node: dict[str, list[str]] = {}
    for info in graph.layout:
        node_name = info.name.rsplit(".", 1)[0]
        slice_by_node.setdefault(node_name, []).append(info.name)

    layout_order = {name: i for i, name in enumerate(graph.slice_names())}
    cumulative: list[str] = []
    phases: list[Phase] = []
    for seg in ordered:
        for block in _prefix_runs(seg):
            block_slices = [s for node in block for s in slice_by_node.get(node, [])]
            if not block_slices:
                continue
            cumulative.extend(block_slices)
            active = tuple(sorted(cumulative, key=layout_order.__getitem__))
            phases.append(Phase(active, iterations, step, stop))
    all_layers = tuple(graph.slice_names())
    phases.append(Phase(all_layers, iterations, step, stop))
    return PhasePlan(tuple(phases))


def _block_prefix(name: str) -> str:
    return name.rsplit(".", 1)[0] if "." in name else name


def _prefix_runs(chain: Sequence[str]) -> list[list[str]]:
    runs: list[list[str]] = []
    for node in chain:
        if runs and _block_prefix(runs[-1][-1]) == _block_prefix(node):
            runs[-1].append(node)
        else:
            runs.append([node])
    return runs


def _segment_nodes(graph: ModelGraph) -> dict[str, list[str]]:
    """Split the node DAG into maximal linear chains, keyed by head node."""
    in_deg = {n.name: len(n.inputs) for n in graph.nodes}
    out_deg = {n.name: len(graph.consumers(n.name)) for n in graph.nodes}

    def starts_segment(name: str) -> bool:
        node = graph.node(name)
        if len(node.inputs) != 1:
            return True
        return out_deg[node.inputs[0]] != 1

    segments = {}
    for name in graph.topo_order:
        if not starts_segment(name):
            continue
        chain = [name]
        cur = name
        while True:
            consumers = graph.consumers(cur)
            if len(consumers) != 1:
                break
            nxt = consumers[0]
            if in_deg[nxt] != 1:
                break
            chain.append(nxt)
            cur = nxt
        segments[name] = chain
    return segments


def _order_segments(graph: ModelGraph, segments: dict[str, list[str]]) -> list[list[str]]:
    seg_of = {node: head for head, chain in segments.items() for node in chain}
    deps: dict[str, set[str]] = {head: set() for head in segments}
    succ: dict[str, set[str]] = {head: set() for head in segments}
    for node in graph.nodes:
        for src in node.inputs:
            a, b = seg_of[src], seg_of[node.name]
            if a != b:
                deps[b].add(a)
                succ[a].add(b)
    remaining = {head: len(d) for head, d in deps.items()}
    ready = [head for head, k in remaining.items() if k == 0]
    heapq.heapify(ready)
    ordered = []
    while ready:
        head = heapq.heappop(ready)
        ordered.append(segments[head])
        for nxt in sorted(succ[head]):
            remaining[nxt] -= 1
            if remaining[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(ordered) != len(segments):
        raise ValueError("graph contains a cycle")
    return ordered
