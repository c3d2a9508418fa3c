"""Assembly of library objects from parsed config files.

Each ``build_*`` helper validates one section (unknown keys are rejected with
their line number) and returns ready-to-use engine objects.
"""

from __future__ import annotations

import fnmatch
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..llpf_core import (
    CrossVarianceConfig,
    M2OConfig,
    Phase,
    PhasePlan,
    SearchSettings,
    StepParams,
    fdf_phase_plan,
)
from ..nn_engine.graph import MODEL_BUILDERS, ModelGraph, build_model
from ..nn_engine.trainer import Dataset, StopRule, TrainerConfig
from .config import ConfigError, ConfigFile, Section, resolve_path
from .datasets import gen_blobs, load_mnist

DATA_DIR_ENV = "LLPF_DATA_DIR"


def build_graph(cfg: ConfigFile) -> ModelGraph:
    sec = Section(cfg, "model")
    name = sec.require_str("name")
    if name not in MODEL_BUILDERS:
        raise cfg.error(sec.line, f"unknown model {name!r}; choices: {sorted(MODEL_BUILDERS)}")
    kwargs = {}
    if name == "mlp2":
        for key in ("in_dim", "hidden", "classes"):
            value = sec.positive_int(key)
            if value is not None:
                kwargs[key] = value
    else:
        for key in ("in_channels", "hw", "classes"):
            value = sec.positive_int(key)
            if value is not None:
                kwargs[key] = value
        if name == "resnet-micro":
            value = sec.positive_int("width")
            if value is not None:
                kwargs["width"] = value
    sec.finish()
    return build_model(name, **kwargs)


def build_datasets(cfg: ConfigFile) -> tuple[Dataset, Dataset]:
    sec = Section(cfg, "dataset")
    name = sec.require_str("name")
    if name == "blobs":
        classes = sec.require_int("classes")
        dim = sec.require_int("dim")
        n = sec.require_int("n")
        seed = sec.get_int("seed", 0)
        separation = sec.get_float("separation", 48.0)
        sec.finish()
        return gen_blobs(classes, dim, n, seed, separation)
    if name in ("mnist", "mnist-subset"):
        dir_text = sec.get_str("dir")
        if dir_text is None:
            dir_text = os.environ.get(DATA_DIR_ENV)
            if dir_text is None:
                raise cfg.error(
                    sec.line, f"[dataset] needs 'dir' or the {DATA_DIR_ENV} environment variable"
                )
            data_dir = Path(dir_text)
        else:
            data_dir = resolve_path(cfg, dir_text)
        per_class = None
        if name == "mnist-subset":
            per_class = sec.require_int("per_class")
        subset_seed = sec.get_int("seed", 0)
        augment = sec.get_bool("augment", False)
        sec.finish()
        if not data_dir.is_dir():
            raise cfg.error(sec.line, f"dataset directory {data_dir} does not exist")
        return load_mnist(data_dir, per_class, subset_seed, augment)
    raise cfg.error(sec.line, f"unknown dataset {name!r}")


@dataclass
class ModesBlock:
    seeds: list[int]
    trainer: TrainerConfig
    rule: StopRule
    acceptance_loss: float | None
    augment: bool


def build_modes(cfg: ConfigFile) -> ModesBlock:
    sec = Section(cfg, "modes")
    seeds = sec.get_int_list("seeds")
    if not seeds:
        raise cfg.error(sec.line, "[modes] needs a 'seeds' list")
    trainer = TrainerConfig(
        lr=sec.require_float("lr"),
        momentum=sec.get_float("momentum", 0.0),
        weight_decay=sec.get_float("weight_decay", 0.0),
        batch_size=sec.positive_int("batch_size", 32),
    )
    rule = StopRule(
        loss_threshold=sec.get_float("loss_threshold", 0.0),
        max_rounds=sec.positive_int("max_rounds", 1000),
        window=sec.positive_int("window", 10),
    )
    acceptance = sec.get_float("acceptance_loss")
    augment = sec.get_bool("augment", True)
    sec.finish()
    return ModesBlock(seeds, trainer, rule, acceptance, augment)


@dataclass
class OutputBlock:
    out_dir: Path
    checkpoint_stride: int
    precision: str
    eval_subset: int
    seed: int
    test_metrics: bool

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def build_output(cfg: ConfigFile) -> OutputBlock:
    sec = Section(cfg, "output")
    dir_text = sec.get_str("dir", "out")
    precision = sec.get_str("precision", "f32")
    if precision not in ("f32", "f64"):
        raise cfg.error(sec.line, f"precision must be f32 or f64, got {precision!r}")
    block = OutputBlock(
        out_dir=resolve_path(cfg, dir_text),
        checkpoint_stride=sec.positive_int("checkpoint_stride", 10),
        precision=precision,
        eval_subset=sec.positive_int("eval_subset", 2048),
        seed=sec.get_int("seed", 0),
        test_metrics=sec.get_bool("test_metrics", True),
    )
    sec.finish()
    return block


def _step_params(sec: Section, defaults: StepParams | None = None) -> StepParams:
    step_a = sec.get_float("step_a", defaults.step_a if defaults else 0.0)
    step_c = sec.get_float("step_c", defaults.step_c if defaults else 0.0)
    step_f = sec.get_float("step_f", defaults.step_f if defaults else 0.0)
    return StepParams(step_a=step_a, step_c=step_c, step_f=step_f)


def _stop_rule(sec: Section, defaults: StopRule | None = None) -> StopRule:
    return StopRule(
        loss_threshold=sec.get_float(
            "loss_threshold", defaults.loss_threshold if defaults else 0.0
        ),
        max_rounds=sec.positive_int("train_rounds", defaults.max_rounds if defaults else 5),
        window=sec.positive_int("window", defaults.window if defaults else 10),
    )


def _expand_layers(cfg: ConfigFile, patterns: list[str], graph: ModelGraph, line: int):
    names = []
    all_names = graph.slice_names()
    for pattern in patterns:
        if pattern == "all":
            return list(all_names)
        matched = fnmatch.filter(all_names, pattern)
        if not matched:
            raise cfg.error(line, f"layer pattern {pattern!r} matches nothing")
        names.extend(m for m in matched if m not in names)
    return names


@dataclass
class M2MBlock:
    start: Path
    dest: Path
    plan: PhasePlan
    trainer: TrainerConfig
    mode_acceptance_loss: float | None
    variance_ratio_bound: float
    augment_path_steps: bool


def _phase_sections(cfg: ConfigFile, prefix: str) -> list[str]:
    found = []
    for name in cfg.sections:
        if name.startswith(prefix + "."):
            suffix = name[len(prefix) + 1 :]
            if not suffix.isdigit():
                raise cfg.error(cfg.section_lines[name], f"phase sections must be [{prefix}.N]")
            found.append((int(suffix), name))
    found.sort()
    if found and [i for i, _ in found] != list(range(1, len(found) + 1)):
        raise cfg.error(
            cfg.section_lines[found[0][1]], f"[{prefix}.N] sections must be numbered 1..K"
        )
    return [name for _, name in found]


def build_m2m(cfg: ConfigFile, graph: ModelGraph, section: str = "m2m") -> M2MBlock:
    sec = Section(cfg, section)
    if not cfg.has(section):
        raise ConfigError(f"{cfg.path}: missing [{section}] section")
    start = resolve_path(cfg, sec.require_str("start"))
    dest = resolve_path(cfg, sec.require_str("dest"))
    iterations = sec.positive_int("iterations", 1000)
    step = _step_params(sec)
    stop = _stop_rule(sec)
    trainer = TrainerConfig(
        lr=sec.get_float("lr", 1e-3),
        momentum=0.0,
        weight_decay=0.0,
        batch_size=sec.positive_int("batch_size", 64),
    )
    phases_kind = sec.get_str("phases", "all")
    acceptance = sec.get_float("mode_acceptance_loss")
    bound = sec.get_float("variance_ratio_bound", 1.5)
    augment_steps = sec.get_bool("augment_path_steps", False)
    phase_names = _phase_sections(cfg, f"{section}.phase")
    if phase_names:
        if phases_kind != "all":
            raise cfg.error(sec.line, "use either phases=fdf or explicit phase sections, not both")
        phases = []
        for name in phase_names:
            psec = Section(cfg, name)
            patterns = psec.get_str_list("layers")
            if not patterns:
                raise cfg.error(psec.line, f"[{name}] needs a 'layers' list")
            layers = _expand_layers(cfg, patterns, graph, psec.line)
            phases.append(
                Phase(
                    active_layers=tuple(layers),
                    iterations=psec.positive_int("iterations", iterations),
                    step=_step_params(psec, step),
                    stop=_stop_rule(psec, stop),
                )
            )
            psec.finish()
        plan = PhasePlan(tuple(phases))
    elif phases_kind == "fdf":
        plan = fdf_phase_plan(graph, iterations, step, stop)
    elif phases_kind == "all":
        plan = PhasePlan((Phase(tuple(graph.slice_names()), iterations, step, stop),))
    else:
        raise cfg.error(sec.line, f"phases must be 'all' or 'fdf', got {phases_kind!r}")
    sec.finish()
    for path, label in ((start, "start"), (dest, "dest")):
        if not path.is_file():
            raise ConfigError(f"{cfg.path}: [{section}] {label} checkpoint {path} does not exist")
    return M2MBlock(start, dest, plan, trainer, acceptance, bound, augment_steps)


@dataclass
class M2OBlock:
    start: Path | None
    cfg: M2OConfig
    trainer: TrainerConfig
    mode_acceptance_loss: float | None
    augment_path_steps: bool


def build_m2o(cfg: ConfigFile, graph: ModelGraph, section: str = "m2o", need_start: bool = True) -> M2OBlock:
    sec = Section(cfg, section)
    if not cfg.has(section):
        raise ConfigError(f"{cfg.path}: missing [{section}] section")
    start = None
    if need_start:
        start = resolve_path(cfg, sec.require_str("start"))
    iterations = sec.positive_int("iterations", 1000)
    step = _step_params(sec)
    stop = _stop_rule(sec)
    eta = sec.get_float("eta", 1e-3)
    batch_size = sec.positive_int("batch_size", 64)
    extra = sec.get_str_list("exclude", [])
    acceptance = sec.get_float("mode_acceptance_loss")
    augment_steps = sec.get_bool("augment_path_steps", False)
    sec.finish()
    excluded_layers = tuple(_expand_layers(cfg, extra, graph, sec.line)) if extra else ()
    m2o_cfg = M2OConfig(
        iterations=iterations,
        step=step,
        stop=stop,
        eta_base=eta,
        excluded_layers=excluded_layers,
    )
    trainer = TrainerConfig(lr=eta, batch_size=batch_size)
    if start is not None and not start.is_file():
        raise ConfigError(f"{cfg.path}: [{section}] start checkpoint {start} does not exist")
    return M2OBlock(start, m2o_cfg, trainer, acceptance, augment_steps)


@dataclass
class AvsBlock:
    start: Path
    dest: Path
    cfg: CrossVarianceConfig
    trainer: TrainerConfig
    mode_acceptance_loss: float | None


def build_avs(cfg: ConfigFile, graph: ModelGraph) -> AvsBlock:
    sec = Section(cfg, "avs")
    if not cfg.has("avs"):
        raise ConfigError(f"{cfg.path}: missing [avs] section")
    start = resolve_path(cfg, sec.require_str("start"))
    dest = resolve_path(cfg, sec.require_str("dest"))
    rtol = sec.get_float("sphere_match_rtol", 1.05)
    acceptance = sec.get_float("mode_acceptance_loss")
    sec.finish()
    m2o_block = build_m2o(cfg, graph, "avs.m2o", need_start=False)
    m2m_sec = Section(cfg, "avs.m2m")
    if not cfg.has("avs.m2m"):
        raise ConfigError(f"{cfg.path}: missing [avs.m2m] section")
    iterations = m2m_sec.positive_int("iterations", 1000)
    step = _step_params(m2m_sec)
    stop = _stop_rule(m2m_sec)
    batch_size = m2m_sec.positive_int("batch_size", 64)
    lr = m2m_sec.get_float("lr", m2o_block.cfg.eta_base)
    m2m_sec.finish()
    plan = PhasePlan((Phase(tuple(graph.slice_names()), iterations, step, stop),))
    cross = CrossVarianceConfig(m2o=m2o_block.cfg, m2m_plan=plan, sphere_match_rtol=rtol)
    trainer = TrainerConfig(lr=lr, batch_size=batch_size)
    for path, label in ((start, "start"), (dest, "dest")):
        if not path.is_file():
            raise ConfigError(f"{cfg.path}: [avs] {label} checkpoint {path} does not exist")
    return AvsBlock(start, dest, cross, trainer, acceptance)


@dataclass
class ContinuityBlock:
    record_dir: Path
    samples: int
    eval_subset: int
    use_full_set: bool


def build_continuity(cfg: ConfigFile) -> ContinuityBlock:
    sec = Section(cfg, "continuity")
    if not cfg.has("continuity"):
        raise ConfigError(f"{cfg.path}: missing [continuity] section")
    record_dir = resolve_path(cfg, sec.require_str("record_dir"))
    samples = sec.positive_int("samples", 50)
    eval_subset = sec.positive_int("eval_subset", 2048)
    use_full = sec.get_bool("use_full_set", False)
    sec.finish()
    if not record_dir.is_dir():
        raise ConfigError(f"{cfg.path}: record_dir {record_dir} does not exist")
    if samples < 2:
        raise ConfigError(f"{cfg.path}: continuity samples must be >= 2")
    return ContinuityBlock(record_dir, samples, eval_subset, use_full)


@dataclass
class SeedStudyBlock:
    n_seeds: int
    seeds: list[int] | None
    init_only: bool
    acceptance_loss: float | None


def build_seed_study(cfg: ConfigFile) -> SeedStudyBlock:
    sec = Section(cfg, "seed_study")
    if not cfg.has("seed_study"):
        raise ConfigError(f"{cfg.path}: missing [seed_study] section")
    seeds = sec.get_int_list("seeds")
    n_seeds = sec.positive_int("n_seeds", len(seeds) if seeds else 10)
    init_only = sec.get_bool("init_only", False)
    acceptance = sec.get_float("acceptance_loss")
    sec.finish()
    return SeedStudyBlock(n_seeds, seeds, init_only, acceptance)


def search_settings(out: OutputBlock, cfg_digest: str, endpoints: tuple[str, str],
                    mode_acceptance: float | None, bound: float = 1.5,
                    augment_path_steps: bool = False) -> SearchSettings:
    return SearchSettings(
        seed=out.seed,
        checkpoint_stride=out.checkpoint_stride,
        eval_subset=out.eval_subset,
        variance_ratio_bound=bound,
        mode_acceptance_loss=mode_acceptance,
        record_test_metrics=out.test_metrics,
        augment_path_steps=augment_path_steps,
        config_hash=cfg_digest,
        endpoint_ids=endpoints,
    )
