"""Config-driven experiment pipeline: the six CLI stages and their file layout.

Stages hand off through files under the run directory::

    config.json                          resolved config echo + hash
    datasets/<domain>.{train,val}.jsonl  scene records
    pool/                                checkpoint pool + manifest + traces
    merge/shared/                        union model, ensemble members
    merge/<target>/                      merged model, weights, baseline models
    eval/                                results table, plans, correlations
    ablate/                              one table per ablation axis
    report/                              summary + machine-readable bundle

Every emitted table carries a ``# config=<hash> inputs=<hash>`` comment line;
outputs contain no timestamps or absolute paths, so identical config + seed
reproduces byte-identical tables.
"""

from __future__ import annotations

import io as _stdio
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoints import (
    CheckpointPool,
    filter_pool,
    load_checkpoint,
    load_params,
    load_pool,
    save_checkpoint,
    save_params,
    save_pool,
)
from .domains import DomainSpec, Dataset, Regime, generate, split_ego_roles
from .errors import InputError, StateError
from .io import (
    atomic_write_bytes,
    atomic_write_text,
    fingerprint_paths,
    fmt_float,
    read_table,
    short_hash,
    stable_seed,
    write_table,
)
from .merging import (
    Granularity,
    MergeOptConfig,
    MergeRecipe,
    MergeResult,
    domain_best_models,
    ensemble_plans,
    merge_average,
    merge_learned,
    merge_ties,
    task_arithmetic_candidate,
    weight_similarity_correlation,
)
from .metrics import evaluate, evaluate_with_plans, report_from_plans
from .net import GROUP_NAMES, Planner, PlannerConfig
from .params import ParamVector
from .scenes import Scene, SceneBatch, scenes_from_jsonl, scenes_to_jsonl
from .training import TrainConfig, build_pool, finetune, train_union

METHODS = (
    "domain_generalization",
    "domain_adaptation",
    "target_only",
    "ensemble_wta",
    "ensemble_avg",
    "averaging",
    "task_arithmetic",
    "ties_merging",
    "learned_merge",
    "learned_merge_finetune",
)

RESULT_HEADER = ("target", "method", "ade", "collision_rate", "fde", "miss_rate", "cost")


@dataclass(frozen=True)
class BaselineToggles:
    target_only: bool = True
    domain_generalization: bool = True
    domain_adaptation: bool = True
    ensemble_wta: bool = True
    ensemble_avg: bool = True
    averaging: bool = True
    task_arithmetic: bool = True
    ties_merging: bool = True
    merge_finetune: bool = True

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "BaselineToggles":
        return cls(**obj)


@dataclass(frozen=True)
class PoolComposition:
    """Which harvested checkpoints enter the merge pool."""

    all_metric: bool = True
    epoch_planner: bool = True
    epoch_forecaster: bool = True

    def label(self) -> str:
        if not self.all_metric and not self.epoch_planner and not self.epoch_forecaster:
            return "ade_only"
        parts = []
        parts.append("all_metric" if self.all_metric else "ade_only")
        if self.epoch_forecaster:
            parts.append("epoch_fp")
        elif self.epoch_planner:
            parts.append("epoch_p")
        return "+".join(parts)

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "PoolComposition":
        return cls(**obj)


POOL_COMPOSITION_LADDER = (
    PoolComposition(all_metric=False, epoch_planner=False, epoch_forecaster=False),
    PoolComposition(all_metric=True, epoch_planner=False, epoch_forecaster=False),
    PoolComposition(all_metric=True, epoch_planner=True, epoch_forecaster=False),
    PoolComposition(all_metric=True, epoch_planner=True, epoch_forecaster=True),
)

GROUP_PARTITIONS = {
    "separate": None,
    "ego+surr": (("ego", "surr"), ("inter",), ("else",), ("fore",)),
    "surr+inter": (("surr", "inter"), ("ego",), ("else",), ("fore",)),
    "inter+ego": (("inter", "ego"), ("surr",), ("else",), ("fore",)),
}


@dataclass(frozen=True)
class AblationAxes:
    granularities: tuple[str, ...] = ("model", "parameter", "group")
    pool_compositions: bool = True
    intervals: tuple[int, ...] = (1, 2, 3, 5, 10)
    group_partitions: tuple[str, ...] = ("ego+surr", "surr+inter", "inter+ego", "separate")
    target: str | None = None

    def to_json(self) -> dict:
        return {
            "granularities": list(self.granularities),
            "pool_compositions": self.pool_compositions,
            "intervals": list(self.intervals),
            "group_partitions": list(self.group_partitions),
            "target": self.target,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AblationAxes":
        return cls(
            granularities=tuple(obj.get("granularities", ("model", "parameter", "group"))),
            pool_compositions=bool(obj.get("pool_compositions", True)),
            intervals=tuple(int(c) for c in obj.get("intervals", (1, 2, 3, 5, 10))),
            group_partitions=tuple(obj.get("group_partitions",
                                           ("ego+surr", "surr+inter", "inter+ego", "separate"))),
            target=obj.get("target"),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sources: tuple[DomainSpec, ...] = ()
    targets: tuple[DomainSpec, ...] = ()
    forecaster_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_epochs=16, interval=8, batch_size=64, plateau_patience=4))
    planner_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_epochs=30, interval=5, batch_size=64))
    union_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_epochs=25, batch_size=64))
    finetune_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_epochs=40, batch_size=64))
    merge: MergeRecipe = field(default_factory=MergeRecipe)
    pool: PoolComposition = field(default_factory=PoolComposition)
    baselines: BaselineToggles = field(default_factory=BaselineToggles)
    ta_lambdas: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0)
    ties_keep_fraction: float = 0.2
    ties_lambda: float = 1.0
    ablation: AblationAxes = field(default_factory=AblationAxes)

    def __post_init__(self) -> None:
        source_names = [s.name for s in self.sources]
        target_names = [t.name for t in self.targets]
        overlap = set(source_names) & set(target_names)
        if overlap:
            raise InputError(f"domains cannot be both source and target: {sorted(overlap)}")
        if len(set(source_names)) != len(source_names) or len(set(target_names)) != len(target_names):
            raise InputError("duplicate domain names")
        if self.ablation.target is not None and self.ablation.target not in target_names:
            raise InputError(f"ablation target {self.ablation.target!r} is not a target domain")
        if self.merge.group_partition is not None:
            referenced = {g for cell in self.merge.group_partition for g in cell}
            unknown = referenced - set(GROUP_NAMES)
            if unknown:
                raise InputError(f"merge partition references unknown groups: {sorted(unknown)}")
        for label in self.ablation.group_partitions:
            if label not in GROUP_PARTITIONS:
                raise InputError(f"unknown group partition label {label!r}")
        for g in self.ablation.granularities:
            Granularity(g)

    def ablation_target(self) -> str:
        return self.ablation.target or self.targets[0].name


# ---------------------------------------------------------------- (de)serialization


def config_to_json(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "planner": dict(cfg.planner.__dict__),
        "sources": [s.to_json() for s in cfg.sources],
        "targets": [t.to_json() for t in cfg.targets],
        "forecaster_train": _train_to_json(cfg.forecaster_train),
        "planner_train": _train_to_json(cfg.planner_train),
        "union_train": _train_to_json(cfg.union_train),
        "finetune_train": _train_to_json(cfg.finetune_train),
        "merge": {
            "granularity": cfg.merge.granularity.value,
            "group_partition": [list(c) for c in cfg.merge.group_partition]
            if cfg.merge.group_partition is not None else None,
            "lam": cfg.merge.lam,
            "weight_init": cfg.merge.weight_init,
            "opt": _opt_to_json(cfg.merge.opt),
        },
        "pool": cfg.pool.to_json(),
        "baselines": cfg.baselines.to_json(),
        "ta_lambdas": list(cfg.ta_lambdas),
        "ties_keep_fraction": cfg.ties_keep_fraction,
        "ties_lambda": cfg.ties_lambda,
        "ablation": cfg.ablation.to_json(),
    }


def _train_to_json(cfg: TrainConfig) -> dict:
    out = dict(cfg.__dict__)
    out.pop("seed")  # training seeds derive from the global seed at use
    return out


def _opt_to_json(cfg: MergeOptConfig) -> dict:
    out = dict(cfg.__dict__)
    out.pop("seed")
    return out


def config_from_json(obj: dict) -> ExperimentConfig:
    merge_obj = obj.get("merge", {})
    partition = merge_obj.get("group_partition")
    recipe = MergeRecipe(
        granularity=Granularity(merge_obj.get("granularity", "group")),
        group_partition=tuple(tuple(c) for c in partition) if partition is not None else None,
        lam=float(merge_obj.get("lam", 1.0)),
        weight_init=merge_obj.get("weight_init"),
        opt=MergeOptConfig(**merge_obj.get("opt", {})),
    )
    defaults = ExperimentConfig()
    return ExperimentConfig(
        seed=int(obj.get("seed", defaults.seed)),
        out_dir=obj.get("out_dir", defaults.out_dir),
        planner=PlannerConfig(**obj.get("planner", {})),
        sources=tuple(DomainSpec.from_json(s) for s in obj.get("sources", ())),
        targets=tuple(DomainSpec.from_json(t) for t in obj.get("targets", ())),
        forecaster_train=TrainConfig(**obj.get("forecaster_train", _train_to_json(defaults.forecaster_train))),
        planner_train=TrainConfig(**obj.get("planner_train", _train_to_json(defaults.planner_train))),
        union_train=TrainConfig(**obj.get("union_train", _train_to_json(defaults.union_train))),
        finetune_train=TrainConfig(**obj.get("finetune_train", _train_to_json(defaults.finetune_train))),
        merge=recipe,
        pool=PoolComposition.from_json(obj.get("pool", {})),
        baselines=BaselineToggles.from_json(obj.get("baselines", {})),
        ta_lambdas=tuple(float(x) for x in obj.get("ta_lambdas", defaults.ta_lambdas)),
        ties_keep_fraction=float(obj.get("ties_keep_fraction", 0.2)),
        ties_lambda=float(obj.get("ties_lambda", 1.0)),
        ablation=AblationAxes.from_json(obj.get("ablation", {})),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON: {exc}") from exc
    return resolve_config(config_from_json(obj))


def resolve_config(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Apply overrides and derive per-domain seeds from the global seed."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=str(out_dir))
    cfg = replace(
        cfg,
        sources=tuple(replace(s, seed=stable_seed(cfg.seed, "domain", s.name)) for s in cfg.sources),
        targets=tuple(replace(t, seed=stable_seed(cfg.seed, "domain", t.name)) for t in cfg.targets),
    )
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    obj = config_to_json(cfg)
    obj.pop("out_dir")  # identical runs in different directories share a hash
    return short_hash(obj)


def default_config() -> ExperimentConfig:
    """The default synthetic benchmark: five sources, two small targets."""
    sources = (
        DomainSpec("yield_plaza", Regime.MUTUAL_YIELD, n_agents=(3, 5), speed=(0.8, 1.2),
                   interaction_gain=1.5, n_scenes=140, noise_sigma=0.015,
                   rotate_roles=True, val_fraction=0.2),
        DomainSpec("yield_hall", Regime.MUTUAL_YIELD, n_agents=(2, 4), speed=(0.5, 0.9),
                   interaction_gain=1.8, n_scenes=140, noise_sigma=0.015,
                   rotate_roles=True, val_fraction=0.2),
        DomainSpec("recip_field", Regime.RECIPROCAL_AVOID, n_agents=(3, 6), speed=(0.8, 1.3),
                   interaction_gain=1.0, n_scenes=450, noise_sigma=0.015, val_fraction=0.2),
        DomainSpec("patrol_hall", Regime.PATROL_IGNORE, n_agents=(3, 6), speed=(0.6, 1.0),
                   interaction_gain=1.2, n_scenes=450, noise_sigma=0.015,
                   obstacle_boxes=((-4.0, -1.0, -1.5, 1.0), (1.5, -1.0, 4.0, 1.0)),
                   val_fraction=0.2),
        DomainSpec("sprint_park", Regime.OUTDOOR_FAST, n_agents=(2, 4), speed=(1.1, 1.5),
                   interaction_gain=0.6, n_scenes=450, noise_sigma=0.015, val_fraction=0.2),
    )
    targets = (
        DomainSpec("yield_lab", Regime.MUTUAL_YIELD, n_agents=(2, 4), speed=(0.5, 0.8),
                   interaction_gain=1.6, n_scenes=200, noise_sigma=0.02, val_fraction=0.25),
        DomainSpec("patrol_office", Regime.PATROL_IGNORE, n_agents=(3, 5), speed=(0.5, 0.9),
                   interaction_gain=1.2, n_scenes=200, noise_sigma=0.02,
                   obstacle_boxes=((-3.0, -0.8, 0.0, 0.8), (1.0, -2.8, 3.5, -0.9)),
                   val_fraction=0.25),
    )
    return resolve_config(ExperimentConfig(sources=sources, targets=targets))


# ----------------------------------------------------------------------- paths


def _dataset_paths(out: Path, name: str) -> tuple[Path, Path, Path]:
    d = out / "datasets"
    return d / f"{name}.train.jsonl", d / f"{name}.val.jsonl", d / f"{name}.meta.json"


def _method_ckpt(out: Path, target: str, method: str) -> Path:
    return out / "merge" / target / "methods" / f"{method}.ckpt"


def _read_scenes(path: Path) -> list[Scene]:
    if not path.exists():
        raise StateError(f"missing dataset file: {path}")
    return scenes_from_jsonl(path.read_text(encoding="utf-8"))


def _load_dataset(out: Path, spec: DomainSpec) -> Dataset:
    train_p, val_p, _ = _dataset_paths(out, spec.name)
    return Dataset(domain=spec, train=_read_scenes(train_p), val=_read_scenes(val_p))


def _require(paths: Sequence[Path], hint: str) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise StateError(f"{hint}; missing files: {missing}")


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _write_config_echo(cfg: ExperimentConfig, out: Path) -> None:
    obj = config_to_json(cfg)
    obj["config_hash"] = config_hash(cfg)
    atomic_write_text(out / "config.json", json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -------------------------------------------------------------------- simulate


def _simulate_one(args) -> tuple[str, int, int]:
    cfg, spec, out_dir = args
    out = Path(out_dir)
    ds = generate(spec, cfg.planner.t_obs, cfg.planner.t_fut, cfg.planner.max_agents)
    if spec.rotate_roles:
        ds = split_ego_roles(ds, cfg.planner.max_agents)
    train_p, val_p, meta_p = _dataset_paths(out, spec.name)
    atomic_write_text(train_p, scenes_to_jsonl(ds.train))
    atomic_write_text(val_p, scenes_to_jsonl(ds.val))
    meta = {
        "spec": spec.to_json(),
        "config": config_hash(cfg),
        "n_train": len(ds.train),
        "n_val": len(ds.val),
    }
    atomic_write_text(meta_p, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return spec.name, len(ds.train), len(ds.val)


def stage_simulate(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    domains = tuple(cfg.sources) + tuple(cfg.targets)
    if dry_run:
        for spec in domains:
            print(f"[dry-run] simulate {spec.name}: regime={spec.regime.value} "
                  f"n_scenes={spec.n_scenes} seed={spec.seed} rotate={spec.rotate_roles}")
        return
    _write_config_echo(cfg, out)
    results = _pmap(_simulate_one, [(cfg, spec, cfg.out_dir) for spec in domains], jobs)
    for name, n_train, n_val in results:
        print(f"simulate {name}: {n_train} train / {n_val} val scenes")


# ----------------------------------------------------------------------- train


def _gcd_interval(cfg: ExperimentConfig) -> int:
    values = [cfg.planner_train.interval, *cfg.ablation.intervals]
    return int(np.gcd.reduce(np.asarray(values, dtype=np.int64)))


def stage_train(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    harvest = _gcd_interval(cfg)
    if dry_run:
        for spec in cfg.sources:
            fk, fc = cfg.forecaster_train.total_epochs, cfg.forecaster_train.interval
            pk = cfg.planner_train.total_epochs
            print(f"[dry-run] train {spec.name}: forecaster K={fk} C={fc} "
                  f"snapshots at {list(range(fc, fk + 1, fc))}; "
                  f"planner K={pk} C={cfg.planner_train.interval} harvest={harvest} "
                  f"snapshots at {list(range(harvest, pk + 1, harvest))}")
        return
    _require([_dataset_paths(out, s.name)[0] for s in cfg.sources], "run `simulate` first")
    _write_config_echo(cfg, out)
    datasets = [_load_dataset(out, s) for s in cfg.sources]
    planner = Planner(cfg.planner)
    base = planner.init_params(stable_seed(cfg.seed, "theta0"))
    fore_cfg = replace(cfg.forecaster_train, seed=stable_seed(cfg.seed, "train"))
    plan_cfg = replace(cfg.planner_train, interval=harvest, seed=stable_seed(cfg.seed, "train"))
    pool, traces = build_pool(planner, datasets, fore_cfg, plan_cfg, base, jobs=jobs)
    save_pool(
        pool,
        out / "pool",
        extra_meta={
            "config": config_hash(cfg),
            "inputs": fingerprint_paths(
                out, [_dataset_paths(out, s.name)[i] for s in cfg.sources for i in (0, 1)]),
            "planner_interval": cfg.planner_train.interval,
            "planner_interval_harvest": harvest,
            "forecaster_interval": cfg.forecaster_train.interval,
        },
    )
    hash_ = config_hash(cfg)
    for domain, stages in traces.items():
        inputs = fingerprint_paths(
            out, [_dataset_paths(out, domain)[0], _dataset_paths(out, domain)[1]])
        for stage_name, trace in stages.items():
            rows = [
                (epoch + 1, repr(loss), repr(r.ade), repr(r.fde),
                 repr(r.collision_rate), repr(r.miss_rate))
                for epoch, (loss, r) in enumerate(zip(trace.losses, trace.reports))
            ]
            write_table(
                out / "pool" / "traces" / f"{domain}.{stage_name}.csv",
                ("epoch", "loss", "ade", "fde", "collision_rate", "miss_rate"),
                rows,
                comment=f"config={hash_} inputs={inputs} domain={domain} stage={stage_name}",
            )
    print(f"train: pool holds {pool.size} checkpoints from {len(cfg.sources)} domains")


# ----------------------------------------------------------------------- merge


def _merge_pool(cfg: ExperimentConfig, pool: CheckpointPool, manifest: dict,
                composition: PoolComposition | None = None,
                planner_interval: int | None = None) -> CheckpointPool:
    comp = composition or cfg.pool
    interval = planner_interval or cfg.planner_train.interval
    harvest = int(manifest.get("planner_interval_harvest", interval))
    if interval % harvest != 0:
        raise StateError(
            f"pool was harvested at interval {harvest}, which does not divide {interval}; "
            "re-run `train`"
        )
    return filter_pool(
        pool,
        all_metric=comp.all_metric,
        epoch_planner=comp.epoch_planner,
        epoch_forecaster=comp.epoch_forecaster,
        planner_interval=interval,
        forecaster_interval=cfg.forecaster_train.interval,
    )


def _merge_seeded(cfg: ExperimentConfig, *context) -> MergeRecipe:
    return replace(cfg.merge, opt=replace(cfg.merge.opt, seed=stable_seed(cfg.seed, *context)))


def _write_weight_tables(out: Path, target: str, cfg: ExperimentConfig,
                         pool: CheckpointPool, result: MergeResult) -> None:
    hash_ = config_hash(cfg)
    inputs = fingerprint_paths(
        out, [out / "pool" / "manifest.json", _dataset_paths(out, target)[0]])
    header = ("ckpt", "domain", "stage", "reason", "epoch") + result.cell_labels
    rows = []
    for i, entry in enumerate(pool.entries):
        rows.append(
            (i, entry.domain_id, entry.stage.value, entry.reason.value, entry.epoch)
            + tuple(float(w) for w in result.cell_means[i])
        )
    write_table(out / "merge" / target / "weights.csv", header, rows,
                comment=f"config={hash_} inputs={inputs} target={target}")
    payload = {
        "target": target,
        "config": hash_,
        "granularity": result.granularity.value,
        "cells": list(result.cell_labels),
        "cell_means": [[repr(float(x)) for x in row] for row in result.cell_means],
        "final_train_loss": repr(result.final_train_loss),
        "entries": [
            {"domain_id": e.domain_id, "stage": e.stage.value,
             "reason": e.reason.value, "epoch": e.epoch}
            for e in pool.entries
        ],
    }
    atomic_write_text(out / "merge" / target / "weights.json",
                      json.dumps(payload, indent=1, sort_keys=True) + "\n")


def stage_merge(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    toggles = cfg.baselines
    if dry_run:
        methods = enabled_methods(cfg)
        for target in cfg.targets:
            print(f"[dry-run] merge {target.name}: {', '.join(methods)}")
        return
    _require([out / "pool" / "manifest.json"], "run `train` first")
    _require([_dataset_paths(out, t.name)[0] for t in cfg.targets], "run `simulate` first")
    _write_config_echo(cfg, out)
    pool_full, manifest = load_pool(out / "pool")
    merge_pool = _merge_pool(cfg, pool_full, manifest)
    planner = Planner(cfg.planner)
    base = pool_full.base

    if toggles.domain_generalization or toggles.domain_adaptation:
        union_cfg = replace(cfg.union_train, seed=stable_seed(cfg.seed, "union"))
        sources = [_load_dataset(out, s) for s in cfg.sources]
        union = train_union(planner, sources, union_cfg, base)
        save_params(union, out / "merge" / "shared" / "union.ckpt")
        print("merge: trained source-union model")
    if toggles.ensemble_wta or toggles.ensemble_avg:
        members = domain_best_models(merge_pool)
        member_paths = []
        for member in members:
            rel = f"shared/ensemble/member_{member.domain_id}.ckpt"
            save_checkpoint(member, out / "merge" / rel)
            member_paths.append(rel)
        atomic_write_text(
            out / "merge" / "shared" / "ensemble.json",
            json.dumps({"members": member_paths,
                        "domains": [m.domain_id for m in members]}, indent=1) + "\n",
        )

    for target_spec in cfg.targets:
        target = target_spec.name
        target_train = _read_scenes(_dataset_paths(out, target)[0])
        result = merge_learned(
            planner, merge_pool, target_train, _merge_seeded(cfg, "merge", target)
        )
        save_params(result.params, _method_ckpt(out, target, "learned_merge"))
        _write_weight_tables(out, target, cfg, merge_pool, result)
        if toggles.merge_finetune:
            ft_cfg = replace(cfg.finetune_train, seed=stable_seed(cfg.seed, "merge_ft", target))
            save_params(finetune(planner, result.params, target_train, ft_cfg),
                        _method_ckpt(out, target, "learned_merge_finetune"))
        if toggles.target_only:
            to_cfg = replace(cfg.finetune_train, seed=stable_seed(cfg.seed, "target_only", target))
            save_params(finetune(planner, base, target_train, to_cfg),
                        _method_ckpt(out, target, "target_only"))
        if toggles.domain_adaptation:
            da_cfg = replace(cfg.finetune_train, seed=stable_seed(cfg.seed, "da", target))
            union = load_params(out / "merge" / "shared" / "union.ckpt")
            save_params(finetune(planner, union, target_train, da_cfg),
                        _method_ckpt(out, target, "domain_adaptation"))
        if toggles.averaging:
            save_params(merge_average(merge_pool), _method_ckpt(out, target, "averaging"))
        if toggles.ties_merging:
            save_params(merge_ties(merge_pool, cfg.ties_keep_fraction, cfg.ties_lambda),
                        _method_ckpt(out, target, "ties_merging"))
        if toggles.task_arithmetic:
            ta_dir = out / "merge" / target / "methods" / "task_arithmetic"
            for i, lam in enumerate(cfg.ta_lambdas):
                save_params(task_arithmetic_candidate(merge_pool, lam),
                            ta_dir / f"cand_{i}.ckpt")
            atomic_write_text(ta_dir / "candidates.json",
                              json.dumps({"lambdas": list(cfg.ta_lambdas)}, indent=1) + "\n")
        print(f"merge {target}: merged {merge_pool.size} checkpoints "
              f"(final train loss {result.final_train_loss:.4f})")


def enabled_methods(cfg: ExperimentConfig) -> list[str]:
    t = cfg.baselines
    enabled = {
        "domain_generalization": t.domain_generalization,
        "domain_adaptation": t.domain_adaptation,
        "target_only": t.target_only,
        "ensemble_wta": t.ensemble_wta,
        "ensemble_avg": t.ensemble_avg,
        "averaging": t.averaging,
        "task_arithmetic": t.task_arithmetic,
        "ties_merging": t.ties_merging,
        "learned_merge": True,
        "learned_merge_finetune": t.merge_finetune,
    }
    return [m for m in METHODS if enabled[m]]


# -------------------------------------------------------------------- evaluate


def _eval_inputs(out: Path) -> str:
    paths = [p for p in (out / "merge").rglob("*") if p.is_file()]
    paths.append(out / "pool" / "manifest.json")
    paths.extend((out / "datasets").glob("*.val.jsonl"))
    return fingerprint_paths(out, paths)


def stage_evaluate(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    methods = enabled_methods(cfg)
    if dry_run:
        for t in cfg.targets:
            print(f"[dry-run] evaluate {t.name}: rows for {', '.join(methods)}")
        return
    _require([out / "pool" / "manifest.json"], "run `train` first")
    _write_config_echo(cfg, out)
    pool_full, manifest = load_pool(out / "pool")
    merge_pool = _merge_pool(cfg, pool_full, manifest)
    planner = Planner(cfg.planner)
    hash_ = config_hash(cfg)
    inputs = _eval_inputs(out)

    n_members = 0
    ens_members: list[ParamVector] = []
    ens_path = out / "merge" / "shared" / "ensemble.json"
    if (cfg.baselines.ensemble_wta or cfg.baselines.ensemble_avg) and ens_path.exists():
        meta = json.loads(ens_path.read_text(encoding="utf-8"))
        ens_members = [load_checkpoint(out / "merge" / rel).params for rel in meta["members"]]
        n_members = len(ens_members)

    rows = []
    ta_rows = []
    corr_summary = []
    plans_dir = out / "eval" / "plans"
    for target_spec in cfg.targets:
        target = target_spec.name
        val = _read_scenes(_dataset_paths(out, target)[1])
        batch = SceneBatch.from_scenes(val)

        def add_row(method: str, report, plans) -> None:
            rows.append((target, method, report.ade, report.collision_rate,
                         report.fde, report.miss_rate, f"x{report.cost_multiplier:g}"))
            buf = _stdio.BytesIO()
            np.save(buf, plans)
            atomic_write_bytes(plans_dir / f"{target}__{method}.npy", buf.getvalue())

        for method in methods:
            if method in ("ensemble_wta", "ensemble_avg"):
                mode = method.split("_")[1]
                plans = ensemble_plans(planner, ens_members, val, mode)
                report = report_from_plans(plans, batch.ego_future_gt, batch.surr_future_gt,
                                           batch.agent_mask, cost_multiplier=float(n_members))
                add_row(method, report, plans)
                continue
            if method == "task_arithmetic":
                ta_dir = out / "merge" / target / "methods" / "task_arithmetic"
                _require([ta_dir / "candidates.json"], f"run `merge` for {target} first")
                lambdas = json.loads((ta_dir / "candidates.json").read_text())["lambdas"]
                candidates = []
                for i, lam in enumerate(lambdas):
                    params = load_params(ta_dir / f"cand_{i}.ckpt")
                    report, plans = evaluate_with_plans(planner, params, val)
                    candidates.append((float(lam), report, plans))
                best = min(candidates, key=lambda c: c[1].ade)
                for lam, report, _ in candidates:
                    ta_rows.append((target, lam, report.ade,
                                    "selected" if lam == best[0] else ""))
                add_row(method, best[1], best[2])
                continue
            if method == "domain_generalization":
                ckpt_path = out / "merge" / "shared" / "union.ckpt"
            else:
                ckpt_path = _method_ckpt(out, target, method)
            _require([ckpt_path], f"run `merge` for {target} first")
            params = load_params(ckpt_path)
            report, plans = evaluate_with_plans(planner, params, val)
            add_row(method, report, plans)

        # Learned-weight vs zero-shot-similarity correlation for this target.
        weights_json = out / "merge" / target / "weights.json"
        _require([weights_json], f"run `merge` for {target} first")
        wmeta = json.loads(weights_json.read_text(encoding="utf-8"))
        cell_means = np.array([[float(x) for x in row] for row in wmeta["cell_means"]])
        shim = MergeResult(
            params=merge_pool.base, cell_labels=tuple(wmeta["cells"]),
            weight_matrix=cell_means, cell_means=cell_means,
            granularity=Granularity(wmeta["granularity"]),
            weight_history=[], final_train_loss=float(wmeta["final_train_loss"]),
        )
        report = weight_similarity_correlation(planner, shim, merge_pool, val)
        corr_summary.append((target, report.coefficient, str(report.degenerate).lower()))
        write_table(
            out / "eval" / f"{target}.weight_correlation.csv",
            ("domain", "zero_shot_ade", "mean_weight"),
            [(d, a, w) for d, a, w in report.rows],
            comment=f"config={hash_} inputs={inputs} target={target} "
                    f"spearman={fmt_float(report.coefficient)}",
        )

    write_table(out / "eval" / "results.csv", RESULT_HEADER, rows,
                comment=f"config={hash_} inputs={inputs}")
    if ta_rows:
        write_table(out / "eval" / "task_arithmetic_selection.csv",
                    ("target", "lambda", "ade", "selected"), ta_rows,
                    comment=f"config={hash_} inputs={inputs}")
    write_table(out / "eval" / "correlations.csv",
                ("target", "spearman", "degenerate"), corr_summary,
                comment=f"config={hash_} inputs={inputs}")
    print(f"evaluate: wrote {len(rows)} result rows "
          f"(note: each target's validation split doubles as its test split)")


# ---------------------------------------------------------------------- ablate


def _eval_merge(planner, pool, train, val, recipe, finetune_cfg=None):
    result = merge_learned(planner, pool, train, recipe)
    params = result.params
    if finetune_cfg is not None:
        params = finetune(planner, params, train, finetune_cfg)
    return evaluate(planner, params, val)


def stage_ablate(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    target = cfg.ablation_target()
    if dry_run:
        print(f"[dry-run] ablate on {target}: granularities={list(cfg.ablation.granularities)}, "
              f"pool_compositions={cfg.ablation.pool_compositions}, "
              f"intervals={list(cfg.ablation.intervals)}, "
              f"partitions={list(cfg.ablation.group_partitions)}")
        return
    _require([out / "pool" / "manifest.json"], "run `train` first")
    _write_config_echo(cfg, out)
    pool_full, manifest = load_pool(out / "pool")
    planner = Planner(cfg.planner)
    train = _read_scenes(_dataset_paths(out, target)[0])
    val = _read_scenes(_dataset_paths(out, target)[1])
    hash_ = config_hash(cfg)
    inputs = fingerprint_paths(
        out,
        [out / "pool" / "manifest.json",
         _dataset_paths(out, target)[0], _dataset_paths(out, target)[1]],
    )
    comment = f"config={hash_} inputs={inputs} target={target}"
    metric_cols = ("ade", "collision_rate", "fde", "miss_rate")

    if cfg.ablation.granularities:
        base_pool = _merge_pool(cfg, pool_full, manifest)
        rows = []
        for g in cfg.ablation.granularities:
            recipe = replace(_merge_seeded(cfg, "ablate", "granularity", g, target),
                             granularity=Granularity(g))
            r = _eval_merge(planner, base_pool, train, val, recipe)
            rows.append((g, r.ade, r.collision_rate, r.fde, r.miss_rate))
        write_table(out / "ablate" / "granularity.csv",
                    ("granularity",) + metric_cols, rows, comment=comment)
        print(f"ablate: granularity table ({len(rows)} rows)")

    if cfg.ablation.pool_compositions:
        rows = []
        for comp in POOL_COMPOSITION_LADDER:
            pool_c = _merge_pool(cfg, pool_full, manifest, composition=comp)
            for use_ft in (False, True):
                recipe = _merge_seeded(cfg, "ablate", "pool", comp.label(), target)
                ft_cfg = None
                if use_ft:
                    ft_cfg = replace(cfg.finetune_train,
                                     seed=stable_seed(cfg.seed, "ablate", "pool_ft",
                                                      comp.label(), target))
                r = _eval_merge(planner, pool_c, train, val, recipe, ft_cfg)
                rows.append((int(comp.all_metric),
                             "fp" if comp.epoch_forecaster else ("p" if comp.epoch_planner else ""),
                             int(use_ft), r.ade, r.collision_rate, r.fde, r.miss_rate))
        write_table(out / "ablate" / "pool_composition.csv",
                    ("all_metric", "epoch", "finetune") + metric_cols, rows, comment=comment)
        print(f"ablate: pool composition table ({len(rows)} rows)")

    if cfg.ablation.intervals:
        rows = []
        for c in cfg.ablation.intervals:
            pool_c = _merge_pool(cfg, pool_full, manifest, planner_interval=c)
            recipe = _merge_seeded(cfg, "ablate", "interval", c, target)
            r = _eval_merge(planner, pool_c, train, val, recipe)
            rows.append((c, r.ade, r.collision_rate, r.fde, r.miss_rate))
        write_table(out / "ablate" / "interval.csv",
                    ("interval",) + metric_cols, rows, comment=comment)
        print(f"ablate: interval table ({len(rows)} rows)")

    if cfg.ablation.group_partitions:
        base_pool = _merge_pool(cfg, pool_full, manifest)
        rows = []
        for label in cfg.ablation.group_partitions:
            recipe = replace(_merge_seeded(cfg, "ablate", "grouping", label, target),
                             granularity=Granularity.GROUP,
                             group_partition=GROUP_PARTITIONS[label])
            r = _eval_merge(planner, base_pool, train, val, recipe)
            rows.append((label, r.ade, r.collision_rate, r.fde, r.miss_rate))
        write_table(out / "ablate" / "grouping.csv",
                    ("partition",) + metric_cols, rows, comment=comment)
        print(f"ablate: grouping table ({len(rows)} rows)")


# ---------------------------------------------------------------------- report


def _embed_table(path: Path) -> str:
    if not path.exists():
        return "_not run_\n"
    return "```\n" + path.read_text(encoding="utf-8") + "```\n"


def stage_report(cfg: ExperimentConfig, jobs: int = 1, dry_run: bool = False) -> None:
    out = Path(cfg.out_dir)
    if dry_run:
        print(f"[dry-run] report for {out}")
        return
    results_path = out / "eval" / "results.csv"
    _require([results_path], "run `evaluate` first")
    hash_ = config_hash(cfg)

    sections = [
        f"# Benchmark report\n",
        f"- config hash: `{hash_}`",
        f"- global seed: {cfg.seed}",
        f"- sources: {', '.join(s.name for s in cfg.sources)}",
        f"- targets: {', '.join(t.name for t in cfg.targets)}",
        "- protocol note: each target's validation split doubles as its test split.\n",
        "## Results (one row per target and method)\n",
        _embed_table(results_path),
        "## Weight/similarity correlation\n",
        _embed_table(out / "eval" / "correlations.csv"),
    ]
    for target in cfg.targets:
        sections.append(f"### {target.name}\n")
        sections.append(_embed_table(out / "eval" / f"{target.name}.weight_correlation.csv"))
    sections += [
        "## Ablations\n",
        "### Merging granularity\n", _embed_table(out / "ablate" / "granularity.csv"),
        "### Pool composition\n", _embed_table(out / "ablate" / "pool_composition.csv"),
        "### Checkpoint interval\n", _embed_table(out / "ablate" / "interval.csv"),
        "### Module grouping\n", _embed_table(out / "ablate" / "grouping.csv"),
    ]
    atomic_write_text(out / "report" / "report.md", "\n".join(sections))

    def table_or_none(path: Path):
        if not path.exists():
            return None
        comment, header, rows = read_table(path)
        return {"comment": comment, "header": header, "rows": rows}

    bundle = {
        "config_hash": hash_,
        "seed": cfg.seed,
        "config": config_to_json(cfg),
        "results": table_or_none(results_path),
        "correlations": table_or_none(out / "eval" / "correlations.csv"),
        "weight_correlation": {
            t.name: table_or_none(out / "eval" / f"{t.name}.weight_correlation.csv")
            for t in cfg.targets
        },
        "ablations": {
            name: table_or_none(out / "ablate" / f"{name}.csv")
            for name in ("granularity", "pool_composition", "interval", "grouping")
        },
    }
    atomic_write_text(out / "report" / "bundle.json",
                      json.dumps(bundle, indent=1, sort_keys=True) + "\n")
    print(f"report: wrote {out / 'report' / 'report.md'}")
