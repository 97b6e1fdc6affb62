"""End-to-end pipeline tests on a miniature configuration."""

import hashlib
import io
import json
from contextlib import redirect_stdout
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from planmerge.checkpoints import load_checkpoint, load_params, load_pool
from planmerge.cli import main
from planmerge.domains import DomainSpec, Regime
from planmerge.experiment import (
    AblationAxes,
    BaselineToggles,
    ExperimentConfig,
    config_from_json,
    config_hash,
    config_to_json,
    default_config,
    enabled_methods,
    load_config,
    resolve_config,
    stage_evaluate,
    stage_merge,
    stage_simulate,
    stage_train,
)
from planmerge.io import read_table
from planmerge.merging import MergeOptConfig, MergeRecipe
from planmerge.metrics import ade, collision_rate, fde, miss_rate
from planmerge.net import Planner
from planmerge.scenes import scenes_from_jsonl
from planmerge.training import TrainConfig

METHOD_SET = (
    "domain_generalization", "domain_adaptation", "target_only",
    "ensemble_wta", "ensemble_avg", "averaging", "task_arithmetic",
    "ties_merging", "learned_merge", "learned_merge_finetune",
)


def tiny_config(out: Path, seed: int = 3) -> ExperimentConfig:
    sources = (
        DomainSpec("src_a", Regime.RECIPROCAL_AVOID, n_agents=(2, 3), speed=(0.8, 1.2),
                   n_scenes=44, noise_sigma=0.01, val_fraction=0.25),
        DomainSpec("src_b", Regime.MUTUAL_YIELD, n_agents=(1, 3), speed=(0.5, 0.9),
                   interaction_gain=1.6, n_scenes=44, noise_sigma=0.01, val_fraction=0.25),
        DomainSpec("src_c", Regime.OUTDOOR_FAST, n_agents=(1, 3), speed=(0.9, 1.3),
                   n_scenes=44, noise_sigma=0.01, val_fraction=0.25),
    )
    targets = (
        DomainSpec("tgt_y", Regime.MUTUAL_YIELD, n_agents=(1, 3), speed=(0.5, 0.8),
                   interaction_gain=1.5, n_scenes=36, noise_sigma=0.01, val_fraction=0.25),
    )
    return resolve_config(ExperimentConfig(
        seed=seed, out_dir=str(out), sources=sources, targets=targets,
        forecaster_train=TrainConfig(total_epochs=4, interval=2, batch_size=32),
        planner_train=TrainConfig(total_epochs=6, interval=2, batch_size=32),
        union_train=TrainConfig(total_epochs=3, batch_size=32),
        finetune_train=TrainConfig(total_epochs=4, batch_size=32),
        merge=MergeRecipe(opt=MergeOptConfig(epochs=4, batch_size=16)),
        ta_lambdas=(0.05, 0.2, 0.5),
        ablation=AblationAxes(intervals=(2, 3, 6)),
    ))


def run_cli(config_path, command, out=None, extra=()):
    argv = [command, "--config", str(config_path)]
    if out is not None:
        argv += ["--out", str(out)]
    argv += list(extra)
    return main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full tiny-config pipeline run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    config_path = out / "cfg.json"
    config_path.write_text(json.dumps(config_to_json(cfg)))
    with redirect_stdout(io.StringIO()):
        for command in ("simulate", "train", "merge", "evaluate", "ablate", "report"):
            assert run_cli(config_path, command) == 0
    return cfg, out


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    again = resolve_config(config_from_json(config_to_json(cfg)))
    assert config_to_json(again) == config_to_json(cfg)
    assert config_hash(again) == config_hash(cfg)
    relocated = resolve_config(cfg, out_dir=str(tmp_path / "elsewhere"))
    assert config_hash(relocated) == config_hash(cfg)
    reseeded = resolve_config(cfg, seed=cfg.seed + 1)
    assert config_hash(reseeded) != config_hash(cfg)


def test_config_validation_rejects_overlapping_domains(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(Exception):
        replace(cfg, targets=cfg.sources[:1])


def test_default_config_matches_spec_defaults():
    cfg = default_config()
    assert len(cfg.sources) == 5 and len(cfg.targets) == 2
    assert cfg.planner_train.interval == 5
    assert 5 in cfg.ablation.intervals
    assert cfg.merge.opt.epochs == 30 and cfg.merge.opt.learning_rate == 1e-3
    assert cfg.merge.lam == 1.0
    assert cfg.ablation_target() == cfg.targets[0].name
    regimes = {s.regime for s in cfg.sources}
    assert len(regimes) >= 3  # target-like and target-unlike sources present


def test_results_table_schema_and_cost_column(pipeline):
    cfg, out = pipeline
    comment, header, rows = read_table(out / "eval" / "results.csv")
    assert header == ["target", "method", "ade", "collision_rate", "fde", "miss_rate", "cost"]
    assert f"config={config_hash(cfg)}" in comment
    methods = [r[1] for r in rows]
    assert methods == list(METHOD_SET)
    by_method = {r[1]: r for r in rows}
    assert by_method["ensemble_wta"][-1] == f"x{len(cfg.sources)}"
    assert by_method["ensemble_avg"][-1] == f"x{len(cfg.sources)}"
    for m in METHOD_SET:
        if not m.startswith("ensemble"):
            assert by_method[m][-1] == "x1"


def test_metrics_recomputable_from_persisted_plans(pipeline):
    cfg, out = pipeline
    _, _, rows = read_table(out / "eval" / "results.csv")
    val = scenes_from_jsonl((out / "datasets" / "tgt_y.val.jsonl").read_text())
    gts = np.stack([s.ego_future_gt for s in val])
    surr = np.stack([s.surr_future_gt for s in val])
    masks = np.stack([s.agent_mask for s in val])
    from planmerge.io import fmt_float

    for target, method, ade_s, cr_s, fde_s, mr_s, _ in rows:
        plans = np.load(out / "eval" / "plans" / f"{target}__{method}.npy")
        assert fmt_float(ade(plans, gts)) == ade_s
        assert fmt_float(collision_rate(plans, surr, masks)) == cr_s
        assert fmt_float(fde(plans, gts)) == fde_s
        assert fmt_float(miss_rate(plans, gts)) == mr_s


def test_pool_manifest_recount_and_traces(pipeline):
    cfg, out = pipeline
    pool, manifest = load_pool(out / "pool")
    files = sorted((out / "pool" / "entries").glob("*.ckpt"))
    assert len(files) == pool.size == len(manifest["entries"])
    # The pool never contains a checkpoint from a target domain.
    assert set(pool.domains()) == {s.name for s in cfg.sources}
    for entry in manifest["entries"]:
        ckpt = load_checkpoint(out / "pool" / entry["path"])
        assert ckpt.domain_id == entry["domain_id"]
    for spec in cfg.sources:
        for stage_name in ("forecaster", "planner"):
            _, header, rows = read_table(out / "pool" / "traces" / f"{spec.name}.{stage_name}.csv")
            assert header == ["epoch", "loss", "ade", "fde", "collision_rate", "miss_rate"]
            expected = (cfg.forecaster_train if stage_name == "forecaster"
                        else cfg.planner_train).total_epochs
            assert len(rows) == expected
    # Best-metric checkpoints agree with the persisted traces.
    from planmerge.checkpoints import Reason, Stage

    for spec in cfg.sources:
        _, _, rows = read_table(out / "pool" / "traces" / f"{spec.name}.planner.csv")
        best_ade = min(float(r[2]) for r in rows)
        entry = next(e for e in pool.entries
                     if e.domain_id == spec.name and e.reason is Reason.BEST_ADE
                     and e.stage is Stage.PLANNER)
        assert entry.metrics.ade == best_ade


def test_weight_table_row_count_is_pool_size(pipeline):
    cfg, out = pipeline
    _, header, rows = read_table(out / "merge" / "tgt_y" / "weights.csv")
    wmeta = json.loads((out / "merge" / "tgt_y" / "weights.json").read_text())
    assert header[:5] == ["ckpt", "domain", "stage", "reason", "epoch"]
    assert header[5:] == wmeta["cells"] == ["fore", "ego", "surr", "inter", "else"]
    assert len(rows) == len(wmeta["entries"])


def test_ablation_tables_have_expected_shapes(pipeline):
    cfg, out = pipeline
    _, _, rows = read_table(out / "ablate" / "granularity.csv")
    assert len(rows) == 3
    assert {r[0] for r in rows} == {"model", "parameter", "group"}
    _, header, rows = read_table(out / "ablate" / "pool_composition.csv")
    assert len(rows) == 8
    assert header[:3] == ["all_metric", "epoch", "finetune"]
    assert [r[2] for r in rows] == ["0", "1"] * 4
    _, _, rows = read_table(out / "ablate" / "interval.csv")
    assert [int(r[0]) for r in rows] == [2, 3, 6]
    _, _, rows = read_table(out / "ablate" / "grouping.csv")
    assert [r[0] for r in rows] == ["ego+surr", "surr+inter", "inter+ego", "separate"]


def test_report_embeds_hash_and_correlation_verbatim(pipeline):
    cfg, out = pipeline
    report = (out / "report" / "report.md").read_text()
    assert config_hash(cfg) in report
    assert "validation split doubles as its test split" in report
    corr_text = (out / "eval" / "tgt_y.weight_correlation.csv").read_text()
    assert corr_text in report
    bundle = json.loads((out / "report" / "bundle.json").read_text())
    assert bundle["config_hash"] == config_hash(cfg)
    assert bundle["results"]["header"][0] == "target"


def test_report_marks_missing_ablations_not_run(tmp_path):
    out = tmp_path / "norun"
    cfg = tiny_config(out, seed=5)
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps(config_to_json(cfg)))
    with redirect_stdout(io.StringIO()):
        for command in ("simulate", "train", "merge", "evaluate", "report"):
            assert run_cli(config_path, command) == 0
    assert "_not run_" in (out / "report" / "report.md").read_text()


def test_simulate_is_idempotent(pipeline):
    cfg, out = pipeline
    before = (out / "datasets" / "src_a.train.jsonl").read_bytes()
    with redirect_stdout(io.StringIO()):
        stage_simulate(cfg)
    assert (out / "datasets" / "src_a.train.jsonl").read_bytes() == before
    n_files = len(list((out / "datasets").glob("*.jsonl")))
    assert n_files == 2 * (len(cfg.sources) + len(cfg.targets))


def test_end_to_end_determinism_across_directories(tmp_path):
    digests = []
    for name in ("one", "two"):
        out = tmp_path / name
        cfg = tiny_config(out, seed=9)
        with redirect_stdout(io.StringIO()):
            stage_simulate(cfg)
            stage_train(cfg)
            stage_merge(cfg)
            stage_evaluate(cfg)
        blob = b"".join(
            (out / rel).read_bytes()
            for rel in ("eval/results.csv", "merge/tgt_y/weights.csv",
                        "eval/correlations.csv"))
        digests.append(hashlib.sha256(blob).hexdigest())
    assert digests[0] == digests[1]


def test_seed_changes_results(tmp_path):
    tables = []
    for seed in (1, 2):
        out = tmp_path / f"s{seed}"
        cfg = tiny_config(out, seed=seed)
        with redirect_stdout(io.StringIO()):
            stage_simulate(cfg)
            stage_train(cfg)
            stage_merge(cfg)
            stage_evaluate(cfg)
        _, _, rows = read_table(out / "eval" / "results.csv")
        tables.append(rows)
    assert tables[0] != tables[1]


def test_training_and_merging_never_read_target_validation(tmp_path):
    """Poisoning the target validation file must not change train/merge outputs."""
    outs = []
    for name, poison in (("clean", False), ("poisoned", True)):
        out = tmp_path / name
        cfg = tiny_config(out, seed=13)
        with redirect_stdout(io.StringIO()):
            stage_simulate(cfg)
            if poison:
                val_path = out / "datasets" / "tgt_y.val.jsonl"
                garbage = scenes_from_jsonl(val_path.read_text())
                for s in garbage:
                    s.ego_future_gt = s.ego_future_gt + 1e6
                from planmerge.scenes import scenes_to_jsonl

                val_path.write_text(scenes_to_jsonl(garbage))
            stage_train(cfg)
            stage_merge(cfg)
        blob = b"".join(sorted_bytes(out))
        outs.append(hashlib.sha256(blob).hexdigest())
    assert outs[0] == outs[1]


def sorted_bytes(out: Path):
    for p in sorted((out / "merge").rglob("*.ckpt")) + [out / "pool" / "manifest.json"]:
        yield p.read_bytes()


def test_dry_run_writes_nothing_and_prints_schedule(tmp_path, capsys):
    out = tmp_path / "dry"
    cfg = tiny_config(out)
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps(config_to_json(cfg)))
    assert run_cli(config_path, "train", extra=["--dry-run"]) == 0
    captured = capsys.readouterr().out
    assert "snapshots at" in captured
    assert "K=6" in captured and "harvest=1" in captured  # gcd(2, 2, 3, 6) = 1
    assert not out.exists()
    assert run_cli(config_path, "simulate", extra=["--dry-run"]) == 0
    assert not out.exists()


def test_missing_artifacts_give_machine_parsable_error(tmp_path, capsys):
    out = tmp_path / "none"
    cfg = tiny_config(out)
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps(config_to_json(cfg)))
    code = run_cli(config_path, "evaluate")
    captured = capsys.readouterr()
    assert code == 1
    err = json.loads(captured.err.strip().splitlines()[-1])
    assert err["error"] == "StateError"
    assert "missing" in err["message"]


def test_bad_config_file_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert main(["simulate", "--config", str(bad)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "InputError"


def test_disabling_all_baselines_leaves_single_merged_model(tmp_path):
    out = tmp_path / "solo"
    cfg = tiny_config(out, seed=21)
    cfg = replace(cfg, baselines=BaselineToggles(
        target_only=False, domain_generalization=False, domain_adaptation=False,
        ensemble_wta=False, ensemble_avg=False, averaging=False,
        task_arithmetic=False, ties_merging=False, merge_finetune=False))
    assert enabled_methods(cfg) == ["learned_merge"]
    with redirect_stdout(io.StringIO()):
        stage_simulate(cfg)
        stage_train(cfg)
        stage_merge(cfg)
        stage_evaluate(cfg)
    ckpts = list((out / "merge" / "tgt_y" / "methods").glob("**/*.ckpt"))
    assert [p.name for p in ckpts] == ["learned_merge.ckpt"]
    _, _, rows = read_table(out / "eval" / "results.csv")
    assert [r[1] for r in rows] == ["learned_merge"]


def test_jobs_parallelism_matches_sequential(tmp_path):
    digests = []
    for jobs, name in ((1, "seq"), (2, "par")):
        out = tmp_path / name
        cfg = tiny_config(out, seed=17)
        with redirect_stdout(io.StringIO()):
            stage_simulate(cfg, jobs=jobs)
            stage_train(cfg, jobs=jobs)
        blob = (out / "pool" / "manifest.json").read_bytes() + b"".join(
            p.read_bytes() for p in sorted((out / "pool" / "entries").glob("*.ckpt")))
        digests.append(hashlib.sha256(blob).hexdigest())
    assert digests[0] == digests[1]


def test_task_arithmetic_selection_table(pipeline):
    cfg, out = pipeline
    _, header, rows = read_table(out / "eval" / "task_arithmetic_selection.csv")
    assert header == ["target", "lambda", "ade", "selected"]
    assert len(rows) == len(cfg.ta_lambdas)
    selected = [r for r in rows if r[3] == "selected"]
    assert len(selected) == 1
    best = min(rows, key=lambda r: float(r[2]))
    assert best[3] == "selected"
