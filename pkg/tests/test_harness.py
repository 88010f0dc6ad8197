"""Run configuration and INI parsing, content-addressed stages, the MSE/DTW
metrics, a full tiny pipeline end to end (report, tables, idempotence,
cross-directory byte identity), the low-data sweep, and the CLI verbs."""

import json
import xml.etree.ElementTree as ET
from copy import deepcopy
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from sonolearn.cli import main
from sonolearn.harness import (
    ConfigError,
    StageError,
    TaskArrays,
    config_hash,
    dataset_dir,
    ensure_dataset,
    eval_mse,
    load_run_config,
    load_split_arrays,
    low_data_sweep,
    make_config,
    match_channels,
    run_pipeline,
    stage_hash,
    sweep_dataset_behaviors,
    validate_report,
)
from sonolearn.models import oracle_baseline, random_baseline

# small enough to run the whole pipeline in seconds, large enough that every
# stage (two test behaviors, both metrics, all four methods) does real work
TINY = dict(
    tasks=("rattle",), seeds=(0,),
    methods=("probe", "supervised", "random", "oracle"),
    metrics=("mse", "dtw"),
    n_behaviors=8, repeats=2,
    pretrain_epochs=2, pretrain_batch=16,
    supervised_epochs=2, supervised_batch=16,
    probe_max_epochs=300, dtw_repeats=2,
    block_widths=(2, 3, 4, 5), repr_dim=4, proj_dim=3, pred_hidden=6,
    deterministic=True,
)

TINY_INI = """\
[run]
tasks = rattle
methods = probe, supervised, random, oracle
metrics = mse, dtw
seeds = 0

[dataset]
n_behaviors = 8
repeats = 2

[encoder]
block_widths = 2, 3, 4, 5
repr_dim = 4
proj_dim = 3
pred_hidden = 6

[pretrain]
pretrain_epochs = 2
pretrain_batch = 16

[supervised]
supervised_epochs = 2
supervised_batch = 16

[probe]
probe_max_epochs = 300

[eval]
dtw_repeats = 2
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    cfg = make_config(out_dir=str(out), **TINY)
    report, path = run_pipeline(cfg)
    return cfg, report, path


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


# ---- configuration -----------------------------------------------------------


def test_make_config_rejects_unknown_field():
    with pytest.raises(ConfigError, match="unknown config fields"):
        make_config(n_behaviours=10)


def test_make_config_rejects_unknown_scale():
    with pytest.raises(ConfigError, match="scale"):
        make_config(scale="datacenter")


def test_scale_presets():
    desk = make_config()
    assert (desk.n_behaviors, desk.pretrain_epochs, desk.repr_dim) == (200, 100, 64)
    paper = make_config(scale="paper")
    assert (paper.n_behaviors, paper.pretrain_epochs) == (1000, 1000)
    assert (paper.pretrain_batch, paper.repr_dim) == (1024, 512)


@pytest.mark.parametrize("overrides", [
    {"tasks": ("bogus",)},
    {"tasks": ()},
    {"methods": ("psychic",)},
    {"metrics": ("bleu",)},
    {"variant": "SIMCLR"},
    {"train_fraction": 1.0},
    {"dtw_repeats": 1},
    {"seeds": ()},
    {"n_behaviors": 1},
    {"task_overrides": {"bogus": {"repeats": 2}}},
    {"task_overrides": {"rattle": {"pretrain_epochs": 1}}},
])
def test_config_validation_rejects(overrides):
    with pytest.raises(ConfigError):
        make_config(**overrides)


def test_config_hash_ignores_placement_fields():
    a = make_config(out_dir="here", deterministic=True, **{k: v for k, v in TINY.items()
                                                           if k != "deterministic"})
    b = make_config(out_dir="elsewhere", **{k: v for k, v in TINY.items()
                                            if k != "deterministic"})
    assert config_hash(a) == config_hash(b)
    c = make_config(out_dir="here", master_seed=1,
                    **{k: v for k, v in TINY.items() if k != "deterministic"})
    assert config_hash(a) != config_hash(c)


def test_stage_hash_canonicalization():
    assert stage_hash({"a": 1, "b": 2}) == stage_hash({"b": 2, "a": 1})
    assert stage_hash({"a": (1, 2)}) == stage_hash({"a": [1, 2]})
    assert stage_hash({"a": 1}) != stage_hash({"a": 2})
    assert len(stage_hash({})) == 12


# ---- INI files ----------------------------------------------------------------


def test_ini_matches_programmatic_config(tiny_ini):
    cfg = load_run_config(tiny_ini)
    assert cfg.tasks == ("rattle",)
    assert cfg.methods == ("probe", "supervised", "random", "oracle")
    assert cfg.block_widths == (2, 3, 4, 5)
    assert config_hash(cfg) == config_hash(make_config(out_dir="x", **TINY))


def test_ini_task_override_sections(tmp_path):
    path = tmp_path / "over.ini"
    path.write_text("[task.rattle]\nrepeats = 3\n", encoding="utf-8")
    cfg = load_run_config(path)
    assert cfg.task_overrides == {"rattle": {"repeats": 3}}
    assert cfg.task_value("rattle", "repeats") == 3
    assert cfg.task_value("swatter", "repeats") == cfg.repeats


@pytest.mark.parametrize("content,match", [
    ("[danger]\nx = 1\n", "unknown config section"),
    ("[run]\nn_behaviors = 10\n", "unknown key"),
    ("[dataset]\nn_behaviors = lots\n", "bad value"),
    ("[task.rattle]\npretrain_epochs = 5\n", "may only set"),
    ("[task.bogus]\nrepeats = 2\n", "unknown task"),
])
def test_ini_rejects_defects(tmp_path, content, match):
    path = tmp_path / "bad.ini"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError, match=match):
        load_run_config(path)


def test_ini_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_run_config("no/such/config.ini")


# ---- datasets and stage plumbing ----------------------------------------------


def test_dataset_dir_content_addressed():
    cfg = make_config(out_dir="o", **TINY)
    same = make_config(out_dir="o", **TINY)
    noisier = make_config(out_dir="o", **{**TINY, "noise_level": 0.05})
    assert dataset_dir(cfg, "rattle") == dataset_dir(same, "rattle")
    assert dataset_dir(cfg, "rattle") != dataset_dir(noisier, "rattle")


def test_split_arrays_cache_round_trip(tiny_run):
    cfg, _, _ = tiny_run
    ds = ensure_dataset(cfg, "rattle")  # reuses the generated dir
    first = load_split_arrays(ds, "train")
    again = load_split_arrays(ds, "train")  # served from the .npz cache
    assert np.array_equal(first.specs, again.specs)
    assert np.array_equal(first.actions, again.actions)
    assert (ds.root / "specs_train.npz").exists()
    with pytest.raises(ValueError, match="split"):
        load_split_arrays(ds, "validation")


def test_task_arrays_subset():
    arrays = TaskArrays(
        specs=np.arange(8, dtype=np.float32).reshape(4, 1, 2, 1),
        actions=np.arange(8, dtype=np.float64).reshape(4, 2),
        behavior_ids=np.array([0, 0, 1, 2]),
        repeat_idxs=np.array([0, 1, 0, 0]),
        records=["a", "b", "c", "d"],
    )
    sub = arrays.subset({0, 2})
    assert list(sub.behavior_ids) == [0, 0, 2]
    assert sub.records == ["a", "b", "d"]
    assert sub.specs.shape == (3, 1, 2, 1)


def test_match_channels():
    mono = np.random.default_rng(0).normal(size=(3, 1, 4, 5)).astype(np.float32)
    assert match_channels(mono, 1) is mono
    wide = match_channels(mono, 2)
    assert wide.shape == (3, 2, 4, 5)
    assert np.array_equal(wide[:, 0], wide[:, 1])
    with pytest.raises(ValueError, match="adapt"):
        match_channels(wide, 1)


# ---- metrics -------------------------------------------------------------------


def test_eval_mse_oracle_on_its_own_train_set_is_zero():
    train = np.array([[1.0, 0.8, 2.0], [1.5, 1.2, 4.0], [0.7, 1.9, 1.0]])
    model = oracle_baseline(train, np.arange(3), "rattle")
    assert eval_mse(model, None, train) == (0.0, 0.0)


def test_eval_mse_random_matches_expectation():
    a = np.array([1.0, 1.0, 2.0])
    b = np.array([2.0, 1.5, 4.0])
    train = np.stack([a, b])
    gap = float(np.sum((a - b) ** 2))
    total = 0.0
    n_seeds = 400
    for seed in range(n_seeds):
        model = random_baseline(train, "rattle", seed=seed)
        total += eval_mse(model, None, a[None])[0]
    # each draw hits a or b with probability 1/2, so the mean tends to gap/2
    assert total / n_seeds == pytest.approx(gap / 2, rel=0.15)


def test_eval_mse_raw_equals_normalized_without_scaling():
    train = np.array([[1.0, 1.0, 2.0], [2.0, 1.5, 4.0]])
    model = random_baseline(train, "rattle", seed=3)  # rattle stays raw
    raw, norm = eval_mse(model, None, np.array([[1.2, 1.1, 3.0]]))
    assert raw == norm


# ---- the pipeline end to end ----------------------------------------------------


def test_pipeline_report_structure(tiny_run):
    cfg, report, path = tiny_run
    assert path.exists()
    assert report["config_hash"] == config_hash(cfg)
    assert report["deterministic"] is True and report["wall_time_s"] == 0.0
    entry = report["tasks"]["rattle"]
    assert entry["n_test"] == 4  # 2 held-out behaviors x 2 repeats
    assert set(entry["methods"]) == set(TINY["methods"])
    for method, summary in entry["methods"].items():
        assert summary["mse_raw"] >= 0.0
        assert "0" in summary["per_seed"]
        assert np.isfinite(summary["dtw_normalized_mean"])
    # a fresh ground-truth re-simulation scores near zero by construction
    assert abs(entry["ground_truth_dtw"]) < 0.5
    assert entry["methods"]["probe"]["variant"] == "BYOL"


def test_pipeline_rerun_returns_identical_report(tiny_run):
    cfg, report, path = tiny_run
    before = path.read_bytes()
    again, path2 = run_pipeline(cfg)
    assert path2 == path
    assert again == report
    assert path.read_bytes() == before


def test_pipeline_writes_tables_and_charts(tiny_run):
    cfg, report, path = tiny_run
    h = report["config_hash"]
    reports = path.parent
    mse_csv = (reports / f"table-mse-{h}.csv").read_text().splitlines()
    assert mse_csv[0].split(",")[0] == "task"
    assert "probe_mse_raw" in mse_csv[0]
    assert mse_csv[1].startswith("rattle,")
    dtw_csv = (reports / f"table-dtw-{h}.csv").read_text().splitlines()
    assert "ground_truth" in dtw_csv[0]
    for chart in (f"chart-mse-{h}.svg", f"chart-dtw-{h}.svg"):
        root = ET.fromstring((reports / chart).read_text())
        assert root.tag.endswith("svg")


def test_reports_byte_identical_across_directories(tiny_run, tmp_path):
    cfg, _, path = tiny_run
    other = replace(cfg, out_dir=str(tmp_path / "elsewhere"))
    _, path2 = run_pipeline(other)
    assert path2 != path
    assert path2.read_bytes() == path.read_bytes()


def test_stage_error_carries_stage_name(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    cfg = make_config(out_dir=str(blocker), **TINY)
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "gen"
    assert err.value.config_hash == config_hash(cfg)


def test_pipeline_shared_encoder_across_tasks(tmp_path):
    cfg = make_config(
        out_dir=str(tmp_path / "shared"),
        tasks=("rattle", "swatter"), seeds=(0,),
        methods=("probe",), metrics=("mse",),
        n_behaviors=6, repeats=2,
        task_overrides={"swatter": {"n_behaviors": 4}},
        variant="BYOL_ALL",
        pretrain_epochs=2, pretrain_batch=16,
        probe_max_epochs=100,
        block_widths=(2, 3, 4, 5), repr_dim=4, proj_dim=3, pred_hidden=6,
        deterministic=True,
    )
    report, _ = run_pipeline(cfg)
    assert set(report["tasks"]) == {"rattle", "swatter"}
    for entry in report["tasks"].values():
        probe = entry["methods"]["probe"]
        assert probe["variant"] == "BYOL_ALL"
        assert np.isfinite(probe["mse_raw"])


# ---- report validation -----------------------------------------------------------


def _mutations():
    def missing_key(d):
        del d["seeds"]

    def bad_schema(d):
        d["schema"] = "report-v999"

    def tampered_config(d):
        d["config"]["master_seed"] = 99

    def zero_test(d):
        d["tasks"]["rattle"]["n_test"] = 0

    def nan_summary(d):
        d["tasks"]["rattle"]["methods"]["probe"]["mse_raw"] = float("nan")

    def nan_per_seed(d):
        d["tasks"]["rattle"]["methods"]["probe"]["per_seed"]["0"]["mse_raw"] = float("inf")

    def negative_wall(d):
        d["wall_time_s"] = -1.0

    return [missing_key, bad_schema, tampered_config, zero_test,
            nan_summary, nan_per_seed, negative_wall]


@pytest.mark.parametrize("mutate", _mutations())
def test_validate_report_rejects_defects(tiny_run, mutate):
    _, report, _ = tiny_run
    broken = deepcopy(report)
    mutate(broken)
    with pytest.raises(ValueError):
        validate_report(broken)


# ---- low-data sweep ----------------------------------------------------------------


def test_sweep_dataset_behaviors_covers_largest_slice():
    cfg = make_config(out_dir="x", **TINY)
    for max_slice in (4, 50, 137):
        n = sweep_dataset_behaviors(cfg, max_slice)
        assert int(round(cfg.train_fraction * n)) >= max_slice
        assert int(round(cfg.train_fraction * (n - 1))) < max_slice


def test_sweep_rejects_bad_requests(tmp_path):
    cfg = make_config(out_dir=str(tmp_path), **TINY)
    with pytest.raises(ConfigError, match="non-empty"):
        low_data_sweep(cfg, "rattle", slice_sizes=())
    with pytest.raises(ConfigError, match="trainable"):
        low_data_sweep(cfg, "rattle", slice_sizes=(2,), methods=("oracle",))
    shared = replace(cfg, variant="BYOL_ALL")
    with pytest.raises(ConfigError, match="per-task"):
        low_data_sweep(shared, "rattle", slice_sizes=(2,))


def test_sweep_rows_and_full_slice_equivalence(tmp_path):
    cfg = make_config(out_dir=str(tmp_path / "sweep"),
                      **{**TINY, "metrics": ("mse",)})
    rows = low_data_sweep(cfg, "rattle", slice_sizes=(2, 4),
                          methods=("probe", "supervised"), seed=0)
    assert [r["slice"] for r in rows] == [2, 2, 4, 4]
    assert all(np.isfinite(r["mse_raw"]) for r in rows)

    sweep_cfg = replace(cfg, task_overrides={}, n_behaviors=5)
    h = config_hash(sweep_cfg)
    reports = Path(cfg.out_dir) / "reports"
    csv_lines = (reports / f"sweep-rattle-{h}.csv").read_text().splitlines()
    assert csv_lines[0] == "slice,method,mse_raw,mse_normalized"
    assert len(csv_lines) == 5
    root = ET.fromstring((reports / f"sweep-rattle-{h}.svg").read_text())
    assert root.tag.endswith("svg")

    # the largest slice covers the whole train split, so a standard pipeline
    # run over the same dataset must land on exactly the same probe error
    full = replace(sweep_cfg, methods=("probe",))
    report, _ = run_pipeline(full)
    probe_full = report["tasks"]["rattle"]["methods"]["probe"]["per_seed"]["0"]
    probe_sweep = next(r for r in rows if r["slice"] == 4 and r["method"] == "probe")
    assert probe_full["mse_raw"] == probe_sweep["mse_raw"]


# ---- CLI ------------------------------------------------------------------------


def test_cli_eval_reuses_existing_report(tiny_run, tiny_ini, capsys):
    cfg, report, _ = tiny_run
    code = main(["eval", "--config", str(tiny_ini), "--out", cfg.out_dir,
                 "--deterministic"])
    out = capsys.readouterr().out
    assert code == 0
    assert report["config_hash"] in out
    assert "MSE (raw)" in out and "report:" in out


def test_cli_gen_reports_clip_counts(tiny_run, tiny_ini, capsys):
    cfg, _, _ = tiny_run
    code = main(["gen", "--config", str(tiny_ini), "--out", cfg.out_dir])
    assert code == 0
    assert "rattle: 16 clips" in capsys.readouterr().out


def test_cli_report_verb(tiny_run, tmp_path, capsys):
    _, _, path = tiny_run
    assert main(["report", str(path)]) == 0
    assert "MSE (raw)" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["report", str(bad)]) == 2
    assert main(["report", str(tmp_path / "missing.json")]) == 2


def test_cli_config_errors_exit_2(capsys):
    assert main(["eval", "--config", "no/such.ini"]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["gen", "--tasks", "bogus", "--out", "unused"]) == 2


def test_cli_stage_failures_exit_3(tiny_ini, tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    code = main(["eval", "--config", str(tiny_ini), "--out", str(blocker)])
    assert code == 3
    assert "gen" in capsys.readouterr().err
