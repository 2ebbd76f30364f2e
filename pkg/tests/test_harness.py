"""Config parsing, artifact emission, aggregation, CLI surface."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from spcl.config import DEFAULT_SEEDS, parse_config, parse_spec
from spcl.errors import ConfigError
from spcl.harness import regenerate_report, run_experiment
from spcl.influence import InfluenceRecord
from spcl.reporting import (
    aggregate_metrics,
    influence_stats,
    write_influence_hist_csv,
)
from spcl.trainer import StepInfluence


def base_doc(out_dir="runs/t"):
    return {
        "stream": {
            "kind": "split_gaussians",
            "num_tasks": 2,
            "classes_per_task": 2,
            "dim": 4,
            "n_train": 24,
            "n_test": 16,
            "separation": 5.0,
            "seed": 3,
        },
        "train": {
            "lr": 0.05,
            "method": "er",
            "setting": "class_incremental",
            "buffer_capacity": 8,
            "epochs_per_task": 3,
            "metasp_last_epochs": 1,
            "batch_size": 8,
            "hidden_dims": [6],
        },
        "seeds": [1231, 1232],
        "out_dir": out_dir,
    }


# ---------------------------------------------------------------------------
# config parsing


def test_missing_required_field_names_it():
    doc = base_doc()
    del doc["train"]["buffer_capacity"]
    with pytest.raises(ConfigError, match="buffer_capacity"):
        parse_spec(doc)


def test_unknown_key_is_error_with_path():
    doc = base_doc()
    doc["train"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="train.momentum"):
        parse_spec(doc)


def test_window_longer_than_epochs_rejected():
    doc = base_doc()
    doc["train"]["metasp_last_epochs"] = 99
    with pytest.raises(ConfigError, match="metasp_last_epochs"):
        parse_spec(doc)


def test_round_trip_identity():
    spec = parse_spec(base_doc())
    again = parse_spec(spec.to_dict())
    assert again == spec


def test_default_seeds_applied():
    doc = base_doc()
    del doc["seeds"]
    spec = parse_spec(doc)
    assert spec.seeds == DEFAULT_SEEDS


def test_parse_config_file_and_json_errors(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base_doc()))
    spec = parse_config(path)
    assert spec.methods == ("er",)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(path)
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.json")


# ---------------------------------------------------------------------------
# experiment artifacts


@pytest.fixture(scope="module")
def experiment_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    doc = base_doc(str(out / "run"))
    doc["methods"] = ["finetune", "metasp"]
    doc["train"]["epochs_per_task"] = 2
    doc["train"]["metasp_last_epochs"] = 1
    spec = parse_spec(doc)
    results = run_experiment(spec)
    return Path(spec.out_dir), results, spec


def test_artifact_files_exist(experiment_dir):
    out, _, spec = experiment_dir
    for method in ("finetune", "metasp"):
        for seed in (1231, 1232):
            seed_dir = out / method / f"seed_{seed}"
            for name in (
                "metrics.csv",
                "metrics.json",
                "acc_matrix.csv",
                "influence_log.csv",
                "influence_hist.csv",
            ):
                assert (seed_dir / name).exists(), f"{method}/{seed}/{name}"
        assert (out / method / "aggregate.csv").exists()
    assert (out / "comparison.csv").exists()
    assert (out / "comparison_pairs.csv").exists()
    assert (out / "metadata.json").exists()
    # rehearsal methods leave one snapshot per task
    assert (out / "metasp" / "seed_1231" / "memory_snapshot_task1.csv").exists()
    assert (out / "metasp" / "seed_1231" / "memory_snapshot_task2.csv").exists()


def test_aggregate_mean_matches_per_seed_mean(experiment_dir):
    _, results, _ = experiment_dir
    per_seed = results["finetune"]
    agg = aggregate_metrics(per_seed)
    assert agg["a_inf_mean"] == pytest.approx(
        np.mean([m.a_inf for m in per_seed]), abs=1e-12
    )
    assert agg["a_inf_std_pop"] == pytest.approx(
        np.std([m.a_inf for m in per_seed]), abs=1e-12
    )


def test_rerun_is_byte_identical_excluding_metadata(tmp_path, experiment_dir):
    out_a, _, spec = experiment_dir
    doc = spec.to_dict()
    doc["out_dir"] = str(tmp_path / "again")
    from spcl.config import parse_spec as ps

    run_experiment(ps(doc))
    out_b = Path(doc["out_dir"])
    for rel in (
        "comparison.csv",
        "comparison_pairs.csv",
        "metasp/aggregate.csv",
        "metasp/seed_1231/metrics.csv",
        "metasp/seed_1231/acc_matrix.csv",
        "metasp/seed_1231/influence_log.csv",
        "metasp/seed_1231/influence_hist.csv",
        "metasp/seed_1231/memory_snapshot_task2.csv",
    ):
        a = (out_a / rel).read_bytes()
        b = (out_b / rel).read_bytes()
        assert a == b, f"{rel} differs across reruns"


def test_csv_headers_fixed(experiment_dir):
    out, _, _ = experiment_dir
    with open(out / "metasp" / "seed_1231" / "influence_log.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["step", "example_id", "task_id", "i_s", "i_p", "i_fused", "gamma_star"]
    with open(out / "metasp" / "seed_1231" / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:6] == ["method", "seed", "a1", "a_inf", "a_m", "bwt"]


def test_report_regenerates_and_renders_figures(experiment_dir):
    out, _, _ = experiment_dir
    rows = regenerate_report(out, figures=True)
    assert len(rows) == 2
    assert (out / "comparison_metrics.png").exists()
    assert (out / "accuracy_curves.png").exists()
    assert (out / "influence_hist_metasp.png").exists()


# ---------------------------------------------------------------------------
# influence statistics


def make_step(step, uids, task_ids, i_s, i_p, i_f, gamma=0.5):
    rec = InfluenceRecord(
        i_s=np.asarray(i_s, dtype=float),
        i_p=np.asarray(i_p, dtype=float),
        i_fused=np.asarray(i_f, dtype=float),
        gamma_star=gamma,
        batch_example_ids=np.asarray(uids),
        batch_task_ids=np.asarray(task_ids),
    )
    return StepInfluence(step=step, record=rec)


def test_all_negative_influences_have_zero_positive_counts():
    steps = [make_step(0, [1, 2], [1, 2], [-1, -2], [-3, -4], [-2, -3])]
    hist = influence_stats(steps)
    stats = hist.per_task[2]
    for group in ("old", "new"):
        for metric in ("s", "p", "sp"):
            assert stats.counts.get((metric, group, "pos"), 0) == 0


def test_uniform_spread_one_per_bin():
    steps = [
        make_step(0, [1, 2, 3, 4, 5], [2] * 5, [0] * 5, [0] * 5, [-2, -1, 0, 1, 2])
    ]
    hist = influence_stats(steps)
    assert hist.per_task[2].bin_counts == [1, 1, 1, 1, 1]


def test_expectation_aggregates_before_binning():
    steps = [
        make_step(0, [7], [2], [1.0], [0.0], [4.0]),
        make_step(1, [7], [2], [-3.0], [0.0], [-2.0]),
    ]
    hist = influence_stats(steps)
    stats = hist.per_task[2]
    # E[i_s] = -1 (negative), E[i_fused] = 1 (positive)
    assert stats.counts.get(("s", "new", "neg"), 0) == 1
    assert stats.counts.get(("sp", "new", "pos"), 0) == 1


def test_empty_logs_flagged():
    hist = influence_stats([])
    assert hist.empty


def test_hist_csv_written(tmp_path):
    steps = [make_step(0, [1, 2], [1, 2], [-1, 1], [1, -1], [-1, 1])]
    path = tmp_path / "hist.csv"
    write_influence_hist_csv(path, influence_stats(steps))
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "task"
    assert len(rows) == 2


# ---------------------------------------------------------------------------
# CLI


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "spcl.cli", *args],
        capture_output=True,
        text=True,
        timeout=600,
    )


def test_cli_run_and_exit_codes(tmp_path):
    cfg = tmp_path / "c.json"
    doc = base_doc(str(tmp_path / "out"))
    doc["seeds"] = [1231]
    cfg.write_text(json.dumps(doc))
    proc = run_cli("run", "--config", str(cfg))
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / "er" / "seed_1231" / "metrics.json").exists()

    # override flags redirect output and select method/seed
    proc = run_cli(
        "run", "--config", str(cfg), "--method", "finetune", "--seed", "1232",
        "--out", str(tmp_path / "out2"), "--epochs", "2",
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out2" / "finetune" / "seed_1232" / "metrics.json").exists()

    doc_bad = base_doc(str(tmp_path / "out3"))
    doc_bad["train"]["method"] = "nope"
    cfg.write_text(json.dumps(doc_bad))
    proc = run_cli("run", "--config", str(cfg))
    assert proc.returncode == 2
    assert "method" in proc.stderr


def test_cli_report_verb(tmp_path):
    cfg = tmp_path / "c.json"
    doc = base_doc(str(tmp_path / "out"))
    doc["seeds"] = [1231]
    cfg.write_text(json.dumps(doc))
    assert run_cli("run", "--config", str(cfg)).returncode == 0
    proc = run_cli("report", "--out", str(tmp_path / "out"), "--no-figures")
    assert proc.returncode == 0, proc.stderr
    proc = run_cli("report", "--out", str(tmp_path / "missing"))
    assert proc.returncode == 2


def test_cli_gradcheck_small():
    proc = run_cli("gradcheck", "--pairs", "2", "--influence-instances", "1")
    assert proc.returncode == 0, proc.stderr
    assert "gradient_vs_fd" in proc.stdout


def test_exception_exit_code_taxonomy():
    from spcl.errors import ConfigError, NumericError, OracleError, SpclError

    assert ConfigError("x").exit_code == 2
    assert NumericError("x").exit_code == 3
    assert OracleError("x").exit_code == 4
    assert SpclError("x").exit_code == 1
