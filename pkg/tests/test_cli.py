"""End-to-end command behavior: artifacts, manifests, exit codes."""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from pairspec import cli, tasklab


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def chain_config(out=None, seed=1):
    doc = {
        "seed": seed,
        "task": {"kind": "chain"},
        "model": {"hidden": [16, 16], "head": {"kind": "linear", "dim": 4}},
        "loss": {"spectral": 1.0, "population": True},
        "train": {"steps": 250, "batch": 64, "lr": 0.02},
    }
    if out is not None:
        doc["out"] = str(out)
    return doc


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipe")
    cfg = write_config(base / "cfg.json", chain_config())
    outs = [base / name for name in ("run_a", "run_b", "run_c")]
    codes = [
        cli.main(["run", "--config", cfg, "--out", str(outs[0])]),
        cli.main(["run", "--config", cfg, "--out", str(outs[1])]),
        cli.main(["run", "--config", cfg, "--out", str(outs[2]),
                  "--threads", "4"]),
    ]
    return cfg, outs, codes


def manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


def test_run_exits_zero(pipeline):
    _, _, codes = pipeline
    assert codes == [0, 0, 0]


def test_run_emits_all_stage_files(pipeline):
    _, outs, _ = pipeline
    names = set(manifest(outs[0])["files"])
    expected = {
        "task/task.json", "task/marginal.png",
        "exact/kernel.csv", "exact/kernel.bin", "exact/sym.csv",
        "exact/transition.csv", "exact/eigenfunctions.csv",
        "exact/eigenvalues.csv", "exact/marginal.csv",
        "exact/eigenfunctions.png",
        "train/checkpoint.bin", "train/curve.csv", "train/curve.png",
        "train/learned_kernel.csv",
        "kpca/variances.csv", "kpca/projections.csv",
        "align/alignment.csv", "align/alignment.png",
        "align/lambda_disc.csv", "align/lambda_disc.png",
    }
    assert names == expected


def test_manifest_hashes_match_file_contents(pipeline):
    _, outs, _ = pipeline
    doc = manifest(outs[0])
    assert doc["schema_version"] == 1
    assert doc["seed"] == 1
    for rel, digest in doc["files"].items():
        data = (outs[0] / rel).read_bytes()
        assert hashlib.sha256(data).hexdigest() == digest, rel


def test_eigenvalues_csv_leads_with_exact_one(pipeline):
    _, outs, _ = pipeline
    lines = (outs[0] / "exact" / "eigenvalues.csv").read_text().splitlines()
    assert lines[0] == "0,1.0"
    assert lines[1] == "1,0.5"


def test_kernel_csv_is_the_exact_kernel(pipeline):
    _, outs, _ = pipeline
    rows = [
        [float(v) for v in line.split(",")]
        for line in (outs[0] / "exact" / "kernel.csv").read_text().splitlines()
    ]
    assert rows == [[2.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 2.0]]


def test_repeat_run_is_byte_identical(pipeline):
    _, outs, _ = pipeline
    assert manifest(outs[0]) == manifest(outs[1])


def test_thread_count_does_not_change_outputs(pipeline):
    _, outs, _ = pipeline
    assert manifest(outs[0]) == manifest(outs[2])


def test_training_reached_the_population_floor(pipeline):
    _, outs, _ = pipeline
    last = (outs[0] / "train" / "curve.csv").read_text().splitlines()[-1]
    total = float(last.split(",")[1])
    assert abs(total - (-1.25)) < 0.02


def test_seed_override_changes_manifest(pipeline, tmp_path):
    cfg, outs, _ = pipeline
    out = tmp_path / "seeded"
    assert cli.main(["exact", "--config", cfg, "--out", str(out),
                     "--seed", "77"]) == 0
    doc = manifest(out)
    assert doc["seed"] == 77
    assert doc["config_sha256"] != manifest(outs[0])["config_sha256"]
    # The exact spectrum of the fixed chain task does not depend on the seed.
    ref = manifest(outs[0])["files"]["exact/eigenvalues.csv"]
    assert doc["files"]["exact/eigenvalues.csv"] == ref


def test_unknown_config_key_exits_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json",
                       {"task": {"kind": "chain", "bogus": 1}})
    code = cli.main(["exact", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    assert "task.bogus" in capsys.readouterr().err


def test_negative_batch_exits_two(tmp_path):
    cfg = write_config(
        tmp_path / "bad.json",
        {"task": {"kind": "chain"}, "train": {"batch": -4}},
    )
    assert cli.main(["run", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file_exits_two(tmp_path):
    assert cli.main(["exact", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")]) == 2


def test_domain_failure_exits_three_with_stage_name(tmp_path, capsys):
    cfg = write_config(
        tmp_path / "sprite.json",
        {
            "task": {"kind": "sprites", "grid": 3, "sprites_per_class": 1,
                     "copies": 2, "k": 4},
            "model": {"head": {"kind": "linear", "dim": 2}},
            "train": {"steps": 1, "batch": 8},
        },
    )
    code = cli.main(["run", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 3
    assert "stage exact" in capsys.readouterr().err


def test_train_without_model_exits_two(tmp_path):
    cfg = write_config(tmp_path / "nomodel.json", {"task": {"kind": "chain"}})
    assert cli.main(["train", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2


def test_bad_threads_value_exits_two(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", chain_config())
    assert cli.main(["exact", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--threads", "zero"]) == 2
    assert cli.main(["exact", "--config", cfg, "--out", str(tmp_path / "o"),
                     "--threads", "0"]) == 2


def test_threads_env_var_is_honored(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "cfg.json", chain_config())
    monkeypatch.setenv("PAIRSPEC_THREADS", "not-a-number")
    assert cli.main(["exact", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2
    monkeypatch.setenv("PAIRSPEC_THREADS", "2")
    assert cli.main(["exact", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 0


def test_exact_subcommand_needs_no_model(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", {"task": {"kind": "chain"}})
    out = tmp_path / "o"
    assert cli.main(["exact", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "exact" / "transition.csv").exists()


def test_align_after_train_reuses_checkpoint_and_lists_kpca(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", chain_config(seed=3))
    out = tmp_path / "o"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["align", "--config", cfg, "--out", str(out)]) == 0
    doc = manifest(out)
    assert {"kpca/variances.csv", "align/alignment.csv"} <= set(doc["files"])
    # A trained spectral-linear model recovers the top variance near 1.
    first = (out / "kpca" / "variances.csv").read_text().splitlines()[0]
    assert abs(float(first.split(",")[1]) - 1.0) < 0.05


def test_nystrom_block_written_below_full_fraction(tmp_path):
    doc = {
        "task": {"kind": "chain"},
        "spectra": {"landmark_fraction": 0.67},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["kpca", "--config", cfg, "--out", str(out)]) == 0
    ny = json.loads((out / "kpca" / "nystrom.json").read_text())
    assert len(ny["landmarks"]) == 2
    # Two landmark columns span the rank-2 kernel, so the map is exact.
    assert ny["relative_error"] < 1e-8


def test_kpca_on_multiset_task_samples_views(tmp_path):
    doc = {
        "seed": 4,
        "task": {"kind": "sprites", "grid": 3, "sprites_per_class": 1,
                 "copies": 2, "k": 4},
        "spectra": {"top": 3, "samples_per_latent": 30},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["kpca", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "kpca" / "variances.csv").read_text().splitlines()
    # The pair kernel factors through the two latents, so rank caps at 2.
    assert len(lines) == 2
    assert abs(float(lines[0].split(",")[1]) - 1.0) < 0.35


def test_downstream_on_labeled_task(tmp_path):
    task = tasklab.FiniteTask(
        p_z=np.array([0.5, 0.5]),
        views=tasklab.EnumeratedViews(
            4,
            features=np.array([[0.0], [1.0], [2.0], [3.0]]),
            grid_shape=None,
        ),
        cond=np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.25, 0.75]]),
        labels=np.array([0, 1]),
    )
    task_path = tmp_path / "task.json"
    tasklab.save_task_json(task_path, task)
    doc = {
        "seed": 5,
        "task": {"kind": "file", "path": str(task_path)},
        "analysis": {"downstream": {"n_train": 64, "n_val": 32, "n_test": 128}},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["downstream", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "downstream.json").read_text())
    # Disconnected components put the class indicators in the top eigenspace.
    assert rep["test_top1_error"] == 0.0


def test_downstream_without_labels_exits_two(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", {"task": {"kind": "chain"}})
    assert cli.main(["downstream", "--config", cfg,
                     "--out", str(tmp_path / "o")]) == 2


def test_minimax_subcommand_hand_value(tmp_path):
    doc = {
        "task": {"kind": "chain"},
        "analysis": {"minimax": {"d": 2, "epsilon": 2.0, "challengers": 25}},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["minimax", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "minimax.json").read_text())
    assert abs(rep["eigen_worst_case"] - 1.0) < 1e-9
    assert rep["theoretical"] == 1.0
    assert rep["eigen_beats_all"] is True


def test_verify_minima_subcommand(tmp_path):
    doc = {
        "task": {"kind": "chain"},
        "analysis": {"minima": {"perturbations": 20, "scale": 0.3}},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["verify-minima", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "minima.json").read_text())
    assert set(rep) == {"xent", "logistic", "spectral"}
    assert all(rep[k]["minimizer_wins"] for k in rep)
    assert rep["xent"]["scale_invariant"] is True
    assert rep["spectral"]["scale_invariant"] is False


def test_bound_subcommand(tmp_path):
    doc = {
        "task": {"kind": "chain"},
        "analysis": {"bound": {"coeffs": [1.0, 0.0, 0.5], "d": 2,
                               "radius": 2.0, "n": 100, "trials": 10}},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["bound", "--config", cfg, "--out", str(out)]) == 0
    rep = json.loads((out / "bound.json").read_text())
    assert rep["epsilon"] == 0.5
    assert rep["bound_rhs"] == 1.3
    assert rep["holds"] is True


def test_chain_subcommand_trajectories(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", {"task": {"kind": "chain"}})
    out = tmp_path / "o"
    assert cli.main(["chain", "--config", cfg, "--out", str(out),
                     "--chains", "3", "--steps", "10"]) == 0
    lines = (out / "chain" / "trajectories.csv").read_text().splitlines()
    assert len(lines) == 3 * 11
    first = lines[0].split(",")
    assert first[0] == "0" and first[1] == "0"
    # The first function is the constant eigenfunction on every visited view.
    assert all(abs(float(l.split(",")[3]) - 1.0) < 1e-12 for l in lines)


def test_neuralef_subcommand_writes_estimates(tmp_path):
    doc = {
        "task": {"kind": "chain"},
        "neuralef": {"n_outputs": 2, "hidden": [8], "steps": 40,
                     "batch": 128, "lr": 0.005},
    }
    cfg = write_config(tmp_path / "cfg.json", doc)
    out = tmp_path / "o"
    assert cli.main(["neuralef", "--config", cfg, "--out", str(out)]) == 0
    est = (out / "neuralef" / "eigenvalue_estimates.csv").read_text()
    assert len(est.splitlines()) == 2
    assert (out / "neuralef" / "functions.csv").exists()
    assert (out / "neuralef" / "alignment.png").exists()


def test_installed_script_maps_exit_codes(tmp_path):
    cfg = write_config(tmp_path / "bad.json", {"task": {"kind": "nope"}})
    proc = subprocess.run(
        [sys.executable, "-m", "pairspec.cli", "exact",
         "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "config error" in proc.stderr
    assert "task.kind" in proc.stderr
