import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dktlab import cli


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    lines = path.read_text().splitlines()
    header = [l for l in lines if l.startswith("#")]
    body = [l for l in lines if not l.startswith("#")]
    return header, list(csv.DictReader(body))


def test_train_writes_checkpoint_and_trace(tmp_path, capsys):
    code = run("train", "--experiment", "sine-regression", "--method", "dkt", "--kernel", "spectral",
               "--iterations", 100, "--seed", 1, "--out", tmp_path, "--trace")
    assert code == 0
    assert (tmp_path / "checkpoint.ckpt").exists()
    header, rows = read_csv(tmp_path / "trace.csv")
    assert len(rows) == 100 and list(rows[0]) == ["iteration", "loss"]
    assert any("config" in h for h in header) and any("seeds 1" in h for h in header)
    out = capsys.readouterr().out
    assert "final_loss=" in out and "wall_time_s=" in out


def test_unknown_kernel_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--kernel", "nosuch")
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(k in err for k in ("rbf", "spectral", "bncossim"))


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kernel": "rbf", "learning_rate": 3}))
    assert run("train", "--config", cfg, "--out", tmp_path) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_training_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--kernel", "rbf", "--iterations", 30, "--seed", 4, "--out", tmp_path / d) == 0
    assert (tmp_path / "a/checkpoint.ckpt").read_bytes() == (tmp_path / "b/checkpoint.ckpt").read_bytes()


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DKTLAB_SEED", "7")
    assert run("train", "--kernel", "rbf", "--iterations", 5, "--out", tmp_path, "--trace") == 0
    header, _ = read_csv(tmp_path / "trace.csv")
    assert "# seeds 7" in header
    monkeypatch.setenv("DKTLAB_SEED", "seven")
    assert run("train", "--kernel", "rbf", "--iterations", 5, "--out", tmp_path) == 2


def test_training_abort_exit_code(tmp_path, monkeypatch):
    def boom(config, seed):
        raise cli.TrainingAborted("too many skipped steps")
    monkeypatch.setattr(cli, "train_model", boom)
    assert run("train", "--iterations", 5, "--out", tmp_path) == 1


@pytest.fixture(scope="module")
def sine_checkpoints(tmp_path_factory):
    d = tmp_path_factory.mktemp("sine")
    for name, iters in (("untrained", 0), ("trained", 1500)):
        assert run("train", "--kernel", "spectral", "--iterations", iters, "--seed", 0,
                   "--checkpoint", d / f"{name}.ckpt", "--out", d) == 0
    return d


def test_eval_three_seeds_and_predictions(sine_checkpoints, tmp_path):
    pred = tmp_path / "pred.csv"
    assert run("eval", "--kernel", "spectral", "--checkpoint", sine_checkpoints / "trained.ckpt",
               "--seeds", 0, 1, 2, "--n-tasks", 20, "--out", tmp_path, "--predictions", pred) == 0
    header, rows = read_csv(tmp_path / "results.csv")
    assert list(rows[0]) == ["method", "kernel", "mode", "mse_mean", "mse_std", "runs"]
    per_seed = [float(r["mse_mean"]) for r in rows if r["runs"] == "1"]
    agg = rows[-1]
    assert len(per_seed) == 3 and agg["runs"] == "3"
    assert float(agg["mse_mean"]) == pytest.approx(np.mean(per_seed), rel=1e-15)
    assert float(agg["mse_std"]) == pytest.approx(np.std(per_seed), rel=1e-12)
    assert any(h.startswith("# dktlab") for h in header)
    _, prows = read_csv(pred)
    assert len(prows) == 200 and list(prows[0]) == ["x", "mean", "variance", "truth"]


def test_training_beats_untrained_model(sine_checkpoints, tmp_path):
    scores = {}
    for name in ("untrained", "trained"):
        out = tmp_path / name
        assert run("eval", "--kernel", "spectral", "--checkpoint", sine_checkpoints / f"{name}.ckpt",
                   "--n-tasks", 50, "--out", out) == 0
        scores[name] = float(read_csv(out / "results.csv")[1][-1]["mse_mean"])
    assert scores["untrained"] > scores["trained"]


def test_eval_rejects_mismatched_checkpoint(sine_checkpoints, tmp_path):
    assert run("eval", "--experiment", "synth-classification", "--kernel", "bncossim",
               "--checkpoint", sine_checkpoints / "trained.ckpt", "--out", tmp_path) == 2
    assert run("eval", "--kernel", "spectral", "--out", tmp_path) == 2


def test_tasks_file_round_trip_through_eval(sine_checkpoints, tmp_path):
    tasks = tmp_path / "tasks.txt"
    assert run("dump-tasks", "--n-tasks", 5, "--seed", 3, "--file", tasks, "--out", tmp_path) == 0
    assert tasks.read_text().startswith("# dktlab")
    results = []
    for args in (("--tasks-file", tasks), ()):
        out = tmp_path / ("file" if args else "sampled")
        assert run("eval", "--kernel", "spectral", "--checkpoint", sine_checkpoints / "trained.ckpt",
                   "--seed", 3, "--n-tasks", 5, "--out", out, *args) == 0
        results.append(read_csv(out / "results.csv")[1][-1]["mse_mean"])
    assert results[0] == results[1]


def test_dk_baseline_eval_needs_no_checkpoint(tmp_path):
    assert run("eval", "--method", "dk-baseline", "--kernel", "rbf", "--n-tasks", 2, "--dk-budget", 5,
               "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "results.csv")
    assert rows[-1]["method"] == "dk-baseline"


def test_gradcheck_passes_and_is_deterministic(capsys):
    assert run("gradcheck", "--seed", 3) == 0
    first = capsys.readouterr().out
    assert run("gradcheck", "--seed", 3) == 0
    assert capsys.readouterr().out == first
    lines = first.strip().splitlines()
    assert all(l.startswith("PASS") and "max_rel_err=" in l for l in lines[:-1])
    assert any("dkt-classification/bncossim" in l for l in lines)


def test_calibrate_report(tmp_path, capsys):
    ckpt = tmp_path / "cls.ckpt"
    assert run("train", "--experiment", "synth-classification", "--kernel", "bncossim", "--iterations", 200,
               "--checkpoint", ckpt, "--out", tmp_path) == 0
    capsys.readouterr()
    assert run("calibrate", "--experiment", "synth-classification", "--kernel", "bncossim",
               "--checkpoint", ckpt, "--n-tasks", 100, "--out", tmp_path) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["seeds_disjoint"] is True and report["calibration_seed"] != report["test_seed"]
    assert report["bin_count"] == 15
    assert report["nll_after"] <= report["nll_before"] + 1e-12
    assert report["ece_calibration_split_calibrated"] <= report["ece_calibration_split_T1"]
    assert json.loads((tmp_path / "calibration.json").read_text()) == report


def test_calibrate_rejects_regression(sine_checkpoints, tmp_path):
    assert run("calibrate", "--checkpoint", sine_checkpoints / "trained.ckpt", "--out", tmp_path) == 2


def test_classification_eval_uses_accuracy_columns(tmp_path):
    ckpt = tmp_path / "cls.ckpt"
    assert run("train", "--experiment", "synth-classification", "--kernel", "rbf", "--iterations", 20,
               "--checkpoint", ckpt, "--out", tmp_path) == 0
    assert run("eval", "--experiment", "synth-classification", "--kernel", "rbf", "--checkpoint", ckpt,
               "--n-tasks", 10, "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "results.csv")
    assert "acc_mean" in rows[0] and rows[0]["mode"] == "5way1shot"
    assert 0.0 <= float(rows[0]["acc_mean"]) <= 1.0


def test_benchmark_writes_grid(tmp_path):
    assert run("benchmark", "--iterations", 10, "--n-tasks", 2, "--dk-budget", 2, "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "benchmark.csv")
    assert len(rows) == 2 * len(cli.BENCHMARK_GRID)
    assert {r["method"] for r in rows} == {"dkt", "feature-transfer/1", "feature-transfer/100", "dk-baseline"}


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dktlab.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("dkt-lab ")
