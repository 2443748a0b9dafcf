import json

import numpy as np
import pytest

from oens.cli import main

FAST = ["--iterations", "30", "--batch-size", "32", "--hidden", "8", "--lr", "0.05", "--log-interval", "10"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def only_json_line(out):
    lines = out.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture
def trained(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout = run(capsys, "train", "--data", "synthetic:clustered", "--method", "smcl", "--members", "3",
                       "--k", "1", "--seed", "2", "--out", str(out), *FAST)
    assert code == 0
    return out, only_json_line(stdout)


def test_train_writes_outputs(trained):
    out, report = trained
    for name in ("ensemble.oens", "history.csv", "record.json"):
        assert (out / name).exists()
    assert len(report["per_member_accuracy"]) == 3
    assert report["oracle_accuracy"] >= max(report["per_member_accuracy"])
    assert (out / "history.csv").read_text().splitlines()[0].startswith("iteration,oracle_loss,member_0_loss")


def test_eval_matches_train_report(trained, capsys):
    out, report = trained
    code, stdout = run(capsys, "eval", "--ensemble", str(out / "ensemble.oens"), "--data", "synthetic:clustered",
                       "--seed", "2")
    assert code == 0
    assert only_json_line(stdout) == report


def test_train_is_deterministic(trained, tmp_path, capsys):
    out, _ = trained
    again = tmp_path / "again"
    run(capsys, "train", "--data", "synthetic:clustered", "--method", "smcl", "--members", "3",
        "--k", "1", "--seed", "2", "--out", str(again), *FAST)
    assert (again / "ensemble.oens").read_bytes() == (out / "ensemble.oens").read_bytes()
    assert (again / "history.csv").read_text() == (out / "history.csv").read_text()


def test_train_from_config_file(tmp_path, capsys):
    cfg = {"dataset": {"generator": "ambiguous", "params": {"input_dim": 4, "mode_count": 2}, "n_train": 300,
                       "n_test": 100, "n_probe": 50},
           "train": {"method": "mcl", "member_count": 2, "total_iterations": 20, "batch_size": 16, "hidden": [4],
                     "mcl_meta_iterations": 2, "log_interval": 10},
           "out": str(tmp_path / "cfgrun")}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, stdout = run(capsys, "train", "--config", str(tmp_path / "c.json"))
    assert code == 0
    assert len(only_json_line(stdout)["per_member_accuracy"]) == 2
    assert (tmp_path / "cfgrun" / "ensemble.oens").exists()


def test_k_larger_than_members_is_config_error(tmp_path, capsys):
    code, stdout = run(capsys, "train", "--data", "synthetic:ambiguous", "--members", "4", "--k", "5",
                       "--out", str(tmp_path / "x"), *FAST)
    assert code == 1 and stdout == ""
    assert not (tmp_path / "x").exists()


def test_unknown_flag_and_missing_command(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1


def test_numerical_abort_exit_code(tmp_path, capsys):
    code, _ = run(capsys, "train", "--data", "synthetic:ambiguous", "--members", "2", "--iterations", "20",
                  "--lr", "1e305", "--out", str(tmp_path / "boom"))
    assert code == 2


def test_csv_train_and_eval(tmp_path, capsys):
    tr, te = tmp_path / "tr.csv", tmp_path / "te.csv"
    assert run(capsys, "gen-data", "--generator", "clustered", "--n", "300", "--input-dim", "5", "--classes", "4",
               "--pairs", "0-1", "--seed", "1", "--out", str(tr))[0] == 0
    assert run(capsys, "gen-data", "--generator", "clustered", "--n", "120", "--input-dim", "5", "--classes", "4",
               "--pairs", "0-1", "--seed", "1", "--split", "test", "--out", str(te))[0] == 0
    stats = json.loads((tmp_path / "tr.csv.stats.json").read_text())
    assert stats["generator"] == "clustered"
    code, stdout = run(capsys, "train", "--data", str(tr), "--test-data", str(te), "--members", "2",
                       "--out", str(tmp_path / "m"), *FAST)
    assert code == 0
    report = only_json_line(stdout)
    code, stdout = run(capsys, "eval", "--ensemble", str(tmp_path / "m" / "ensemble.oens"), "--data", str(tr),
                       "--test-data", str(te))
    assert code == 0 and only_json_line(stdout) == report


def test_eval_dimension_mismatch(trained, capsys):
    out, _ = trained
    code, _ = run(capsys, "eval", "--ensemble", str(out / "ensemble.oens"), "--data", "synthetic:ambiguous")
    assert code == 1


def test_eval_corrupt_checkpoint(trained, tmp_path, capsys):
    out, _ = trained
    blob = bytearray((out / "ensemble.oens").read_bytes())
    blob[0:5] = b"XXXXX"
    bad = tmp_path / "bad.oens"
    bad.write_bytes(bytes(blob))
    assert run(capsys, "eval", "--ensemble", str(bad), "--data", "synthetic:clustered")[0] == 1
    assert run(capsys, "eval", "--ensemble", str(tmp_path / "missing.oens"), "--data", "synthetic:clustered")[0] == 1


def test_single_member_specialization_is_all_hundred(tmp_path, capsys):
    out = tmp_path / "one"
    assert run(capsys, "train", "--data", "synthetic:clustered", "--members", "1", "--out", str(out), *FAST)[0] == 0
    spec_path = tmp_path / "spec.json"
    code, _ = run(capsys, "eval", "--ensemble", str(out / "ensemble.oens"), "--data", "synthetic:clustered",
                  "--specialization", str(spec_path))
    assert code == 0
    rep = json.loads(spec_path.read_text())
    np.testing.assert_array_equal(np.array(rep["winner_distribution"]), 100.0)
    assert rep["specialization_entropy"] == 0.0


def sweep_config(tmp_path, **extra):
    cfg = {"dataset": {"generator": "clustered", "params": {"input_dim": 6, "class_count": 4}, "n_train": 300,
                       "n_test": 100, "n_probe": 50},
           "methods": ["smcl", "independent"], "ensemble_sizes": [1, 2], "replicate_seeds": [0],
           "train": {"total_iterations": 20, "batch_size": 16, "hidden": [4], "log_interval": 10}}
    cfg.update(extra)
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(cfg))
    return path


def test_sweep(tmp_path, capsys):
    out = tmp_path / "sw"
    code, stdout = run(capsys, "sweep", "--config", str(sweep_config(tmp_path)), "--out", str(out))
    assert code == 0
    summary = only_json_line(stdout)
    assert summary["cells"] == 4 and summary["failed"] == []
    rows = (out / "sweep.csv").read_text().split("\n\n")[0].splitlines()
    assert len(rows) == 5


def test_sweep_partial_failure_exit_3(tmp_path, capsys):
    # lr this large overflows every cell
    cfg = sweep_config(tmp_path, train={"total_iterations": 20, "batch_size": 16, "hidden": [4],
                                        "optimizer": {"learning_rate": 1e305}})
    code, stdout = run(capsys, "sweep", "--config", str(cfg), "--out", str(tmp_path / "sw"))
    assert code == 3
    assert len(only_json_line(stdout)["failed"]) == 4
    assert (tmp_path / "sw" / "quarantine.json").exists()


def test_sweep_bad_config(tmp_path, capsys):
    cfg = sweep_config(tmp_path, k_values=[3])
    assert run(capsys, "sweep", "--config", str(cfg))[0] == 1
    assert run(capsys, "sweep", "--config", str(tmp_path / "nope.json"))[0] == 1


def test_gradcheck_command(capsys):
    code, stdout = run(capsys, "gradcheck", "--trials", "5")
    assert code == 0
    result = only_json_line(stdout)
    assert result["trials"] == 5 and result["max_relative_error"] <= 1e-4
    # an impossible tolerance must fail loudly
    assert run(capsys, "gradcheck", "--trials", "2", "--tolerance", "1e-30")[0] == 1


def test_gen_data_ambiguous(tmp_path, capsys):
    code, stdout = run(capsys, "gen-data", "--generator", "ambiguous", "--n", "50", "--input-dim", "3",
                       "--priors", "0.2,0.8", "--out", str(tmp_path / "a.csv"))
    assert code == 0
    assert only_json_line(stdout)["class_count"] == 2
    assert (tmp_path / "a.csv").read_text().splitlines()[0].endswith("label")
