import json

import pytest

from apc.cli import main
from apc.manifest import comparable


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--K", "20", "--clusters", "2", "--users", "60", "--T", "8",
                 "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "models"),
                 "--epochs", "2", "--dim", "8"]) == 0
    return root


def run_err(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr().err.strip().splitlines()


def test_synth_and_train_outputs(workspace):
    data, models = workspace / "data", workspace / "models"
    for f in ("catalog.json", "train.bin", "valid.json", "test.json", "world.json", "manifest.json"):
        assert (data / f).is_file()
    for f in ("f_R.bin", "f_R.bin.json", "f_A.bin", "f_A.bin.json", "manifest.json"):
        assert (models / f).is_file()
    man = json.loads((models / "manifest.json").read_text())
    assert man["config"]["train"]["epochs"] == 2 and man["inputs"]["data"]["sha256"]


def test_evaluate_is_byte_identical(workspace, capsys):
    outs = []
    for name in ("e1", "e2"):
        out = workspace / name
        assert main(["evaluate", "--data", str(workspace / "data"), "--models", str(workspace / "models"),
                     "--out", str(out), "--n-prime", "15", "--alpha", "0.5"]) == 0
        outs.append(out)
    assert "+APC" in capsys.readouterr().out
    a, b = ((o / "report.csv").read_bytes() for o in outs)
    assert a == b
    m1, m2 = (comparable(json.loads((o / "manifest.json").read_text())) for o in outs)
    assert m1 == m2
    report = json.loads((outs[0] / "report.json").read_text())
    assert len(report["per_user"]) == 60


def test_evaluate_with_noisy_oracle(workspace):
    out = workspace / "oracle"
    assert main(["evaluate", "--data", str(workspace / "data"), "--models", str(workspace / "models"),
                 "--out", str(out), "--oracle-world", str(workspace / "data" / "world.json"),
                 "--sigma", "0.3", "--all-candidates", "--negatives", "full", "--n-prime", "15"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert "oracle_world" in man["inputs"] and man["config"]["sigma"] == 0.3


def test_evaluate_refuses_other_catalog(workspace, tmp_path, capsys):
    main(["synth", "--K", "20", "--clusters", "2", "--users", "61", "--T", "8", "--out", str(tmp_path / "d")])
    code, err = run_err(["evaluate", "--data", str(tmp_path / "d"), "--models", str(workspace / "models"),
                         "--out", str(tmp_path / "e")], capsys)
    assert code == 1 and len(err) == 1 and err[0].startswith("apc: error: ContractError:")


def test_sweep_grid(workspace, capsys):
    out = workspace / "sweep"
    assert main(["sweep", "--data", str(workspace / "data"), "--models", str(workspace / "models"),
                 "--out", str(out), "--eta", "0.5,1,2,3", "--n-prime", "15"]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("eta,n_prime,") and len(lines) == 5
    assert (out / "best_test.csv").is_file() and (out / "manifest.json").is_file()


def test_correct_with_trace(workspace):
    out = workspace / "corr"
    assert main(["correct", "--data", str(workspace / "data"), "--models", str(workspace / "models"),
                 "--out", str(out), "--trace", "--n-prime", "12", "--n", "5"]) == 0
    recs = [json.loads(x) for x in (out / "corrections.jsonl").read_text().splitlines()]
    traces = [json.loads(x) for x in (out / "trace.jsonl").read_text().splitlines()]
    assert len(recs) == len(traces) == 60
    assert all(len(r["recommendations"]) == 5 for r in recs)
    assert {"loss_trajectory", "baseline_loss", "initial_scores"} <= set(traces[0])


def test_config_file_precedence(workspace, tmp_path):
    ini = tmp_path / "apc.ini"
    ini.write_text("[train]\nepochs = 1\ndim = 8\nlr = 0.01\n\n[correct]\nalpha = 0.2\neta = 2\n")
    out = tmp_path / "m"
    assert main(["train", "--config", str(ini), "--data", str(workspace / "data"), "--out", str(out),
                 "--lr", "0.02", "--role", "abductive"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]["train"]
    assert (cfg["epochs"], cfg["lr"], cfg["dropout"]) == (1, 0.02, 0.2)
    assert (out / "f_A.bin").is_file() and not (out / "f_R.bin").exists()
    ev = tmp_path / "e"
    assert main(["evaluate", "--config", str(ini), "--data", str(workspace / "data"),
                 "--models", str(workspace / "models"), "--out", str(ev), "--eta", "3", "--n-prime", "12"]) == 0
    cfg = json.loads((ev / "manifest.json").read_text())["config"]["correct"]
    assert (cfg["alpha"], cfg["eta"], cfg["n_prime"]) == (0.2, 3.0, 12)


def test_config_errors(workspace, tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nepoch = 3\n")
    code, err = run_err(["train", "--config", str(ini), "--data", str(workspace / "data"),
                         "--out", str(tmp_path / "m")], capsys)
    assert code == 1 and err == ["apc: error: ConfigError: unknown key 'epoch' in [train]"]
    code, err = run_err(["evaluate", "--data", str(workspace / "data"), "--models", str(workspace / "models"),
                         "--out", str(tmp_path / "x"), "--eta", "-1"], capsys)
    assert code == 1 and err == ["apc: error: ConfigError: eta must be positive"]


def test_bad_flags_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_prepare_ml(tmp_path):
    lines = [f"{u}::{i}::4::{1000 * u + i}" for u in range(1, 7) for i in range(1, 7)]
    lines.insert(3, "garbage")
    src = tmp_path / "ratings.dat"
    src.write_text("\n".join(lines) + "\n")
    out = tmp_path / "ds"
    assert main(["prepare", "--input", str(src), "--format", "ml", "--k-core", "5",
                 "--max-len", "50", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["stats"] == {"records": 36, "skipped": 1, "kept": 36, "users": 6, "items": 6}
    assert man["config"]["k_core"] == 5


def test_missing_input_is_runtime_error(tmp_path, capsys):
    code, err = run_err(["prepare", "--input", str(tmp_path / "nope"), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and len(err) == 1 and err[0].startswith("apc: error: FileNotFoundError")


def test_selftest_passes(capsys):
    assert main(["selftest", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out
