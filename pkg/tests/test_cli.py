import json
import subprocess
import sys


from lognn_mec.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main
from lognn_mec.lognn import LognnModel, init_model


def _config(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


SMALL_TRAIN = {"epochs": 2, "batch_size": 4, "n_train_samples": 8, "held_out_samples": 4,
               "size_distribution": [[4, 2]]}


def test_gen_data_and_train_are_deterministic(tmp_path, capsys):
    cfg = _config(tmp_path, {"train": SMALL_TRAIN})
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["gen-data", "--config", cfg, "--out", out, "--seed", "3"]) == EXIT_OK
        assert main(["train", "--config", cfg, "--out", out, "--seed", "3"]) == EXIT_OK
    man = [json.loads((tmp_path / n / "manifest.json").read_text()) for n in ("a", "b")]
    assert man[0]["model_hash"] == man[1]["model_hash"]
    data_man = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert data_man["n_instances"] == 8
    rows = (tmp_path / "a" / "train_log.csv").read_text().strip().splitlines()
    assert len(rows) == 3
    LognnModel.load(tmp_path / "a" / "model.json")


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = _config(tmp_path, {"train": {"epochz": 3}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "epochz" in capsys.readouterr().err
    cfg = _config(tmp_path, {"extra": {}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_zero_samples_rejected(tmp_path):
    cfg = _config(tmp_path, {"train": {"n_train_samples": 0}})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_supervised_needs_ga_section(tmp_path, capsys):
    cfg = _config(tmp_path, {"train": {**SMALL_TRAIN, "method": "supervised"}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "[ga]" in capsys.readouterr().err


def test_train_without_dataset(tmp_path):
    cfg = _config(tmp_path, {"train": SMALL_TRAIN})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "nothing")]) == EXIT_VALIDATION


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = _config(tmp_path, {"train": SMALL_TRAIN})
    assert main(["gen-data", "--config", cfg, "--out", str(blocker / "sub")]) == EXIT_IO


def test_sweep_missing_model_names_method(tmp_path, capsys):
    cfg = _config(tmp_path, {"sweep": {"methods": ["lognn", "ga"], "models": {"lognn": str(tmp_path / "none.json")}}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--desk-scale"]) == EXIT_VALIDATION
    assert "lognn" in capsys.readouterr().err


def test_sweep_writes_csv_and_summary(tmp_path, capsys):
    model_path = tmp_path / "m.json"
    init_model(0).save(model_path)
    cfg = _config(tmp_path, {"sweep": {"server_counts": [1, 2], "instances_per_size": 2, "ga_generations": 2,
                                       "ga_population": 10, "methods": ["lognn", "ga", "random"],
                                       "models": {"lognn": str(model_path)}}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    lines = (tmp_path / "o" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "method,M,N,seed,mean_delay,mean_inference_seconds,mean_delay_plus_inference"
    assert len(lines) == 1 + 6
    assert "mean total delay" in capsys.readouterr().out


def test_bench_and_eval(tmp_path, capsys):
    model_path = tmp_path / "m.json"
    init_model(0).save(model_path)
    cfg = _config(tmp_path, {"bench": {"model": str(model_path), "n_servers": 2, "instances": 1,
                                       "repetitions": 3, "ga_generations": 2},
                             "train": SMALL_TRAIN,
                             "eval": {"model": str(model_path), "data_dir": str(tmp_path / "o" / "data")}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "bench.json").read_text())["speedup"] > 0
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    report = json.loads((tmp_path / "o" / "eval.json").read_text())
    assert report["n_instances"] == 8 and report["max_violation"] <= 1e-6


def test_gradcheck_passes_and_reports_number(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out and "max relative error" in out
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_relative_error"] < 1e-4


def test_gradcheck_fails_on_corrupted_rule(tmp_path, capsys, monkeypatch):
    from lognn_mec import autodiff as ad
    original = ad.leaky_relu

    def broken(a, slope=ad.LRELU_SLOPE):
        out = original(a, slope)
        if out.tape is not None:
            node = out.tape.nodes[out.node]
            rule = node.vjp
            node.vjp = lambda g: tuple(1.5 * r for r in rule(g))
        return out

    monkeypatch.setattr(ad, "leaky_relu", broken)
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_NUMERIC
    out = capsys.readouterr().out
    assert "FAIL" in out and "leaky_relu" in out


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "lognn_mec.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
