import csv
import json

import pytest

from sslab import runner
from sslab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, parse_config_file
from sslab.report import ReportError, build_report

TINY = ["--emb-dim", "8", "--hidden-dim", "8", "--batch-size", "8", "--max-updates", "6", "--warmup-updates", "3",
        "--fisher-samples", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--task", "lexswap", "--n", "60", "--seed", "7", "--length-min", "2",
                 "--length-max", "5", "--vocab-size", "8", "--out", str(out)]) == EXIT_OK
    return out


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _train(data, runs, *extra):
    return main(["train", "--data", str(data), "--runs", str(runs)] + TINY + list(extra))


def test_gen_data_writes_splits_and_manifest(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["gen-data", "--task", "lexswap", "--n", "5000", "--seed", "7", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["split_sizes"] == [4500, 250, 250]
    assert manifest["generator"]["seed"] == 7
    assert {f.name for f in out.iterdir()} == {"train.txt", "valid.txt", "test.txt", "manifest.json"}
    assert capsys.readouterr().out.strip() == str(out)


def test_train_eval_attribute_report(data, tmp_path, capsys):
    runs = tmp_path / "runs"
    assert _train(data, runs, "--objective", "ss-ewc", "--schedule", "sigmoid", "--k", "10",
                  "--lambda", "0.5") == EXIT_OK
    run = capsys.readouterr().out.strip()
    manifest = runner.read_manifest(run)
    assert manifest["status"] == "complete" and manifest["config"]["lam"] == 0.5
    assert manifest["config"]["schedule"] == "inverse-sigmoid"
    history = _csv(f"{run}/history.csv")
    assert [int(r["update"]) for r in history] == list(range(1, 7))
    assert list(history[0]) == ["update", "p", "loss", "ewc_penalty"]

    assert main(["eval", "--run", run, "--mode", "tf"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].split(",") == list(runner.EVAL_COLUMNS) and len(out) == 2
    assert out[1].split(",")[6] == "TF"

    assert main(["eval", "--run", run]) == EXIT_OK
    capsys.readouterr()
    assert main(["attribute", "--run", run, "--positions", "1-3", "--max-pairs", "5"]) == EXIT_OK
    curve = capsys.readouterr().out.splitlines()
    assert curve[0] == ",".join(runner.CURVE_COLUMNS)
    assert float(curve[1].split(",")[1]) == pytest.approx(1.0)

    # an ss run at lambda 0 with the same k gives the table 3 baseline
    assert _train(data, runs, "--objective", "ss", "--schedule", "sigmoid", "--k", "10") == EXIT_OK
    ss_run = capsys.readouterr().out.strip()
    assert main(["eval", "--run", ss_run]) == EXIT_OK
    capsys.readouterr()
    report = tmp_path / "report"
    assert main(["report", "--runs", str(runs), "--out", str(report)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "lam" in text or "lambda" in text
    t3 = _csv(report / "table3_ewc_vs_ss.csv")
    assert len(t3) == 1 and float(t3[0]["mp_delta_ss"]) == pytest.approx(
        float(t3[0]["mp_ss_ewc"]) - float(t3[0]["mp_ss"]))
    t1 = _csv(report / "table1_bleu.csv")
    assert all(r["n_seeds"] == "1" and r["mp_bleu_std"] == "" for r in t1)
    t2 = _csv(report / "table2_forgetting.csv")
    for r in t2:
        assert float(r["delta"]) == pytest.approx(float(r["tf_bleu"]) - float(r["mp_bleu"]))

    before = {p.name: p.read_bytes() for p in report.iterdir()}
    build_report([runs], report)
    assert {p.name: p.read_bytes() for p in report.iterdir()} == before


def test_training_is_cached_by_config(data, tmp_path, capsys):
    runs = tmp_path / "runs"
    assert _train(data, runs) == EXIT_OK
    first = capsys.readouterr().out.strip()
    stamp = runner.read_manifest(first)["finished"]
    assert _train(data, runs) == EXIT_OK
    assert capsys.readouterr().out.strip() == first
    assert runner.read_manifest(first)["finished"] == stamp
    assert _train(data, runs, "--seed", "1") == EXIT_OK
    assert capsys.readouterr().out.strip() != first


def test_report_aggregates_seeds(data, tmp_path, capsys):
    runs = tmp_path / "runs"
    for seed in ("0", "1", "2"):
        assert _train(data, runs, "--seed", seed) == EXIT_OK
        assert main(["eval", "--run", capsys.readouterr().out.strip().splitlines()[-1], "--mode", "mp"]) == EXIT_OK
    rep = build_report([runs], tmp_path / "rep")
    rows = _csv(rep["table1"])
    assert len(rows) == 1 and rows[0]["n_seeds"] == "3" and rows[0]["mp_bleu_std"] != ""


def test_report_rejects_mixed_corpora_and_empty_roots(data, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["gen-data", "--task", "copy", "--n", "40", "--length-min", "2", "--length-max", "4",
                 "--vocab-size", "6", "--out", str(other)]) == EXIT_OK
    runs = tmp_path / "runs"
    for d in (data, other):
        assert _train(d, runs) == EXIT_OK
        assert main(["eval", "--run", capsys.readouterr().out.strip().splitlines()[-1]]) == EXIT_OK
    with pytest.raises(ReportError, match="different corpora"):
        build_report([runs], tmp_path / "rep")
    assert main(["report", "--runs", str(runs), "--out", str(tmp_path / "rep")]) == EXIT_USAGE
    with pytest.raises(ReportError):
        build_report([tmp_path / "nothing"], tmp_path / "rep2")


def test_sweep_one_cell_and_rerun_is_byte_identical(data, tmp_path, capsys):
    args = ["sweep", "--data", str(data), "--schedules", "inverse-sigmoid", "--k-grid", "2", "--lambda-grid", "0",
            "--seeds", "0"] + TINY
    assert main(args + ["--runs", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--runs", str(tmp_path / "b"), "--jobs", "2"]) == EXIT_OK
    rows = _csv(tmp_path / "a" / "sweep.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert list(rows[0]) == list(runner.SWEEP_COLUMNS)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_records_failed_cells(data, tmp_path, capsys):
    args = ["sweep", "--data", str(data), "--runs", str(tmp_path), "--schedules", "linear", "--k-grid", "0.5",
            "--lambda-grid", "0", "--seeds", "0", "--optimizer", "sgd", "--lr", "1e300", "--clip", "1e300"]
    args += TINY + ["--max-updates", "50"]
    assert main(args) == EXIT_OK
    rows = _csv(tmp_path / "sweep.csv")
    assert len(rows) == 1 and rows[0]["status"].startswith("failed")
    assert "failed" in capsys.readouterr().err


def test_config_file_precedence(data, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nobjective = ss\nk = 4\nlambda = 0.25\nlayers = none\n", encoding="utf-8")
    assert parse_config_file(cfg)["k"] == 4.0
    runs = tmp_path / "runs"
    assert _train(data, runs, "--config", str(cfg), "--k", "6") == EXIT_OK
    manifest = runner.read_manifest(capsys.readouterr().out.strip())
    assert manifest["config"]["objective"] == "ss" and manifest["config"]["k"] == 6.0
    bad = tmp_path / "bad.cfg"
    bad.write_text("objective = ss\nthis line is wrong\n", encoding="utf-8")
    assert _train(data, runs, "--config", str(bad)) == EXIT_USAGE
    assert "bad.cfg:2" in capsys.readouterr().err


def test_exit_codes(data, tmp_path, capsys):
    assert main(["train", "--data", str(data), "--bogus-flag"]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing")]) == EXIT_USAGE
    assert _train(data, tmp_path, "--objective", "ss", "--schedule", "exponential", "--k", "3") == EXIT_USAGE
    assert main(["eval", "--run", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert _train(data, tmp_path) == EXIT_OK
    run = capsys.readouterr().out.strip()
    (tmp_path / run / "checkpoint.sslb").write_bytes(b"garbage")
    assert main(["eval", "--run", run]) == EXIT_RUNTIME
    assert "failed" in capsys.readouterr().err
