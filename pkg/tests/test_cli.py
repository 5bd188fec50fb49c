import csv
import hashlib
import os

import numpy as np
import pytest
import yaml

from fastgrant import cli, ingest, metrics

SMALL = {"traffic": {"devices": 300, "run_time": 4.0}}


@pytest.fixture
def config(tmp_path):
    def make(extra=None, name="cfg.yaml"):
        data = cli.merge(cli.DEFAULTS, SMALL)
        data = cli.merge(data, extra or {})
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data))
        return str(path)
    return make


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(directory):
    out = {}
    for p in sorted(directory.iterdir()):
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_traffic_files(tmp_path, config):
    out = tmp_path / "t"
    assert run("traffic", "--config", config(), "-o", out) == 0
    names = {p.name for p in out.iterdir()}
    assert {f"phase_{k}.csv" for k in ("startup", "data", "alarm", "silent")} <= names
    assert "trace.csv" in names and "run_traffic.json" in names
    assert len([n for n in names if n.startswith("phase_")]) == 4


def test_processes_flag(tmp_path, config):
    out = tmp_path / "m"
    assert run("traffic", "--config", config(), "-o", out, "--processes", 4) == 0
    from fastgrant.traffic import TrafficTrace
    assert len(TrafficTrace.load(out / "trace.npz").config.processes) == 4


def test_unwritable_output(tmp_path, config, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("traffic", "--config", config(), "-o", blocker / "sub") == 2
    assert str(blocker / "sub") in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("traffic:\n  devicez: 3\n")
    assert run("traffic", "--config", path, "-o", tmp_path / "o") == 2


def _report_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("flags", [[], ["--kernel", "poly", "--degree", "6"]])
def test_classify_report_consistent(tmp_path, config, flags):
    out = tmp_path / "c"
    assert run("classify", "--config", config({"traffic": {"devices": 500}}), "-o", out, *flags) == 0
    rows = _report_rows(out / "classification.csv")
    assert [r["class"] for r in rows] == ["data", "alarm"]
    cm = metrics.ConfusionMatrix(np.array([[int(r["pred_data"]), int(r["pred_alarm"])] for r in rows]))
    rep = metrics.classification_report(cm)
    for k, r in enumerate(rows):
        assert float(r["f1"]) == pytest.approx(rep.f1[k], abs=5e-5)
        assert float(r["precision"]) == pytest.approx(rep.precision[k], abs=5e-5)
    model = (out / "svm_model.txt").read_text()
    assert ("kernel polynomial" in model) == bool(flags)
    if flags:
        assert "degree 6" in model


def test_rerun_is_byte_identical(tmp_path, config):
    c = config()
    for d in ("a", "b"):
        assert run("traffic", "--config", c, "-o", tmp_path / d) == 0
        assert run("classify", "--config", c, "-o", tmp_path / d) == 0
    a, b = digest(tmp_path / "a"), digest(tmp_path / "b")
    assert a == b


def test_sweep_cardinality_and_report(tmp_path, config, capsys):
    out = tmp_path / "s"
    c = config({"sweep": {"seeds": [0]}, "traffic": {"run_time": 2.0}})
    assert run("sweep", "--config", c, "-o", out) == 0
    rows = _report_rows(out / "summary.csv")
    assert len(rows) == 4 * 5 * 1
    assert all(float(r["collisions"]) == 0 for r in rows if r["policy"] == "fug")
    assert (out / "total_bytes.dat").exists() and (out / "mean_delay_ms.gp").exists()
    assert run("report", "--config", c, "-o", out) == 0
    assert "gbra" in capsys.readouterr().out


def test_flag_beats_config(tmp_path, config):
    c = config({"sweep": {"seeds": [0], "resources": [10, 25]}, "traffic": {"run_time": 1.0}})
    out = tmp_path / "f"
    assert run("sweep", "--config", c, "-o", out, "--resources", "10", "--policies", "genie,gbra") == 0
    rows = _report_rows(out / "summary.csv")
    assert {(r["policy"], r["resources"]) for r in rows} == {("genie", "10"), ("gbra", "10")}


def test_report_confusion(tmp_path, capsys):
    assert run("report", "-o", tmp_path, "--confusion", "474,70,14,99") == 0
    text = capsys.readouterr().out
    assert "f1 0.92" in text and "f1 0.70" in text


def test_report_without_sweep(tmp_path):
    assert run("report", "-o", tmp_path) == 1


def test_predict_missing_nab(tmp_path):
    assert run("predict", "-o", tmp_path, "--nab-file", tmp_path / "absent.csv") == 1


def test_predict_on_activity_file(tmp_path, config):
    bits = np.tile([1, 1, 0, 0, 0, 0], 60)
    ingest.write_activity(tmp_path / "act.csv", ingest.ActivitySeries.observed(bits))
    extra = {"predictor": {"source": "activity", "activity_file": str(tmp_path / "act.csv"), "train_days": 1,
                           "hidden": [4], "epochs": 3, "unroll": 12}}
    c = config(extra)
    assert run("predict", "--config", c, "-o", tmp_path / "p1", "--iterations", 1) == 0
    lines = (tmp_path / "p1" / "forecasts.csv").read_text().splitlines()
    assert len(lines) == 1 + 2
    assert run("predict", "--config", c, "-o", tmp_path / "p2") == 0
    assert run("predict", "--config", c, "-o", tmp_path / "p3") == 0
    assert len((tmp_path / "p2" / "forecasts.csv").read_text().splitlines()) == 1 + 4 * 2
    assert digest(tmp_path / "p2") == digest(tmp_path / "p3")
