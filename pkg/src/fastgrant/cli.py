"""Experiment runner: ``fastgrant {traffic,classify,predict,sweep,report}``.

Every parameter can come from a YAML config file (``--config``); command
line flags override it. Exit codes: 0 success, 1 runtime failure, 2 bad
configuration.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import ingest, lstm, metrics, predictor, scheduler, svm, traffic

log = logging.getLogger("fastgrant")

DEFAULTS = {
    "seed": 0,
    "output": "runs/default",
    "traffic": {
        "devices": 1000,
        "area": 1000.0,
        "run_time": 60.0,
        "slot_duration": 1e-3,
        "processes": 1,
        "lambda_data": 1.0 / 3600.0,
        "lambda_alarm": 1.0,
        "data_bytes": 100,
        "alarm_bytes": 1000,
    },
    "classifier": {
        "kernel": "rbf",
        "sigma": 0.15,
        "degree": 3,
        "C": 10.0,
        "test_fraction": 0.3,
        "max_ratio": 3.0,
    },
    "predictor": {
        "source": "nab",
        "nab_file": None,
        "activity_file": None,
        "k": 1.5,
        "train_days": 60,
        "T_p": 2,
        "dT": 1,
        "iterations": 4,
        "hidden": [32, 16],
        "dropout": 0.2,
        "epochs": 50,
        "refit_epochs": 2,
        "unroll": 50,
        "batch_size": 64,
        "learning_rate": 1e-3,
    },
    "scheduler": {
        "exploration_rate": 0.1,
        "reserved_fraction": 0.1,
        "margin_slots": 20,
        "preambles": 54,
        "backoff_window": 20,
        "handshake_slots": 4,
        "snr_db": 10.0,
        "symbols_per_slot": 15000,
    },
    "sweep": {
        "policies": ["fug", "genie", "random", "gbra"],
        "resources": [10, 25, 50, 75, 100],
        "seeds": [0, 1, 2],
        "miss_rate": 11 / 171,
        "false_active_ratio": 41 / 171,
        "jobs": 1,
    },
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            out[key] = merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return merge(DEFAULTS, data)


def _experiment(cfg: dict) -> dict:
    """The config minus where results are written; reruns elsewhere stay comparable."""
    return {k: v for k, v in cfg.items() if k != "output"}


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_experiment(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def prepare_output(cfg: dict) -> Path:
    out = Path(cfg["output"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def write_run_log(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    entry = {
        "command": command,
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "config": _experiment(cfg),
        "versions": {"fastgrant": __version__, "python": platform.python_version(), "numpy": np.__version__},
    }
    entry.update(extra or {})
    (out / f"run_{command}.json").write_text(json.dumps(entry, indent=2, sort_keys=True, default=str) + "\n")


# -- building blocks shared by commands and tests ------------------------------


def traffic_config(cfg: dict, seed: int, processes: int | None = None) -> traffic.TrafficConfig:
    t = cfg["traffic"]
    return traffic.scenario(
        processes=t["processes"] if processes is None else processes,
        seed=seed,
        device_count=int(t["devices"]),
        area=float(t["area"]),
        run_time=float(t["run_time"]),
        slot_duration=float(t["slot_duration"]),
        lambda_data=float(t["lambda_data"]),
        lambda_alarm=float(t["lambda_alarm"]),
        data_packet_bytes=int(t["data_bytes"]),
        alarm_packet_bytes=int(t["alarm_bytes"]),
    )


def kernel_spec(c: dict) -> svm.KernelSpec:
    kind = {"poly": "polynomial"}.get(c["kernel"], c["kernel"])
    return svm.KernelSpec(kind, float(c["sigma"]), int(c["degree"]))


def device_classification(trace: traffic.TrafficTrace, c: dict, seed: int):
    """Train the device-class SVM on a stratified split of one trace.

    Returns (model, test confusion matrix, training seconds, labels for every device).
    """
    X = svm.normalize_positions(trace.x, trace.y, trace.config.area)
    z = np.where(trace.coordinated, 1, -1)
    if np.unique(z).size < 2:
        raise ValueError("degenerate dataset: every device has the same class")
    rng = np.random.default_rng([seed, 0x5E7])
    tr_idx, te_idx = svm.stratified_split(z, float(c["test_fraction"]), rng)
    Xb, zb = svm.undersample(X[tr_idx], z[tr_idx], float(c["max_ratio"]), rng)
    t0 = time.perf_counter()
    res = svm.train_smo(Xb, zb, float(c["C"]), kernel_spec(c))
    elapsed = time.perf_counter() - t0
    pred = svm.classify(res.model, X[te_idx])
    cm = metrics.ConfusionMatrix.from_labels(z[te_idx] > 0, pred > 0)
    labels = (svm.classify(res.model, X) > 0).astype(np.uint8)
    return res.model, cm, elapsed, labels


def _sweep_seed(cfg: dict, seed: int) -> list:
    trace = traffic.simulate(traffic_config(cfg, seed))
    _, _, _, labels = device_classification(trace, cfg["classifier"], seed)
    sw = cfg["sweep"]
    preds = scheduler.Predictions.surrogate(trace, float(sw["miss_rate"]), float(sw["false_active_ratio"]),
                                            np.random.default_rng([seed, 0x9E5]), labels)
    rows = []
    sc = cfg["scheduler"]
    for R in sw["resources"]:
        for pol in sw["policies"]:
            scfg = scheduler.SchedulerConfig(resources=int(R), policy=pol, seed=seed, **sc)
            run = scheduler.run_policy(trace, scfg, preds if pol == "fug" else None)
            row = run.summary(seed)
            row["false_active"] = run.false_active
            row["false_silent"] = run.false_silent
            rows.append(row)
    return rows


def run_sweep(cfg: dict) -> list:
    """One summary row per (seed, resources, policy)."""
    sw = cfg["sweep"]
    if not sw["policies"] or not sw["resources"] or not sw["seeds"]:
        raise ConfigError("sweep lists (policies, resources, seeds) must be non-empty")
    for p in sw["policies"]:
        if p not in scheduler.POLICIES:
            raise ConfigError(f"unknown policy {p!r}")
    seeds = [int(s) for s in sw["seeds"]]
    jobs = int(sw.get("jobs", 1))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(_sweep_seed, [cfg] * len(seeds), seeds))
    else:
        parts = [_sweep_seed(cfg, s) for s in seeds]
    rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: (r["policy"], r["resources"], r["seed"]))
    return rows


def aggregate(rows) -> dict:
    """(policy, resources) -> mean throughput, mean delay, max delay, collisions."""
    groups = {}
    for r in rows:
        groups.setdefault((r["policy"], int(r["resources"])), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        out[key] = {
            "total_bytes": float(np.mean([float(r["total_bytes"]) for r in rs])),
            "mean_delay_ms": float(np.mean([float(r["mean_delay_ms"]) for r in rs])),
            "max_delay_ms": float(np.mean([float(r["max_delay_ms"]) for r in rs])),
            "collisions": float(np.mean([float(r["collisions"]) for r in rs])),
            "runs": len(rs),
        }
    return out


def nab_activity(cfg: dict):
    p = cfg["predictor"]
    path = Path(p["nab_file"]) if p["nab_file"] else ingest.nab_path()
    raw = ingest.load_series(path)
    span = ingest.samples_for_days(float(p["train_days"]))
    rule = ingest.BinarizeRule("statistical", k=float(p["k"]), train_span=span)
    return ingest.binarize(raw, rule), span


def predictor_plan(cfg: dict, train_span: int) -> predictor.WindowPlan:
    p = cfg["predictor"]
    return predictor.WindowPlan(train_span, int(p["T_p"]), int(p["dT"]))


def train_config(cfg: dict) -> lstm.TrainConfig:
    p = cfg["predictor"]
    return lstm.TrainConfig(hidden_sizes=tuple(int(h) for h in p["hidden"]), dropout=float(p["dropout"]),
                            epochs=int(p["epochs"]), unroll=int(p["unroll"]), batch_size=int(p["batch_size"]),
                            learning_rate=float(p["learning_rate"]), seed=int(cfg["seed"]))


def run_prediction(cfg: dict, series: predictor.ActivitySeries, train_span: int):
    plan = predictor_plan(cfg, train_span)
    history, stream = ingest.split_train(series, train_span, plan)
    iterations = int(cfg["predictor"]["iterations"])
    if ingest.available_iterations(stream.size, plan) < iterations:
        raise ValueError(f"series too short for {iterations} iterations of plan {plan}")
    model = predictor.LstmForecaster(train_config(cfg), int(cfg["predictor"]["refit_epochs"]))
    result = predictor.rolling_predict(plan, history, model, stream, iterations)
    return result, model


# -- commands -----------------------------------------------------------------


def cmd_traffic(cfg: dict, out: Path) -> dict:
    tc = traffic_config(cfg, int(cfg["seed"]))
    trace = traffic.simulate(tc)
    trace.write_csv(out / "trace.csv")
    trace.save(out / "trace.npz")
    for name, devs in traffic.phase_sets(trace).items():
        with open(out / f"phase_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["device_id", "x", "y"])
            for d in devs:
                w.writerow([int(d), f"{trace.x[d]:.6f}", f"{trace.y[d]:.6f}"])
    info = {"packets": len(trace.arrivals), "alarm_packets": trace.alarm_packets(),
            "coordinated_devices": int(trace.coordinated.sum())}
    print(f"traffic: {info['packets']} packets ({info['alarm_packets']} alarm) -> {out}")
    return info


def cmd_classify(cfg: dict, out: Path) -> dict:
    seed = int(cfg["seed"])
    trace_file = out / "trace.npz"
    if trace_file.exists():
        trace = traffic.TrafficTrace.load(trace_file)
    else:
        trace = traffic.simulate(traffic_config(cfg, seed))
    model, cm, elapsed, _ = device_classification(trace, cfg["classifier"], seed)
    model.save(out / "svm_model.txt")
    X = svm.normalize_positions(trace.x, trace.y, trace.config.area)
    svm.write_dataset(out / "devices.csv", X, np.where(trace.coordinated, 1, -1))
    report = metrics.classification_report(cm)
    write_classification_report(out / "classification.csv", cm, report)
    log.info("svm training took %.3f s", elapsed)
    print(f"classify: accuracy {report.accuracy:.3f}, f1 data/alarm {report.f1[0]:.3f}/{report.f1[1]:.3f}, "
          f"trained in {elapsed:.3f} s")
    # wall-clock time stays out of the run log so reruns are byte-identical
    return {"confusion": cm.counts}


def write_classification_report(path, cm: metrics.ConfusionMatrix, report: metrics.ClassificationReport) -> None:
    a = cm.array
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "pred_data", "pred_alarm", "accuracy", "precision", "recall", "f1", "undefined"])
        for k, row in enumerate(report.rows()):
            flags = ";".join(sorted(n for n in report.undefined if n.endswith(row["class"])))
            w.writerow([row["class"], a[k, 0], a[k, 1], f"{row['accuracy']:.4f}", f"{row['precision']:.4f}",
                        f"{row['recall']:.4f}", f"{row['f1']:.4f}", flags])


def cmd_predict(cfg: dict, out: Path) -> dict:
    p = cfg["predictor"]
    if p["source"] == "nab":
        series, span = nab_activity(cfg)
    elif p["source"] == "activity":
        if not p["activity_file"]:
            raise ConfigError("predictor.activity_file is required for source 'activity'")
        series = ingest.read_activity(p["activity_file"])
        span = ingest.samples_for_days(float(p["train_days"]))
    else:
        raise ConfigError(f"unknown predictor source {p['source']!r}")
    result, model = run_prediction(cfg, series, span)
    result.write_forecasts(out / "forecasts.csv")
    result.write_report(out / "iterations.csv")
    lstm.write_loss_history(out / "loss.csv", model.history)
    rep = metrics.classification_report(result.confusion())
    print(f"predict: {len(result.records)} iterations, accuracy {rep.accuracy:.3f}, "
          f"f1 silent/active {rep.f1[0]:.3f}/{rep.f1[1]:.3f}")
    return {"accuracy": rep.accuracy, "f1": rep.f1}


def cmd_sweep(cfg: dict, out: Path) -> dict:
    rows = run_sweep(cfg)
    scheduler.write_summary(out / "summary.csv", rows)
    write_plot_data(out, aggregate(rows))
    print(f"sweep: {len(rows)} runs -> {out / 'summary.csv'}")
    return {"rows": len(rows)}


def write_plot_data(out: Path, agg: dict) -> None:
    policies = sorted({p for p, _ in agg})
    for metric in ("total_bytes", "mean_delay_ms", "max_delay_ms"):
        with open(out / f"{metric}.dat", "w") as fh:
            fh.write("# resources " + " ".join(policies) + "\n")
            for R in sorted({r for _, r in agg}):
                vals = [agg.get((p, R), {}).get(metric, float("nan")) for p in policies]
                fh.write(f"{R} " + " ".join(f"{v:.6g}" for v in vals) + "\n")
        with open(out / f"{metric}.gp", "w") as fh:
            fh.write(f"set xlabel 'resources'\nset ylabel '{metric}'\nset key left top\n")
            plots = [f"'{metric}.dat' using 1:{k + 2} with linespoints title '{p}'" for k, p in enumerate(policies)]
            fh.write("plot " + ", \\\n     ".join(plots) + "\n")


def read_summary(path) -> list:
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path} not found; run the 'sweep' stage first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: dict, out: Path, confusion=None) -> dict:
    if confusion is not None:
        cm = metrics.ConfusionMatrix(np.asarray(confusion, dtype=int).reshape(2, 2))
        rep = metrics.classification_report(cm)
        for row in rep.rows():
            print(f"{row['class']:>6} acc {row['accuracy']:.2f} P {row['precision']:.2f} "
                  f"R {row['recall']:.2f} f1 {row['f1']:.2f}")
        return {"accuracy": rep.accuracy}
    agg = aggregate(read_summary(out / "summary.csv"))
    print(f"{'policy':>7} {'R':>5} {'bytes':>12} {'mean ms':>9} {'max ms':>9} {'coll':>7}")
    for (p, R), v in agg.items():
        print(f"{p:>7} {R:>5} {v['total_bytes']:>12.0f} {v['mean_delay_ms']:>9.3f} {v['max_delay_ms']:>9.1f} "
              f"{v['collisions']:>7.1f}")
    return {"cells": len(agg)}


# -- argument handling --------------------------------------------------------


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fastgrant", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fastgrant {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--output", "-o", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("traffic", help="generate a traffic trace and phase scatter data")
    common(p)
    p.add_argument("--processes", type=int, help="number of background processes (M)")
    p.add_argument("--devices", type=int)
    p.add_argument("--run-time", type=float, help="seconds")

    p = sub.add_parser("classify", help="train the device-class SVM and write a report")
    common(p)
    p.add_argument("--processes", type=int)
    p.add_argument("--kernel", choices=["rbf", "poly", "polynomial", "linear"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--degree", type=int)
    p.add_argument("--C", type=float, dest="C")

    p = sub.add_parser("predict", help="rolling LSTM activity prediction")
    common(p)
    p.add_argument("--source", choices=["nab", "activity"])
    p.add_argument("--nab-file")
    p.add_argument("--activity-file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=_int_list, help="comma-separated layer sizes")
    p.add_argument("--train-days", type=float)

    p = sub.add_parser("sweep", help="throughput/delay sweep over policies, resources and seeds")
    common(p)
    p.add_argument("--processes", type=int)
    p.add_argument("--policies", type=lambda s: [v for v in s.split(",") if v])
    p.add_argument("--resources", type=_int_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("report", help="summarize a sweep or score a confusion matrix")
    common(p)
    p.add_argument("--confusion", type=_int_list, help="four counts: tn,fp,fn,tp (rows = truth)")
    return ap


def apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.output is not None:
        cfg["output"] = args.output
    if args.seed is not None:
        cfg["seed"] = args.seed
    mapping = {
        "processes": ("traffic", "processes"),
        "devices": ("traffic", "devices"),
        "run_time": ("traffic", "run_time"),
        "kernel": ("classifier", "kernel"),
        "sigma": ("classifier", "sigma"),
        "degree": ("classifier", "degree"),
        "C": ("classifier", "C"),
        "source": ("predictor", "source"),
        "nab_file": ("predictor", "nab_file"),
        "activity_file": ("predictor", "activity_file"),
        "iterations": ("predictor", "iterations"),
        "epochs": ("predictor", "epochs"),
        "hidden": ("predictor", "hidden"),
        "train_days": ("predictor", "train_days"),
        "policies": ("sweep", "policies"),
        "resources": ("sweep", "resources"),
        "seeds": ("sweep", "seeds"),
        "jobs": ("sweep", "jobs"),
    }
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


COMMANDS = {"traffic": cmd_traffic, "classify": cmd_classify, "predict": cmd_predict, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        out = prepare_output(cfg)
        if args.command == "report":
            info = cmd_report(cfg, out, args.confusion)
        else:
            info = COMMANDS[args.command](cfg, out)
        write_run_log(out, args.command, cfg, {"result": info})
    except ConfigError as exc:
        print(f"fastgrant: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"fastgrant: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
