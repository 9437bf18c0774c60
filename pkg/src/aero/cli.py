"""``aero`` command line: train, predict, benchmark and theory-check.

Exit status: 0 success, 1 usage or configuration error, 2 numerical failure,
3 theory-suite failure. Output files never contain wall-clock values, so a
rerun with the same config and seed reproduces them byte for byte.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import qrnn, theory, train
from .config import OPTIMIZERS, ConfigError, load_config
from .optim import NonFiniteError
from .tensor import ShapeError

log = logging.getLogger("aero")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THEORY = 0, 1, 2, 3
CHECKPOINT = "checkpoint.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _prepare_out(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def write_loss_log(path, history, levels):
    header = (["epoch", "train_loss", "test_loss"] + [f"train_q{q}" for q in levels]
              + [f"test_q{q}" for q in levels])
    rows = [[h.epoch, h.train_loss, h.test_loss, *h.train_quantile, *h.test_quantile]
            for h in history]
    _write_csv(path, header, rows)


def write_metrics(out, report):
    _write_jsonl(out / "metrics.jsonl", [report.to_record()])
    _write_csv(out / "metrics.csv", ["metric", "value"], report.flat_rows())


def run_train(cfg):
    out = _prepare_out(cfg)
    dataset = train.prepare_data(cfg)
    sink = open(out / "steptrace.log", "w") if cfg.steptrace else None
    try:
        result = train.train(cfg, dataset, trace_sink=sink)
    finally:
        if sink is not None:
            sink.close()
    write_loss_log(out / "loss_log.csv", result.history, cfg.quantiles)
    qrnn.save_checkpoint(result.params, out / CHECKPOINT)
    write_metrics(out, result.metrics)
    if cfg.plot:
        from . import plotting
        plotting.loss_curves(result.history, out / "loss_curves.png")
    if result.history:
        last = result.history[-1]
        log.info("final train %.6g  test %.6g  (epoch-1 train %.6g)", last.train_loss,
                 last.test_loss, result.history[0].train_loss)
    return EXIT_OK


def forecast_rows(params, dataset, origins=0):
    """Rows of the forecast table, in price units, for the first ``origins`` test rows."""
    test = dataset.test
    if origins:
        test = test.subset(slice(0, origins))
    _, preds = train.evaluate(params, test)
    sc = dataset.scaler
    preds = [sc.inverse_targets(p) for p in preds]
    actual = sc.inverse_targets(test.targets)
    lo, hi, med, _ = train.interval_heads(params.config)
    horizon = params.config.horizon
    step_delta = np.timedelta64(15, "m")
    rows = []
    for r, origin in enumerate(test.timestamps):
        for h in range(horizon):
            rows.append([str(origin), h + 1, str(origin + (h + 1) * step_delta),
                         *(p[r, h] for p in preds), preds[lo][r, h], preds[med][r, h],
                         preds[hi][r, h], actual[r, h]])
    return rows


def run_predict(cfg, checkpoint=None):
    out = _prepare_out(cfg)
    dataset = train.prepare_data(cfg)
    mcfg = cfg.qrnn_config(dataset.train.features.shape[1])
    path = Path(checkpoint) if checkpoint else out / CHECKPOINT
    if not path.is_file():
        raise ConfigError(f"checkpoint {str(path)!r} does not exist")
    try:
        params = qrnn.load_checkpoint(path, mcfg)
    except ShapeError as exc:
        raise ConfigError(f"checkpoint does not match the configured model: {exc}") from None
    levels = mcfg.quantiles
    header = (["origin", "step", "timestamp"] + [f"head_q{q}" for q in levels]
              + ["lower", "median", "upper", "actual"])
    rows = forecast_rows(params, dataset, cfg.forecast_origins)
    _write_csv(out / "forecast.csv", header, rows)
    if cfg.plot and rows:
        from . import plotting
        first = rows[:mcfg.horizon]
        k = 3 + len(levels)
        plotting.forecast_fan([r[1] for r in first], [r[k] for r in first],
                              [r[k + 1] for r in first], [r[k + 2] for r in first],
                              [r[k + 3] for r in first], out / "forecast.png")
    log.info("wrote %d forecast rows", len(rows))
    return EXIT_OK


def run_benchmark(cfg):
    out = _prepare_out(cfg)
    dataset = train.prepare_data(cfg)
    rows, curves, records = [], [], []
    for name in OPTIMIZERS:
        log.info("benchmark: %s", name)
        result = train.train(cfg, dataset, optimizer=name)
        hist = result.history
        per_epoch = result.grad_evals // cfg.epochs if cfg.epochs else 0
        rows.append([name, result.initial_train_loss,
                     hist[-1].train_loss if hist else None, hist[-1].test_loss if hist else None,
                     train.smoothness(hist), result.grad_evals, per_epoch])
        curves += [[name, h.epoch, h.train_loss, h.test_loss] for h in hist]
        records.append(result.metrics.to_record())
    _write_csv(out / "benchmark.csv",
               ["optimizer", "initial_loss", "final_train_loss", "final_test_loss", "smoothness",
                "grad_evals", "grad_evals_per_epoch"], rows)
    _write_csv(out / "benchmark_curves.csv", ["optimizer", "epoch", "train_loss", "test_loss"],
               curves)
    _write_jsonl(out / "metrics.jsonl", records)
    if cfg.plot:
        from . import plotting
        by_name = {}
        for name, _, tr, _ in curves:
            by_name.setdefault(name, []).append(tr)
        plotting.benchmark_curves(by_name, out / "benchmark.png")
    return EXIT_OK


def _kv(d):
    return ";".join(f"{k}={_fmt(v)}" for k, v in d.items())


def run_theory_check(cfg):
    out = _prepare_out(cfg)
    tol = theory.Tolerances(cfg.tol_redirection, cfg.tol_equilibrium, cfg.tol_convergence,
                            cfg.tol_regret_ratio)
    results = theory.run_all(tol)
    for r in results:
        log.info("%-24s %s  (%.1fs)", r.theorem, "pass" if r.passed else "FAIL", r.seconds)
    _write_csv(out / "theory_report.csv", ["theorem", "passed", "params", "measured"],
               [[r.theorem, str(r.passed).lower(), _kv(r.params), _kv(r.measured)]
                for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_THEORY


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("overrides", nargs="*", metavar="key=value",
                        help="configuration overrides")
    parser = _Parser(prog="aero", description="Quantile forecasting with AERO optimizers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a model and write loss log, "
                   "checkpoint and metrics")
    p = sub.add_parser("predict", parents=[common], help="write per-quantile test forecasts")
    p.add_argument("--checkpoint", help=f"checkpoint file (default: OUT/{CHECKPOINT})")
    sub.add_parser("benchmark", parents=[common], help="compare all optimizers on one setup")
    sub.add_parser("theory-check", parents=[common], help="run the redirection property suites")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, args.overrides)
        flags = {k: v for k, v in (("seed", args.seed), ("out", args.out)) if v is not None}
        cfg = dataclasses.replace(cfg, **flags).validate()
        if args.command == "train":
            return run_train(cfg)
        if args.command == "predict":
            return run_predict(cfg, args.checkpoint)
        if args.command == "benchmark":
            return run_benchmark(cfg)
        return run_theory_check(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
