import csv

import numpy as np
import pytest

from aero import qrnn, train
from aero.cli import main
from aero.config import ConfigError, load_config
from aero.qrnn import QrnnParams

TINY = ["days=3", "conv1_channels=2", "conv2_channels=2", "hidden_dim=4", "batch_size=64"]


def run(tmp_path, command, *extra, name="run"):
    out = tmp_path / name
    code = main([command, "--out", str(out), *TINY, *extra])
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_zero_epochs_writes_init_checkpoint_and_empty_log(tmp_path):
    code, out = run(tmp_path, "train", "epochs=0", "--seed", "5")
    assert code == 0
    assert read_rows(out / "loss_log.csv") == [
        ["epoch", "train_loss", "test_loss", "train_q0.1", "train_q0.5", "train_q0.9",
         "test_q0.1", "test_q0.5", "test_q0.9"]]
    cfg = load_config(None, TINY + ["epochs=0", "seed=5"])
    ds = train.prepare_data(cfg)
    init = qrnn.init_params(cfg.qrnn_config(27), train.seed_streams(5)[0])
    loaded = qrnn.load_checkpoint(out / "checkpoint.txt", cfg.qrnn_config(27))
    assert loaded.flat.tobytes() == init.flat.tobytes()
    assert len(ds.train) > 0


@pytest.mark.parametrize("optimizer", ["aero-shared", "aero-quantile"])
def test_train_is_byte_reproducible(tmp_path, optimizer):
    outs = []
    for name in ("a", "b"):
        code, out = run(tmp_path, "train", "epochs=2", f"optimizer={optimizer}", name=name)
        assert code == 0
        outs.append(out)
    for fname in ("loss_log.csv", "steptrace.log", "checkpoint.txt", "metrics.jsonl",
                  "metrics.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    assert len(read_rows(outs[0] / "loss_log.csv")) == 3


def test_seed_flag_changes_results(tmp_path):
    _, a = run(tmp_path, "train", "epochs=1", "--seed", "1", name="a")
    _, b = run(tmp_path, "train", "epochs=1", "--seed", "2", name="b")
    assert (a / "loss_log.csv").read_bytes() != (b / "loss_log.csv").read_bytes()


def test_flags_win_over_overrides(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed: int = 3\nepochs = 1  # comment\n")
    out = tmp_path / "flagged"
    assert main(["train", "--config", str(cfg_file), "--seed", "9", "--out", str(out),
                 *TINY, "seed=4"]) == 0
    assert "seed: int = 9" in (out / "config.txt").read_text()


def test_predict_zero_checkpoint_gives_bias_forecasts(tmp_path):
    cfg = load_config(None, TINY)
    ds = train.prepare_data(cfg)
    params = QrnnParams(cfg.qrnn_config(27))
    for i, b in enumerate((0.2, 0.5, 0.8)):
        params[f"head{i}.bias"][...] = b
    ckpt = tmp_path / "zero.ckpt"
    qrnn.save_checkpoint(params, ckpt)
    code, out = run(tmp_path, "predict", "--checkpoint", str(ckpt))
    assert code == 0
    rows = read_rows(out / "forecast.csv")
    header, body = rows[0], rows[1:]
    assert len(body) == len(ds.test) * 20
    col = {name: k for k, name in enumerate(header)}
    sc = ds.scaler
    for r in body:
        for i, b in enumerate((0.2, 0.5, 0.8)):
            assert float(r[col[f"head_q{cfg.quantiles[i]}"]]) == pytest.approx(
                sc.inverse_targets(b), rel=1e-12)
    steps = [int(r[col["step"]]) for r in body]
    assert steps[:20] == list(range(1, 21))
    # under the default orientation head q0.9 estimates the low tail
    for r in body:
        assert r[col["lower"]] == r[col["head_q0.9"]]
        assert r[col["upper"]] == r[col["head_q0.1"]]
        assert r[col["median"]] == r[col["head_q0.5"]]


def test_predict_medians_match_forward(tmp_path):
    code, out = run(tmp_path, "train", "epochs=1")
    assert code == 0
    assert run(tmp_path, "predict", "forecast_origins=5")[0] == 0
    rows = read_rows(out / "forecast.csv")
    col = {name: k for k, name in enumerate(rows[0])}
    body = rows[1:]
    assert len(body) == 5 * 20
    cfg = load_config(None, TINY)
    ds = train.prepare_data(cfg)
    params = qrnn.load_checkpoint(out / "checkpoint.txt", cfg.qrnn_config(27))
    preds = qrnn.forward(params, ds.test.features[:5])
    median = ds.scaler.inverse_targets(preds[1])
    got = np.array([float(r[col["median"]]) for r in body]).reshape(5, 20)
    np.testing.assert_array_equal(got, median)
    actual = np.array([float(r[col["actual"]]) for r in body]).reshape(5, 20)
    np.testing.assert_allclose(actual, ds.scaler.inverse_targets(ds.test.targets[:5]),
                               rtol=1e-12)


def test_predict_rejects_mismatched_checkpoint(tmp_path):
    code, out = run(tmp_path, "train", "epochs=0")
    assert code == 0
    code = main(["predict", "--out", str(out), *TINY, "hidden_dim=5"])
    assert code == 1


def test_predict_missing_checkpoint(tmp_path):
    assert run(tmp_path, "predict", name="empty")[0] == 1


def test_benchmark_table(tmp_path):
    code, out = run(tmp_path, "benchmark", "epochs=2")
    assert code == 0
    rows = read_rows(out / "benchmark.csv")
    table = {r[0]: dict(zip(rows[0], r)) for r in rows[1:]}
    assert list(table) == ["sgd", "adam", "aero-shared", "aero-quantile"]
    assert len({t["initial_loss"] for t in table.values()}) == 1
    assert int(table["aero-quantile"]["grad_evals_per_epoch"]) == \
        2 * int(table["sgd"]["grad_evals_per_epoch"])
    # rerun equivalence with a single-optimizer training
    assert main(["train", "--out", str(tmp_path / "single"), *TINY, "epochs=2",
                 "optimizer=adam"]) == 0
    single = read_rows(tmp_path / "single" / "loss_log.csv")
    assert single[-1][1] == table["adam"]["final_train_loss"]
    assert single[-1][2] == table["adam"]["final_test_loss"]


def test_theory_check_default_passes(tmp_path):
    code, out = run(tmp_path, "theory-check")
    assert code == 0
    rows = read_rows(out / "theory_report.csv")
    assert len(rows) == 5
    assert all(r[1] == "true" for r in rows[1:])


def test_theory_check_zero_tolerance_fails(tmp_path):
    code, out = run(tmp_path, "theory-check", "tol_equilibrium=0")
    assert code == 3
    rows = {r[0]: r for r in read_rows(out / "theory_report.csv")[1:]}
    assert rows["multiagent_equilibrium"][1] == "false"


@pytest.mark.parametrize("args", [
    ["train", "no_such_key=1"],
    ["train", "epochs=abc"],
    ["train", "optimizer=rmsprop"],
    ["train", "--config", "/nonexistent.cfg"],
    ["fly"],
    [],
])
def test_usage_errors_exit_1(tmp_path, args):
    with_out = args + (["--out", str(tmp_path / "x")] if args and args[0] == "train" else [])
    try:
        code = main(with_out)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_2(tmp_path):
    code, _ = run(tmp_path, "train", "epochs=3", "optimizer=sgd", "lr=1e300")
    assert code == 2


def test_config_type_annotation_checked(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs: float = 3\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_plot_outputs_are_written(tmp_path):
    pytest.importorskip("matplotlib")
    code, out = run(tmp_path, "train", "epochs=2", "plot=true")
    assert code == 0
    png = (out / "loss_curves.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    run(tmp_path, "train", "epochs=2", "plot=true", name="again")
    assert (tmp_path / "again" / "loss_curves.png").read_bytes() == png
