"""Training, evaluation and benchmarking loops shared by the CLI."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data, qrnn
from .metrics import MetricsReport, crossing_rate, interval_width, paired_t_test, picp
from .optim import (AdamState, AeroQuantileState, AeroSharedState, NonFiniteError, adam_step,
                    aero_quantile_step, aero_shared_step, sgd_step)

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    train: data.FeatureMatrix   # scaled
    test: data.FeatureMatrix    # scaled
    scaler: data.ScalerParams


def load_series(cfg):
    if cfg.data_csv:
        return data.load_csv(cfg.data_csv)
    return data.generate_synthetic_series(cfg.synthetic_seed, cfg.days, cfg.synthetic_config())


def prepare_data(cfg):
    matrix = data.engineer_features(load_series(cfg), cfg.horizon)
    train, test = data.train_test_split(matrix, cfg.test_fraction)
    train, test, scaler = data.fit_apply_scaler(train, test)
    return Dataset(train, test, scaler)


def seed_streams(seed):
    """Independent generators for initialization, batch order and optimizer noise."""
    init, order, noise = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(order),
            np.random.default_rng(noise))


class _Stepper:
    """Computes per-quantile gradients and applies one optimizer update."""

    def __init__(self, name, cfg, n_quantiles, noise_rng):
        self.name = name
        self.grad_evals = 0
        self.noise_rng = noise_rng
        if name == "adam":
            self.state = AdamState(lr=cfg.adam_lr)
        elif name == "aero-shared":
            self.state = AeroSharedState(lr=cfg.lr, noise=cfg.noise, momentum=cfg.momentum,
                                         base=cfg.shared_base)
            if cfg.shared_base == "adam":
                self.state.adam.lr = cfg.adam_lr
        elif name == "aero-quantile":
            self.state = AeroQuantileState(
                n_quantiles, lr=cfg.lr, energy_mix=cfg.energy_mix, momentum=cfg.momentum,
                energy_rate=cfg.energy_rate, adv_eps=cfg.adv_eps,
                coop_strength=cfg.coop_strength, redistribute=cfg.redistribute,
                clamp_alignment=cfg.clamp_alignment, anticipate=cfg.anticipate)
        elif name == "sgd":
            self.state = None
            self.lr = cfg.lr
        else:
            raise ValueError(f"unknown optimizer {name!r}")

    def step(self, params, xb, yb):
        """Update ``params`` in place; returns (per-quantile losses, trace record)."""
        cfg = params.config
        if self.name == "aero-quantile":
            trace = aero_quantile_step(params, xb, yb, self.state)
            self.grad_evals = self.state.grad_eval_count
            return trace.losses, trace.to_record()
        preds, cache = qrnn.forward(params, xb, return_cache=True)
        losses = qrnn.quantile_losses(params, xb, yb, preds)
        grads = qrnn.backward_quantile_gradients(cache, params, yb)
        self.grad_evals += cfg.n_quantiles
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("gradient")
        if self.name == "sgd":
            for g in grads:
                sgd_step(params.flat, g, self.lr)
            return losses, {"grad_norm": [float(np.linalg.norm(g)) for g in grads]}
        total = grads[0]
        for g in grads[1:]:
            total = total + g
        if self.name == "adam":
            adam_step(params.flat, total, self.state)
        else:
            aero_shared_step(params.flat, total, self.state, self.noise_rng)
            return losses, {"grad_norm": float(np.linalg.norm(total)),
                            "momentum_norm": float(np.linalg.norm(self.state.m))}
        return losses, {"grad_norm": float(np.linalg.norm(total))}


def evaluate(params, matrix, batch_size=4096):
    """Per-quantile mean pinball losses and predictions over a whole split."""
    preds = [[] for _ in params.config.quantiles]
    for start in range(0, len(matrix), batch_size):
        for i, p in enumerate(qrnn.forward(params, matrix.features[start:start + batch_size])):
            preds[i].append(p)
    preds = [np.vstack(p) for p in preds]
    return qrnn.quantile_losses(params, None, matrix.targets, preds), preds


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    train_quantile: list
    test_quantile: list


@dataclass
class TrainResult:
    params: qrnn.QrnnParams
    history: list = field(default_factory=list)
    grad_evals: int = 0
    initial_train_loss: float = None
    metrics: MetricsReport = None


def interval_heads(config):
    """Head indices whose estimated quantiles are lowest and highest, plus the median head."""
    eff = config.effective_levels()
    order = sorted(range(len(eff)), key=lambda i: eff[i])
    median = min(range(len(eff)), key=lambda i: abs(eff[i] - 0.5))
    return order[0], order[-1], median, order


def build_metrics(params, dataset, history, grad_evals, optimizer):
    cfg = params.config
    losses, preds = evaluate(params, dataset.test)
    lo, hi, _, order = interval_heads(cfg)
    y = dataset.test.targets
    report = MetricsReport(
        levels=list(cfg.quantiles), pinball=losses,
        picp_80=picp(preds[lo], preds[hi], y), interval_width=interval_width(preds[lo], preds[hi]),
        crossing_rate=crossing_rate([preds[i] for i in order]),
        train_losses=[h.train_loss for h in history], test_losses=[h.test_loss for h in history],
        grad_evals=grad_evals, optimizer=optimizer)
    if len(history) >= 2:
        try:
            report.t_stat, report.p_value, report.df = paired_t_test(
                report.train_losses, report.test_losses)
        except ValueError as exc:
            log.warning("paired t-test skipped: %s", exc)
    return report


def train(cfg, dataset=None, optimizer=None, trace_sink=None, on_epoch=None):
    """Train a fresh QRNN; deterministic given ``cfg.seed``.

    The epoch's train loss is the mean of the minibatch losses seen during
    that epoch (evaluated before each update); the test loss is evaluated on
    the full test split after the epoch.
    """
    dataset = dataset or prepare_data(cfg)
    optimizer = optimizer or cfg.optimizer
    init_rng, order_rng, noise_rng = seed_streams(cfg.seed)
    mcfg = cfg.qrnn_config(dataset.train.features.shape[1])
    params = qrnn.init_params(mcfg, init_rng)
    stepper = _Stepper(optimizer, cfg, mcfg.n_quantiles, noise_rng)
    result = TrainResult(params)
    result.initial_train_loss = float(np.mean(evaluate(params, dataset.train)[0]))

    n = len(dataset.train)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        batch_losses, batch_q = [], []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            step += 1
            try:
                losses, record = stepper.step(params, dataset.train.features[idx],
                                              dataset.train.targets[idx])
            except NonFiniteError as exc:
                raise NonFiniteError(exc.stage, f"epoch {epoch}, step {step}") from exc
            if not all(math.isfinite(v) for v in losses):
                raise NonFiniteError("loss", f"epoch {epoch}, step {step}")
            batch_losses.append(float(np.mean(losses)))
            batch_q.append(losses)
            if trace_sink is not None:
                record = {"epoch": epoch, "step": step, "loss": losses, **record}
                trace_sink.write(json.dumps(record) + "\n")
        test_q, _ = evaluate(params, dataset.test)
        rec = EpochRecord(epoch, float(np.mean(batch_losses)), float(np.mean(test_q)),
                          [float(v) for v in np.mean(batch_q, axis=0)], test_q)
        if not (math.isfinite(rec.train_loss) and math.isfinite(rec.test_loss)):
            raise NonFiniteError("loss", f"epoch {epoch}")
        result.history.append(rec)
        log.info("epoch %d  train %.6f  test %.6f", epoch, rec.train_loss, rec.test_loss)
        if on_epoch is not None:
            on_epoch(rec)
    result.grad_evals = stepper.grad_evals
    result.metrics = build_metrics(params, dataset, result.history, stepper.grad_evals, optimizer)
    return result


def smoothness(history):
    """Mean absolute epoch-to-epoch change of the train loss."""
    losses = [h.train_loss for h in history]
    if len(losses) < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(losses))))
