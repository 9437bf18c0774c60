"""Optional PNG figures next to the CSV outputs (requires matplotlib)."""

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("plot=true needs matplotlib; install the 'plot' extra") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})


def loss_curves(history, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.train_loss for h in history], label="train")
    ax.plot(epochs, [h.test_loss for h in history], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pinball loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def forecast_fan(steps, lower, median, upper, actual, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(steps, lower, upper, alpha=0.3, label="interval")
    ax.plot(steps, median, label="median")
    ax.plot(steps, actual, "k.", label="actual")
    ax.set_xlabel("steps ahead (15 min)")
    ax.set_ylabel("price")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def benchmark_curves(curves, path):
    """``curves`` maps optimizer name to its per-epoch train losses."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, losses in curves.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train pinball loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
