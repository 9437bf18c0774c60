"""Convolutional quantile-regression network with hand-derived gradients.

Architecture (input treated as one channel of length ``feature_dim``)::

    h1     = ReLU(conv1(x))             conv1: 1 -> C1 channels
    h2     = ReLU(conv2(h1))            conv2: C1 -> C2 channels
    h_fc1  = ReLU(W3 @ flatten(h2) + b3)
    y_q    = W4[q] @ h_fc1 + b4[q]      one head per quantile level

Activations are kept channels-last, ``(N, L, C)``; ``flatten`` is therefore
position-major (index ``l * C2 + c``).

All parameters live in one flat float64 vector; named tensors are reshaped
views into it, so optimizers can update the flat vector in place.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, conv1d_backward_cl, conv1d_forward_cl

CHECKPOINT_MAGIC = "aero-qrnn-checkpoint"
CHECKPOINT_VERSION = 1
ORIENTATIONS = ("paper", "standard")


@dataclass
class QrnnConfig:
    feature_dim: int
    conv1_channels: int = 16
    conv2_channels: int = 32
    kernel_size: int = 3
    hidden_dim: int = 64
    horizon: int = 20
    quantiles: tuple = (0.1, 0.5, 0.9)
    loss_orientation: str = "paper"

    def __post_init__(self):
        self.quantiles = tuple(float(q) for q in self.quantiles)
        dims = (self.feature_dim, self.conv1_channels, self.conv2_channels,
                self.kernel_size, self.hidden_dim, self.horizon)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if not self.quantiles:
            raise ValueError("at least one quantile level is required")
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError(f"quantile levels must lie in (0, 1): {self.quantiles}")
        if any(b <= a for a, b in zip(self.quantiles, self.quantiles[1:])):
            raise ValueError(f"quantile levels must be strictly increasing: {self.quantiles}")
        if self.loss_orientation not in ORIENTATIONS:
            raise ValueError(f"loss_orientation must be one of {ORIENTATIONS}")

    @property
    def padding(self):
        return self.kernel_size // 2

    @property
    def conv_length(self):
        # length after each conv; identical for both layers
        return self.feature_dim + 2 * self.padding - self.kernel_size + 1

    @property
    def n_quantiles(self):
        return len(self.quantiles)

    def effective_levels(self):
        """Quantile each head estimates at the loss minimizer.

        The ``paper`` orientation charges ``q`` for over-prediction, so its
        minimizer is the ``1 - q`` quantile.
        """
        if self.loss_orientation == "paper":
            return tuple(round(1.0 - q, 12) for q in self.quantiles)
        return self.quantiles

    def layout(self):
        c1, c2, k = self.conv1_channels, self.conv2_channels, self.kernel_size
        spec = [
            ("conv1.weight", (c1, 1, k)),
            ("conv1.bias", (c1,)),
            ("conv2.weight", (c2, c1, k)),
            ("conv2.bias", (c2,)),
            ("fc.weight", (self.hidden_dim, c2 * self.conv_length)),
            ("fc.bias", (self.hidden_dim,)),
        ]
        for i in range(self.n_quantiles):
            spec.append((f"head{i}.weight", (self.horizon, self.hidden_dim)))
            spec.append((f"head{i}.bias", (self.horizon,)))
        return spec


class QrnnParams:
    """Flat parameter vector plus named reshaped views."""

    def __init__(self, config, flat=None):
        self.config = config
        self._layout = config.layout()
        self.slices = {}
        start = 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            self.slices[name] = (slice(start, start + size), shape)
            start += size
        self.size = start
        if flat is None:
            flat = np.zeros(start)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (start,):
            raise ShapeError(f"flat parameter vector must have length {start}, got {flat.shape}")
        self.flat = np.ascontiguousarray(flat)

    def __getitem__(self, name):
        sl, shape = self.slices[name]
        return self.flat[sl].reshape(shape)

    def names(self):
        return [name for name, _ in self._layout]

    def head_names(self, i):
        return (f"head{i}.weight", f"head{i}.bias")

    def head_mask(self, i):
        """Boolean mask over the flat vector selecting head ``i``."""
        mask = np.zeros(self.size, dtype=bool)
        for name in self.head_names(i):
            mask[self.slices[name][0]] = True
        return mask

    def copy(self):
        return QrnnParams(self.config, self.flat.copy())

    def unflatten(self, vector):
        """Named views of an arbitrary vector laid out like the parameters."""
        return {name: vector[sl].reshape(shape) for name, (sl, shape) in self.slices.items()}


def init_params(config, rng):
    """He-normal weights (variance 2 / fan_in) and zero biases."""
    params = QrnnParams(config)
    for name, shape in config.layout():
        if name.endswith(".bias"):
            continue
        fan_in = int(np.prod(shape[1:]))
        params[name][...] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


@dataclass
class ForwardCache:
    params: QrnnParams
    x: np.ndarray
    cols1: np.ndarray
    cols2: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    z3: np.ndarray
    h3: np.ndarray
    predictions: list
    consumed: bool = field(default=False)


def forward(params, batch, heads=None, return_cache=False):
    """Per-quantile predictions, each of shape ``(N, horizon)``.

    ``heads`` restricts evaluation to a subset of head indices; the returned
    list then holds ``None`` for skipped heads.
    """
    cfg = params.config
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"batch must be (N, {cfg.feature_dim}), got {x.shape}")
    pad = cfg.padding
    z1, cols1 = conv1d_forward_cl(x[:, :, None], params["conv1.weight"], params["conv1.bias"], pad)
    h1 = np.maximum(z1, 0.0)
    z2, cols2 = conv1d_forward_cl(h1, params["conv2.weight"], params["conv2.bias"], pad)
    h2 = np.maximum(z2, 0.0)
    flat = h2.reshape(len(x), -1)
    z3 = flat @ params["fc.weight"].T + params["fc.bias"]
    h3 = np.maximum(z3, 0.0)
    if heads is None:
        heads = range(cfg.n_quantiles)
    preds = [None] * cfg.n_quantiles
    for i in heads:
        preds[i] = h3 @ params[f"head{i}.weight"].T + params[f"head{i}.bias"]
    if return_cache:
        return preds, ForwardCache(params, x, cols1, cols2, z1, h1, z2, h2, z3, h3, preds)
    return preds


def _check_level(q):
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {q}")


def pinball_loss(pred, target, q, orientation="paper"):
    """Mean pinball loss over all elements.

    ``paper``:    q * max(0, pred - y) + (1 - q) * max(0, y - pred)
    ``standard``: q * max(0, y - pred) + (1 - q) * max(0, pred - y)
    """
    _check_level(q)
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    over = np.maximum(0.0, pred - target)
    under = np.maximum(0.0, target - pred)
    if orientation == "paper":
        return float(np.mean(q * over + (1.0 - q) * under))
    if orientation == "standard":
        return float(np.mean(q * under + (1.0 - q) * over))
    raise ValueError(f"unknown orientation {orientation!r}")


def pinball_grad(pred, target, q, orientation="paper"):
    """d(mean pinball)/d(pred), with subgradient 0 at pred == target."""
    err = pred - target
    over_w, under_w = (q, 1.0 - q) if orientation == "paper" else (1.0 - q, q)
    g = np.where(err > 0, over_w, np.where(err < 0, -under_w, 0.0))
    return g / err.size


def backward_quantile_gradients(cache, params, targets, heads=None, input_grad=False):
    """Exact per-quantile gradients over the full flat parameter vector.

    Returns a list ``G`` with one flat vector per quantile (``None`` for heads
    not requested). With ``input_grad`` also returns the per-quantile
    gradients of each loss with respect to the input batch.
    """
    if cache.consumed:
        raise ValueError("forward cache has already been consumed by a backward call")
    if cache.params is not params:
        raise ValueError("forward cache was produced with a different parameter set")
    cfg = params.config
    n = len(cache.x)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (n, cfg.horizon):
        raise ShapeError(f"targets must be {(n, cfg.horizon)}, got {targets.shape}")
    cache.consumed = True

    if heads is None:
        heads = range(cfg.n_quantiles)
    pad = cfg.padding
    flat_h2 = cache.h2.reshape(n, -1)
    grads = [None] * cfg.n_quantiles
    x_grads = [None] * cfg.n_quantiles
    for i in heads:
        pred = cache.predictions[i]
        if pred is None:
            raise ValueError(f"head {i} was not evaluated in the cached forward pass")
        g = np.zeros(params.size)
        v = params.unflatten(g)
        dy = pinball_grad(pred, targets, cfg.quantiles[i], cfg.loss_orientation)
        v[f"head{i}.weight"][...] = dy.T @ cache.h3
        v[f"head{i}.bias"][...] = dy.sum(axis=0)
        dz3 = (dy @ params[f"head{i}.weight"]) * (cache.z3 > 0)
        v["fc.weight"][...] = dz3.T @ flat_h2
        v["fc.bias"][...] = dz3.sum(axis=0)
        dz2 = (dz3 @ params["fc.weight"]).reshape(cache.h2.shape) * (cache.z2 > 0)
        dh1, v["conv2.weight"][...], v["conv2.bias"][...] = conv1d_backward_cl(
            dz2, cache.cols2, params["conv2.weight"], cfg.conv_length, pad)
        dz1 = dh1 * (cache.z1 > 0)
        dx, v["conv1.weight"][...], v["conv1.bias"][...] = conv1d_backward_cl(
            dz1, cache.cols1, params["conv1.weight"], cfg.feature_dim, pad,
            need_signal_grad=input_grad)
        grads[i] = g
        if input_grad:
            x_grads[i] = dx[:, :, 0]
    if input_grad:
        return grads, x_grads
    return grads


def quantile_losses(params, batch, targets, preds=None):
    """Mean pinball loss per quantile level."""
    cfg = params.config
    if preds is None:
        preds = forward(params, batch)
    return [pinball_loss(p, targets, q, cfg.loss_orientation)
            for p, q in zip(preds, cfg.quantiles)]


def predictive_variance(predictions):
    """Population variance of one quantile's predictions over all entries."""
    p = np.asarray(predictions, dtype=np.float64)
    if p.size == 0:
        raise ValueError("predictive variance needs at least one prediction")
    return float(np.mean((p - p.mean()) ** 2))


def save_checkpoint(params, path):
    """Write a versioned, byte-stable text checkpoint (shortest round-trip floats)."""
    cfg = params.config
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
             "quantiles " + " ".join(repr(q) for q in cfg.quantiles),
             f"orientation {cfg.loss_orientation}"]
    for name in params.names():
        arr = params[name]
        lines.append(f"tensor {name} " + "x".join(str(s) for s in arr.shape))
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path, config):
    """Load a checkpoint into parameters shaped by ``config``; shapes must match."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: not a v{CHECKPOINT_VERSION} checkpoint")
    params = QrnnParams(config)
    seen = set()
    i = 3
    while i < len(lines):
        header = lines[i].split()
        if len(header) != 3 or header[0] != "tensor":
            raise ValueError(f"{path}:{i + 1}: malformed tensor header")
        name = header[1]
        shape = tuple(int(s) for s in header[2].split("x"))
        if name not in params.slices:
            raise ShapeError(f"{path}: unexpected tensor {name}")
        expected = params.slices[name][1]
        if shape != tuple(expected):
            raise ShapeError(f"{path}: tensor {name} has shape {shape}, config expects {expected}")
        values = np.array([float(v) for v in lines[i + 1].split()])
        params[name][...] = values.reshape(shape)
        seen.add(name)
        i += 2
    missing = set(params.names()) - seen
    if missing:
        raise ShapeError(f"{path}: missing tensors {sorted(missing)}")
    return params
