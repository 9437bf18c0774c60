"""SGD / Adam baselines and the AERO optimizers.

``aero_shared_step`` is the Gaussian-redirection momentum rule used for the
forecasting experiments. ``aero_quantile_step`` is the per-quantile optimizer:
natural and adversarial gradients, projection redirection, cross-quantile
cooperation, an energy budget that modulates the step size, and optional
momentum redistribution across quantiles.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import qrnn
from .tensor import ShapeError, gaussian_sample, project_onto, projection_coefficient


class NonFiniteError(FloatingPointError):
    """A gradient or optimizer intermediate became NaN or infinite."""

    def __init__(self, stage, detail=""):
        self.stage = stage
        super().__init__(f"non-finite value at stage '{stage}'" + (f": {detail}" if detail else ""))


def _require_finite(arr, stage, detail=""):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(stage, detail)


def _check_shapes(params, grad):
    if params.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.shape}")


def sgd_step(params, grad, lr):
    """In-place ``params -= lr * grad``."""
    _check_shapes(params, grad)
    params -= lr * grad
    return params


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0


def adam_step(params, grad, state):
    """In-place Adam update with bias correction."""
    _check_shapes(params, grad)
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class AeroSharedState:
    """Gaussian-perturbed gradient with a single shared momentum buffer."""

    lr: float = 0.05
    noise: float = 1e-3
    momentum: float = 0.9
    base: str = "plain"
    m: np.ndarray = None
    adam: AdamState = None

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise strength must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.base not in ("plain", "adam"):
            raise ValueError("base must be 'plain' or 'adam'")
        if self.base == "adam" and self.adam is None:
            self.adam = AdamState(lr=self.lr)


def aero_shared_step(params, grad, state, rng):
    """One AERO-Shared update, in place.

    g' = grad + noise * N(0, I);  m = mu * m + (1 - mu) * g';
    params -= lr * m  (or ``m`` is handed to Adam when ``base == 'adam'``).
    """
    _check_shapes(params, grad)
    _require_finite(grad, "gradient")
    if state.m is None:
        state.m = np.zeros_like(params)
    perturbed = grad + state.noise * gaussian_sample(rng, grad.shape, 1.0)
    state.m = state.momentum * state.m + (1.0 - state.momentum) * perturbed
    if state.base == "adam":
        adam_step(params, state.m, state.adam)
    else:
        params -= state.lr * state.m
    return params


def redistribute_momentum(velocities, target):
    """Rescale all velocities by one scalar so their norms sum to ``target``."""
    if target < 0:
        raise ValueError(f"momentum target must be >= 0, got {target}")
    total = sum(float(np.linalg.norm(v)) for v in velocities)
    if total == 0.0:
        return [v.copy() for v in velocities]
    s = target / total
    return [v * s for v in velocities]


@dataclass
class AeroQuantileState:
    n_quantiles: int
    lr: tuple = 0.05
    energy_mix: float = 0.5          # lambda
    momentum: float = 0.9            # mu
    energy_rate: float = 0.0         # kappa
    adv_eps: float = 0.01
    coop: np.ndarray = None          # |Q| x |Q|, zero diagonal
    coop_strength: float = 0.1
    redistribute: bool = False
    clamp_alignment: bool = False
    anticipate: bool = True
    target_decay: float = 0.99
    velocities: list = None
    energies: list = None
    momentum_target: float = None
    grad_eval_count: int = 0
    steps: int = 0

    def __post_init__(self):
        nq = self.n_quantiles
        if np.isscalar(self.lr):
            self.lr = (float(self.lr),) * nq
        self.lr = tuple(float(v) for v in self.lr)
        if len(self.lr) != nq or any(v <= 0 for v in self.lr):
            raise ValueError("need one positive base learning rate per quantile")
        if not 0.0 <= self.energy_mix <= 1.0:
            raise ValueError("energy_mix (lambda) must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.energy_rate < 0 or self.adv_eps < 0:
            raise ValueError("energy_rate and adv_eps must be >= 0")
        if self.coop is None:
            off = self.coop_strength / (nq - 1) if nq > 1 else 0.0
            self.coop = np.full((nq, nq), off)
        self.coop = np.array(self.coop, dtype=np.float64)
        np.fill_diagonal(self.coop, 0.0)
        if self.coop.shape != (nq, nq):
            raise ValueError(f"cooperation matrix must be {nq}x{nq}")
        if self.energies is None:
            self.energies = [0.0] * nq


@dataclass
class StepTrace:
    step: int
    grad_norm: list = field(default_factory=list)
    adv_grad_norm: list = field(default_factory=list)
    delta: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    redirect_norm: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    redirect_sq: list = field(default_factory=list)
    grad_sq: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    velocity_norm: list = field(default_factory=list)
    grad_evals: list = field(default_factory=list)
    momentum_total: float = 0.0
    momentum_target: float = None
    losses: list = None
    # per-quantile vectors, kept only when requested
    grads: list = None
    adv_grads: list = None
    redirects: list = None

    def to_record(self):
        rec = {k: getattr(self, k) for k in (
            "step", "grad_norm", "adv_grad_norm", "delta", "alignment", "redirect_norm",
            "energy", "lr", "velocity_norm", "grad_evals", "momentum_total", "momentum_target")}
        return rec


def adversarial_gradient(params, batch, targets, q_index, adv_eps, input_grad=None, state=None):
    """Parameter gradient of quantile ``q_index``'s loss at an FGSM-perturbed input.

    ``input_grad`` is d L_q / d x at the clean batch; it is computed here
    (one extra forward/backward) when not supplied.
    """
    if adv_eps < 0:
        raise ValueError("adv_eps must be >= 0")
    batch = np.asarray(batch, dtype=np.float64)
    if input_grad is None:
        _, cache = qrnn.forward(params, batch, heads=[q_index], return_cache=True)
        _, xg = qrnn.backward_quantile_gradients(cache, params, targets, heads=[q_index],
                                                 input_grad=True)
        input_grad = xg[q_index]
        if state is not None:
            state.grad_eval_count += 1
    x_adv = batch + adv_eps * np.sign(input_grad)
    _, cache = qrnn.forward(params, x_adv, heads=[q_index], return_cache=True)
    g_adv = qrnn.backward_quantile_gradients(cache, params, targets, heads=[q_index])[q_index]
    if state is not None:
        state.grad_eval_count += 1
    return g_adv


def aero_quantile_step(params, batch, targets, state, keep_vectors=False):
    """One full per-quantile AERO update of ``params`` (in place).

    Natural gradients for every quantile are computed before any update, so
    the cooperation term always uses the current step's gradients.
    """
    cfg = params.config
    nq = cfg.n_quantiles
    if nq != state.n_quantiles:
        raise ValueError("optimizer state and model disagree on the number of quantiles")
    batch = np.asarray(batch, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("empty batch")
    state.steps += 1
    trace = StepTrace(step=state.steps)

    preds, cache = qrnn.forward(params, batch, return_cache=True)
    grads, x_grads = qrnn.backward_quantile_gradients(cache, params, targets, input_grad=True)
    state.grad_eval_count += nq
    trace.losses = qrnn.quantile_losses(params, batch, targets, preds)
    for i, g in enumerate(grads):
        _require_finite(g, "gradient", f"quantile {cfg.quantiles[i]}")

    if state.velocities is None:
        state.velocities = [np.zeros(params.size) for _ in range(nq)]

    redirects, adv_grads, lrs = [], [], []
    for i in range(nq):
        g = grads[i]
        g_adv = adversarial_gradient(params, batch, targets, i, state.adv_eps,
                                     input_grad=x_grads[i], state=state)
        _require_finite(g_adv, "adversarial gradient", f"quantile {cfg.quantiles[i]}")
        delta = qrnn.predictive_variance(preds[i]) if state.anticipate else 0.0

        adv_norm = float(np.linalg.norm(g_adv))
        disturbed = g_adv
        if delta != 0.0 and adv_norm > 0.0:
            disturbed = g_adv + (delta / adv_norm) * g_adv
        coef = projection_coefficient(disturbed, g)
        if state.clamp_alignment and coef < 0:
            r = np.zeros_like(g)
            coef = 0.0
        else:
            r = project_onto(disturbed, g)
        for j in range(nq):
            if j != i and state.coop[i, j] != 0.0:
                r = r + state.coop[i, j] * grads[j]
        _require_finite(r, "redirection", f"quantile {cfg.quantiles[i]}")

        r_sq = float(r @ r)
        g_sq = float(g @ g)
        lam = state.energy_mix
        energy = lam * r_sq + (1.0 - lam) * g_sq
        # rounding guard: a convex combination lies in the bracket
        energy = min(max(energy, min(r_sq, g_sq)), max(r_sq, g_sq))
        if not math.isfinite(energy):
            raise NonFiniteError("energy", f"quantile {cfg.quantiles[i]}")
        state.energies[i] = energy
        lr = state.lr[i] / (1.0 + state.energy_rate * energy)

        state.velocities[i] = state.momentum * state.velocities[i] + (1.0 - state.momentum) * r
        _require_finite(state.velocities[i], "velocity", f"quantile {cfg.quantiles[i]}")

        redirects.append(r)
        adv_grads.append(g_adv)
        lrs.append(lr)
        trace.grad_norm.append(math.sqrt(g_sq))
        trace.adv_grad_norm.append(adv_norm)
        trace.delta.append(delta)
        trace.alignment.append(coef)
        trace.redirect_norm.append(math.sqrt(r_sq))
        trace.energy.append(energy)
        trace.redirect_sq.append(r_sq)
        trace.grad_sq.append(g_sq)
        trace.lr.append(lr)
        trace.grad_evals.append(2)

    if state.redistribute:
        total = sum(float(np.linalg.norm(v)) for v in state.velocities)
        if state.momentum_target is None:
            state.momentum_target = total
        else:
            d = state.target_decay
            state.momentum_target = d * state.momentum_target + (1.0 - d) * total
        state.velocities = redistribute_momentum(state.velocities, state.momentum_target)
        trace.momentum_target = state.momentum_target

    for i in range(nq):
        params.flat -= lrs[i] * state.velocities[i]
    _require_finite(params.flat, "parameter update")

    trace.velocity_norm = [float(np.linalg.norm(v)) for v in state.velocities]
    trace.momentum_total = sum(trace.velocity_norm)
    if keep_vectors:
        trace.grads, trace.adv_grads, trace.redirects = grads, adv_grads, redirects
    return trace
