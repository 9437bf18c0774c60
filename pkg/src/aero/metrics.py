"""Forecast evaluation metrics and the paired t-test."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .qrnn import pinball_loss
from .tensor import ShapeError

_BETACF_TOL = 1e-12
_BETACF_MAX_ITER = 500
_TINY = 1e-300


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, df):
    """Two-sided Student-t tail probability P(|T| >= |t|)."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b):
    """Paired t-test of ``a - b``; returns ``(t_stat, two_sided_p, df)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-D with equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0, df
        raise ValueError("differences have zero variance and non-zero mean; t is undefined")
    t = mean / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, df), df


def picp(lower, upper, targets):
    """Fraction of targets with lower <= y <= upper."""
    lower, upper, targets = (np.asarray(v, dtype=np.float64) for v in (lower, upper, targets))
    if not lower.shape == upper.shape == targets.shape:
        raise ShapeError("lower, upper and targets must share a shape")
    return float(np.mean((lower <= targets) & (targets <= upper)))


def interval_width(lower, upper):
    return float(np.mean(np.asarray(upper) - np.asarray(lower)))


def crossing_rate(predictions):
    """Fraction of cells whose predictions decrease somewhere along the level order.

    ``predictions`` is a sequence of equally shaped arrays ordered by
    ascending quantile level. Ties are not crossings.
    """
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in predictions])
    if len(stack) < 2:
        return 0.0
    crossed = np.any(np.diff(stack, axis=0) < 0, axis=0)
    return float(np.mean(crossed))


def pinball_metric(predictions, targets, levels, orientation="paper"):
    """Mean pinball loss at each level."""
    if len(predictions) != len(levels):
        raise ValueError("one prediction array per level is required")
    return [pinball_loss(p, targets, q, orientation) for p, q in zip(predictions, levels)]


@dataclass
class MetricsReport:
    levels: list
    pinball: list
    picp_80: float
    interval_width: float
    crossing_rate: float
    train_losses: list = field(default_factory=list)
    test_losses: list = field(default_factory=list)
    t_stat: float = None
    p_value: float = None
    df: int = None
    grad_evals: int = None
    optimizer: str = None

    def to_record(self):
        return asdict(self)

    def flat_rows(self):
        """(metric, value) pairs for CSV export."""
        rows = [(f"pinball_q{q}", v) for q, v in zip(self.levels, self.pinball)]
        rows += [("picp_80", self.picp_80), ("interval_width", self.interval_width),
                 ("crossing_rate", self.crossing_rate), ("t_stat", self.t_stat),
                 ("p_value", self.p_value), ("df", self.df), ("grad_evals", self.grad_evals)]
        return rows
