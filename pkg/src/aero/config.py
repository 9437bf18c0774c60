"""Run configuration: a flat ``key = value`` text file plus command-line overrides.

Each line is ``key = value`` or ``key: type = value``; ``#`` starts a comment.
When a type is written it must agree with the field's declared type.
"""

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SyntheticConfig
from .qrnn import ORIENTATIONS, QrnnConfig

OPTIMIZERS = ("sgd", "adam", "aero-shared", "aero-quantile")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    data_csv: str = ""                 # empty -> synthetic series
    synthetic_seed: int = 2024
    days: int = 365
    test_fraction: float = 0.2
    # synthetic generator (ignored when data_csv is set)
    price_noise: float = SyntheticConfig.noise_std
    ar_coef: float = SyntheticConfig.ar_coef
    daily_amplitude: float = SyntheticConfig.daily_amplitude
    weekly_amplitude: float = SyntheticConfig.weekly_amplitude
    spike_prob: float = SyntheticConfig.spike_prob
    spike_scale: float = SyntheticConfig.spike_scale
    # model
    conv1_channels: int = 16
    conv2_channels: int = 32
    kernel_size: int = 3
    hidden_dim: int = 64
    horizon: int = 20
    quantiles: tuple = (0.1, 0.5, 0.9)
    loss_orientation: str = "paper"
    # optimizer
    optimizer: str = "aero-shared"
    lr: float = 1.0
    noise: float = 1e-3                # beta, Gaussian redirection strength
    momentum: float = 0.95             # mu
    shared_base: str = "plain"
    adam_lr: float = 1e-3
    energy_mix: float = 0.5            # lambda
    energy_rate: float = 0.0           # kappa
    adv_eps: float = 0.01
    coop_strength: float = 0.1         # beta_c
    redistribute: bool = False
    clamp_alignment: bool = False
    anticipate: bool = True
    # loop
    epochs: int = 50
    batch_size: int = 1024
    seed: int = 0
    out: str = "runs/default"
    steptrace: bool = True
    plot: bool = False
    forecast_origins: int = 0          # 0 -> every test origin
    # theory-check tolerances
    tol_redirection: float = 1e-6
    tol_equilibrium: float = 1e-8
    tol_convergence: float = 1e-3
    tol_regret_ratio: float = 0.2

    def qrnn_config(self, feature_dim):
        return QrnnConfig(feature_dim, self.conv1_channels, self.conv2_channels, self.kernel_size,
                          self.hidden_dim, self.horizon, self.quantiles, self.loss_orientation)

    def synthetic_config(self):
        return SyntheticConfig(noise_std=self.price_noise, ar_coef=self.ar_coef,
                               daily_amplitude=self.daily_amplitude,
                               weekly_amplitude=self.weekly_amplitude,
                               spike_prob=self.spike_prob, spike_scale=self.spike_scale)

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss_orientation not in ORIENTATIONS:
            raise ConfigError(f"loss_orientation must be one of {ORIENTATIONS}")
        if self.shared_base not in ("plain", "adam"):
            raise ConfigError("shared_base must be 'plain' or 'adam'")
        if self.data_csv and not Path(self.data_csv).is_file():
            raise ConfigError(f"data file {self.data_csv!r} does not exist")
        checks = [
            (self.days >= 2, "days must be >= 2"),
            (0.0 < self.test_fraction < 1.0, "test_fraction must lie in (0, 1)"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0 and self.adam_lr > 0, "learning rates must be > 0"),
            (self.noise >= 0, "noise must be >= 0"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (0.0 <= self.energy_mix <= 1.0, "energy_mix must lie in [0, 1]"),
            (self.energy_rate >= 0, "energy_rate must be >= 0"),
            (self.adv_eps >= 0, "adv_eps must be >= 0"),
            (self.coop_strength >= 0, "coop_strength must be >= 0"),
            (self.price_noise >= 0 and self.spike_scale >= 0,
             "price_noise and spike_scale must be >= 0"),
            (0.0 <= self.spike_prob <= 1.0, "spike_prob must lie in [0, 1]"),
            (abs(self.ar_coef) < 1.0, "ar_coef must lie in (-1, 1)"),
            (self.forecast_origins >= 0, "forecast_origins must be >= 0"),
            (min(self.tol_redirection, self.tol_equilibrium, self.tol_convergence,
                 self.tol_regret_ratio) >= 0, "tolerances must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.qrnn_config(27)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}: {_type_name(f.type)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


_TYPES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}


def _type_name(tp):
    return tp if isinstance(tp, str) else tp.__name__


def _format(value):
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(name, tp, raw):
    raw = raw.strip()
    tp = _TYPES[_type_name(tp)]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return tp(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {tp.__name__}") from None


def _field_map():
    return {f.name: f for f in fields(RunConfig)}


def parse_assignment(text, where="override"):
    """``key = value`` / ``key: type = value`` -> (key, parsed value)."""
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {text!r}")
    lhs, raw = text.split("=", 1)
    key, _, declared = lhs.partition(":")
    key, declared = key.strip(), declared.strip()
    fmap = _field_map()
    if key not in fmap:
        raise ConfigError(f"{where}: unknown key {key!r}")
    tp = fmap[key].type
    if declared and declared != _type_name(tp):
        raise ConfigError(f"{where}: {key} is declared {declared} but must be {_type_name(tp)}")
    return key, _parse(key, tp, raw)


def load_config(path=None, overrides=()):
    """Defaults <- config file <- overrides (later wins)."""
    values = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path!r} does not exist")
        for lineno, line in enumerate(p.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = parse_assignment(line, f"{path}:{lineno}")
            values[key] = val
    for item in overrides:
        key, val = parse_assignment(item)
        values[key] = val
    return dataclasses.replace(RunConfig(), **values).validate()
