"""Experiment configuration: nested dataclasses with strict JSON loading.

Every key is explicit.  ``Config.to_dict()`` materializes all defaults, and
the digest is computed from that materialized form, so two configs share a
digest iff they describe the same experiment.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass
class SystemConfig:
    K: int = 2
    N_t: int = 8
    N_r: int = 2
    N_c: int = 8
    N_RF: int = 2
    N_s: int = 1
    m: int = 4
    d_model: int = 32
    L1: int = 1
    L2: int = 2
    L3: int = 1
    L4: int = 2
    L5: int = 2
    f_s: float = 100e6

    @property
    def layers(self) -> tuple[int, int, int, int, int]:
        return (self.L1, self.L2, self.L3, self.L4, self.L5)


@dataclass
class ChannelConfig:
    rho_pol: float = 0.7
    xpd_db: float = 8.0
    paths_min: int = 3
    paths_max: int = 8
    angle_max_rad: float = math.pi / 3
    delay_fraction: float = 0.25      # tau_max * f_s / N_c
    uplink_gains: str = "independent"  # or "shared"


@dataclass
class ModelConfig:
    cpi_enabled: bool = True
    cpi_shared: bool = True
    cpi_softmax: str = "column"        # or "row"
    mab_wiring: str = "parallel"       # or "serial"
    mab_first_axis: int = 1            # token axis gated by channel-half A


@dataclass
class SsccConfig:
    q: int = 6
    r: str = "3/4"
    a: int = 256
    ber: float = 0.0
    clip_sigmas: float = 3.0


@dataclass
class UplinkConfig:
    feedback: str = "djscc"            # or "sscc"
    mode: str = "simultaneous"         # simultaneous | tdma_mrc | awgn
    snr_ul_db: float = 0.0
    sscc: SsccConfig = field(default_factory=SsccConfig)


@dataclass
class DataConfig:
    train_size: int = 512
    eval_size: int = 256
    train_seed: int = 1000
    eval_seed: int = 900000


@dataclass
class TrainConfig:
    batch: int = 64
    steps: int = 500
    epochs: int = 0                    # informational; the full preset sets 1000
    warmup: int = 100
    factor: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    snr_dl_db: float = 10.0
    seed: int = 0
    dtype: str = "float64"
    log_every: int = 50


@dataclass
class EvalConfig:
    snr_dl_grid_db: list = field(default_factory=lambda: [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0])
    noise_seed: int = 4242
    schemes: list = field(default_factory=lambda: ["proposed", "pca_hb_perfect", "random"])
    ber_grid: list = field(default_factory=lambda: [0.0, 0.01, 0.05, 0.1])
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    random_draws: int = 8


@dataclass
class Config:
    system: SystemConfig = field(default_factory=SystemConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    uplink: UplinkConfig = field(default_factory=UplinkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        problems: list[str] = []
        cfg = _build(cls, data, "", problems)
        if not problems:
            problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {path}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, overrides: dict[str, Any] | list[str]) -> "Config":
        data = self.to_dict()
        if isinstance(overrides, list):
            overrides = dict(_parse_override(o) for o in overrides)
        problems = []
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    problems.append(f"unknown key '{key}'")
                    break
                node = node[p]
            else:
                if parts[-1] not in node:
                    problems.append(f"unknown key '{key}'")
                else:
                    node[parts[-1]] = value
        try:
            cfg = Config.from_dict(data)
        except ConfigError as exc:
            problems.extend(exc.problems)
        if problems:
            raise ConfigError(problems)
        return cfg

    # -- semantic checks -------------------------------------------------
    def problems(self) -> list[str]:
        s, out = self.system, []
        for name in ("K", "N_t", "N_r", "N_c", "N_RF", "m", "d_model"):
            if getattr(s, name) < 1:
                out.append(f"system.{name} must be >= 1")
        if s.N_r % 2:
            out.append("system.N_r must be even (dual-polarized ports)")
        if s.N_s != 1:
            out.append("system.N_s must be 1")
        if s.m > s.N_c:
            out.append("system.m must not exceed system.N_c")
        if not s.K <= s.N_RF <= s.N_t:
            out.append("need system.K <= system.N_RF <= system.N_t")
        if s.d_model % 2:
            out.append("system.d_model must be even")
        if any(v < 0 for v in s.layers):
            out.append("system.L1..L5 must be >= 0")
        c = self.channel
        if not 0.0 <= c.rho_pol <= 1.0:
            out.append("channel.rho_pol must lie in [0, 1]")
        if not 1 <= c.paths_min <= c.paths_max:
            out.append("need 1 <= channel.paths_min <= channel.paths_max")
        if not 0.0 < c.angle_max_rad < math.pi / 2:
            out.append("channel.angle_max_rad must lie in (0, pi/2)")
        if c.uplink_gains not in ("independent", "shared"):
            out.append("channel.uplink_gains must be 'independent' or 'shared'")
        mo = self.model
        if mo.cpi_softmax not in ("column", "row"):
            out.append("model.cpi_softmax must be 'column' or 'row'")
        if mo.mab_wiring not in ("parallel", "serial"):
            out.append("model.mab_wiring must be 'parallel' or 'serial'")
        if mo.mab_first_axis not in (1, 2):
            out.append("model.mab_first_axis must be 1 or 2")
        u = self.uplink
        if u.feedback not in ("djscc", "sscc"):
            out.append("uplink.feedback must be 'djscc' or 'sscc'")
        if u.mode not in ("simultaneous", "tdma_mrc", "awgn"):
            out.append("uplink.mode must be simultaneous, tdma_mrc or awgn")
        try:
            r = Fraction(u.sscc.r)
            if not 0 < r <= 1:
                out.append("uplink.sscc.r must lie in (0, 1]")
        except (ValueError, ZeroDivisionError):
            out.append("uplink.sscc.r must be a rational like '3/4'")
        if u.sscc.a < 2 or u.sscc.a & (u.sscc.a - 1):
            out.append("uplink.sscc.a must be a power of 2")
        if not 0.0 <= u.sscc.ber <= 1.0:
            out.append("uplink.sscc.ber must lie in [0, 1]")
        t = self.train
        if t.dtype not in ("float32", "float64"):
            out.append("train.dtype must be 'float32' or 'float64'")
        if t.batch < 1 or t.warmup < 1:
            out.append("train.batch and train.warmup must be >= 1")
        return out


FULL_DEFAULTS = {
    "system": {"N_c": 32, "N_t": 64, "N_r": 2, "K": 2, "N_RF": 2, "m": 10, "d_model": 256,
               "L1": 1, "L2": 2, "L3": 1, "L4": 2, "L5": 2},
    "data": {"train_size": 90000, "eval_size": 10000},
    "train": {"batch": 256, "epochs": 1000, "warmup": 4000, "factor": 1.0, "dtype": "float32"},
}

SMOKE_DEFAULTS = {
    "system": {"K": 2, "N_t": 8, "N_c": 8, "N_r": 2, "N_RF": 2, "m": 4, "d_model": 16,
               "L1": 1, "L2": 1, "L3": 1, "L4": 1, "L5": 1},
}


def preset(name: str) -> Config:
    """Named configurations: ``desk`` (default), ``smoke`` and ``full``."""
    base = Config().to_dict()
    extra = {"desk": {}, "smoke": SMOKE_DEFAULTS, "full": FULL_DEFAULTS}
    if name not in extra:
        raise ConfigError([f"unknown preset '{name}'"])
    _merge(base, copy.deepcopy(extra[name]))
    return Config.from_dict(base)


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override '{text}' is not of the form key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _build(cls, data: Any, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"'{prefix or 'root'}' must be an object")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            problems.append(f"unknown key '{prefix}{key}'")
    kwargs = {}
    defaults = cls()
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.", problems)
            continue
        ok = _coerce(default, value)
        if ok is _BAD:
            problems.append(f"key '{prefix}{name}' expects {type(default).__name__}, got {value!r}")
        else:
            kwargs[name] = ok
    return cls(**kwargs)


_BAD = object()


def _coerce(default, value):
    if isinstance(default, bool):
        return value if isinstance(value, bool) else _BAD
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            return _BAD
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return _BAD
        return float(value)
    if isinstance(default, str):
        return value if isinstance(value, str) else _BAD
    if isinstance(default, list):
        return list(value) if isinstance(value, list) else _BAD
    return value
