"""Run configuration: nested dataclasses read from ``[section]`` / ``key = value`` text."""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, get_type_hints

__all__ = [
    "ConfigError",
    "DataSection",
    "KanSection",
    "BankSection",
    "PlacementSection",
    "TemperatureSection",
    "ModelSection",
    "TrainSection",
    "EvalSection",
    "IoSection",
    "RunConfig",
    "load_config",
    "parse_config",
    "dump_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | manifest
    path: str = ""  # manifest of the training split when source = manifest
    test_path: str = ""  # optional held-out manifest; otherwise split by eval.test_fraction
    classes: int = 4
    train_per_class: int = 400
    test_per_class: int = 100
    size: int = 64
    jitter: float = 1.0


@dataclass
class KanSection:
    grid: int = 5
    order: int = 3
    hidden: int = 0  # 0 means 2n+1, capped at hidden_cap
    hidden_cap: int = 128
    lambda_l1: float = 1e-4
    lambda_smooth: float = 1e-5
    p_deact: float = 0.05
    base_term: bool = True
    outer: str = "weights"  # weights | spline
    domain_lo: float = -1.0
    domain_hi: float = 1.0


@dataclass
class BankSection:
    capacity: int = 1024
    source: str = "z1"  # z1 | z3 | both
    include_current: bool = False
    warmup_entries: int = 64


@dataclass
class PlacementSection:
    student: str = "kan"
    momentum_teacher: str = "kan"
    style_teacher: str = "kan"


@dataclass
class TemperatureSection:
    student: float = 0.1
    teacher: float = 0.07  # sharper than the student; equal values let the embeddings collapse
    shared: float = 0.0  # > 0 forces one temperature on every branch


@dataclass
class ModelSection:
    encoder_stages: str = "16:2,32:2,32:2"  # channels:stride per stage
    embed_dim: int = 32
    ema_momentum: float = 0.99
    style_weight: float = 0.5
    shared_head: bool = False
    kan: KanSection = field(default_factory=KanSection)
    bank: BankSection = field(default_factory=BankSection)
    placement: PlacementSection = field(default_factory=PlacementSection)
    temperatures: TemperatureSection = field(default_factory=TemperatureSection)


@dataclass
class TrainSection:
    epochs: int = 25
    batch_size: int = 32
    base_lr: float = 0.0075
    warmup_epochs: float = 2.0
    min_lr_factor: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    grid_adapt: bool = False
    grid_gamma: float = 0.5
    guard_teachers: bool = False


@dataclass
class EvalSection:
    test_fraction: float = 0.2
    probe_l2: float = 1e-4


@dataclass
class IoSection:
    checkpoint_dir: str = "checkpoints"
    report: str = "report.json"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self) -> "RunConfig":
        if self.data.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be synthetic or manifest, got {self.data.source!r}")
        if self.data.source == "manifest" and not self.data.path:
            raise ConfigError("data.path is required when data.source = manifest")
        for branch in ("student", "momentum_teacher", "style_teacher"):
            kind = getattr(self.model.placement, branch)
            if kind not in ("kan", "mlp"):
                raise ConfigError(f"model.placement.{branch} must be kan or mlp, got {kind!r}")
        if self.model.kan.outer not in ("weights", "spline"):
            raise ConfigError(f"model.kan.outer must be weights or spline, got {self.model.kan.outer!r}")
        if self.model.bank.source not in ("z1", "z3", "both"):
            raise ConfigError(f"model.bank.source must be z1, z3 or both, got {self.model.bank.source!r}")
        if not 0 < self.eval.test_fraction < 1:
            raise ConfigError("eval.test_fraction must lie in (0, 1)")
        self.encoder_stages()
        return self

    def encoder_stages(self) -> List[Tuple[int, int]]:
        try:
            stages = [tuple(int(v) for v in s.split(":")) for s in self.model.encoder_stages.split(",")]
        except ValueError:
            raise ConfigError(f"bad model.encoder_stages {self.model.encoder_stages!r}") from None
        if not stages or any(len(s) != 2 or s[0] < 1 or s[1] < 1 for s in stages):
            raise ConfigError(f"bad model.encoder_stages {self.model.encoder_stages!r}")
        return stages

    def head_hidden(self, in_dim: int) -> int:
        k = self.model.kan
        return k.hidden if k.hidden > 0 else min(2 * in_dim + 1, k.hidden_cap)

    def taus(self) -> Tuple[float, float]:
        t = self.model.temperatures
        return (t.shared, t.shared) if t.shared > 0 else (t.student, t.teacher)


def _coerce(value: str, typ, where: str):
    v = value.strip()
    try:
        if typ is bool:
            low = v.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(v)
        if typ is int:
            return int(v)
        if typ is float:
            return float(v)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {value!r} as {typ.__name__}") from None
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        v = v[1:-1]
    return v


def _section_target(cfg: RunConfig, name: str):
    obj = cfg
    for part in name.split("."):
        if not dataclasses.is_dataclass(obj) or part not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown section [{name}]")
        obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(f"[{name}] is a key, not a section")
    return obj


def apply_setting(cfg: RunConfig, dotted: str, value: str) -> None:
    """Set ``section.key`` from its text form, rejecting unknown keys."""
    *path, key = dotted.split(".")
    target = _section_target(cfg, ".".join(path)) if path else cfg
    hints = get_type_hints(type(target))
    if key not in hints or dataclasses.is_dataclass(hints[key]):
        raise ConfigError(f"unknown key {dotted!r}")
    setattr(target, key, _coerce(value, hints[key], dotted))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00unused")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            dotted = key if section == "run" else f"{section}.{key}"
            apply_setting(cfg, dotted, value)
    return cfg.validate()


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig().validate()
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def to_dict(cfg) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    """Canonical JSON snapshot (sorted keys) used in checkpoints and reports."""
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_from_dict(d: Dict[str, Any]) -> RunConfig:
    cfg = RunConfig()

    def fill(obj, values, prefix):
        for k, v in values.items():
            if not hasattr(obj, k):
                raise ConfigError(f"unknown key {prefix}{k!r}")
            cur = getattr(obj, k)
            if dataclasses.is_dataclass(cur):
                fill(cur, v, f"{prefix}{k}.")
            else:
                setattr(obj, k, v)

    fill(cfg, d, "")
    return cfg.validate()
