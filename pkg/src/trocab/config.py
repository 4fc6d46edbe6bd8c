"""Run configuration: one nested dataclass tree, serialized as plain
``section.key=value`` text.

The format is dependency-free and diff-friendly: one assignment per line,
``#`` comments, tuples as comma lists.  Parsing rejects unknown keys and
round-trips exactly (``parse(serialize(cfg)) == cfg``).

Two presets ship with the package: ``desk`` (small synthetic task sized for a
workstation) and ``paper`` (the full-scale parameterization, for reference).
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, fields
from typing import get_args, get_origin, get_type_hints

from .nn import TrainConfig
from .quantize import BitDepthSchedule
from .rawpipe import GeneratorConfig
from .tro import TroConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    feature_dim: int = 64
    n_train: int = 8000
    n_val: int = 1000
    n_test: int = 1000
    separation: float = 4.0
    noise: float = 1.0
    label_noise: float = 0.0
    test_hard_fraction: float = 0.0
    hard_scale: float = 0.2
    body_min: int = 256
    body_max: int = 2048
    structure_seed: int = 7


@dataclass
class ModelSection:
    hidden: tuple[int, ...] = (64, 32)
    dropout_rate: float = 0.2


@dataclass
class TrainSection:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5


@dataclass
class TroSection:
    tau: float = 0.1
    T: int = 10
    cache_capacity: int = 10_000
    combine_slope: float = 20.0
    combine_center: float = 0.15
    eta: float = 0.01
    lam: float = 0.5
    probe_delta: float = 0.02
    probe_epsilon: float = 0.1
    window_capacity: int = 512
    order: str = "gate_first"
    verify_cache_keys: bool = False


@dataclass
class CabdrSection:
    tau_low: float = 0.1
    tau_high: float = 0.3


@dataclass
class AttackSection:
    epsilons: tuple[float, ...] = (0.1, 0.3, 0.5)
    pgd_steps: int = 20
    kappa: float = 0.0
    c_init: float = 0.1
    cw_iters: int = 100
    cw_lr: float = 0.01
    max_queries: int = 5000
    t_eot: int = 10
    square_p_init: float = 0.3


@dataclass
class BenchSection:
    warmup_iters: int = 50
    timed_iters: int = 200
    runs: int = 5
    batch_sizes: tuple[int, ...] = (64, 128, 256)
    latency_batch: int = 64
    latency_units: int = 150
    asr_probe_rows: int = 256


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    tro: TroSection = field(default_factory=TroSection)
    cabdr: CabdrSection = field(default_factory=CabdrSection)
    attack: AttackSection = field(default_factory=AttackSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seeds: tuple[int, ...] = (42, 123, 456, 789, 1024)

    # -- adapters into the module-level config types ------------------------

    def generator_config(self, hard_fraction: float = 0.0) -> GeneratorConfig:
        """Sampler config; ``hard_fraction`` injects the ambiguous
        subpopulation used for held-out streams."""
        d = self.data
        return GeneratorConfig(
            feature_dim=d.feature_dim,
            separation=d.separation,
            noise=d.noise,
            label_noise=d.label_noise,
            hard_fraction=hard_fraction,
            hard_scale=d.hard_scale,
            body_min=d.body_min,
            body_max=d.body_max,
            seed=d.structure_seed,
        )

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate,
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            patience=t.patience,
            seed=seed,
        )

    def schedule(self) -> BitDepthSchedule:
        return BitDepthSchedule(tau_low=self.cabdr.tau_low, tau_high=self.cabdr.tau_high)

    def tro_config(self) -> TroConfig:
        t = self.tro
        return TroConfig(
            tau=t.tau,
            T=t.T,
            cache_capacity=t.cache_capacity,
            combine_slope=t.combine_slope,
            combine_center=t.combine_center,
            eta=t.eta,
            lam=t.lam,
            schedule=self.schedule(),
            probe_delta=t.probe_delta,
            probe_epsilon=t.probe_epsilon,
            window_capacity=t.window_capacity,
            order=t.order,
            verify_cache_keys=t.verify_cache_keys,
        )


_SECTIONS = ("data", "model", "train", "tro", "cabdr", "attack", "bench")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, typ):
    origin = get_origin(typ)
    if origin is tuple:
        elem = get_args(typ)[0]
        if text.strip() == "":
            return ()
        return tuple(_parse_value(part.strip(), elem) for part in text.split(","))
    if typ is bool:
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    if typ is str:
        return text.strip()
    raise ConfigError(f"unsupported config field type {typ!r}")


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section_name in _SECTIONS:
        section = getattr(cfg, section_name)
        for f in fields(section):
            lines.append(f"{section_name}.{f.name}={_format_value(getattr(section, f.name))}")
    lines.append(f"seeds={_format_value(cfg.seeds)}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    hints = {name: get_type_hints(type(getattr(cfg, name))) for name in _SECTIONS}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw_line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key == "seeds":
            cfg.seeds = _parse_value(value, tuple[int, ...])
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} needs a section prefix")
        section_name, field_name = key.split(".", 1)
        if section_name not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section_name!r}")
        if field_name not in hints[section_name]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = _parse_value(value, hints[section_name][field_name])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        setattr(getattr(cfg, section_name), field_name, parsed)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def load_preset(name: str) -> RunConfig:
    resource = importlib.resources.files("trocab").joinpath(f"presets/{name}.cfg")
    try:
        text = resource.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset {name!r}") from exc
    return parse_config(text)
