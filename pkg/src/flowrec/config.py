"""Run configuration: typed dataclasses and a flat INI file format.

Every section of the file maps onto one dataclass; keys must be field names.
Unknown sections or keys are rejected so a typo never silently falls back to
a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAJECTORIES = ("straight", "cosine")
TIMESTEP_SAMPLERS = ("mode", "uniform", "logit_normal", "cosmap")
LOSS_TARGETS = ("x_prediction", "v_prediction")
FUSION_MODES = ("sample", "deterministic")
TIME_CONVENTIONS = ("noise_level", "literal")
DATA_FORMATS = ("movielens100k", "tsv_triples")


class ConfigError(ValueError):
    pass


def _check_choice(name: str, value: str, choices: tuple[str, ...]) -> None:
    if value not in choices:
        raise ConfigError(f"{name}={value!r} not in {choices}")


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    format: str = "movielens100k"

    def __post_init__(self):
        _check_choice("data.format", self.format, DATA_FORMATS)


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 4
    decoder1_layers: int = 2
    decoder2_layers: int = 2
    ff_mult: int = 4
    dropout: float = 0.1
    max_len: int = 50
    recon_hidden: tuple[int, ...] = (512, 2048)
    init_std: float = 0.02
    # final LayerNorm on each decoder stack
    output_norm: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} not divisible by model.heads={self.heads}")
        if self.max_len < 1:
            raise ConfigError("model.max_len must be >= 1")


@dataclass(frozen=True)
class FlowConfig:
    trajectory: str = "straight"
    timestep: str = "mode"
    s: float = 1.0
    logit_loc: float = 0.0
    logit_scale: float = 1.0
    delta: float = 0.001

    def __post_init__(self):
        _check_choice("flow.trajectory", self.trajectory, TRAJECTORIES)
        _check_choice("flow.timestep", self.timestep, TIMESTEP_SAMPLERS)
        if self.delta < 0:
            raise ConfigError(f"flow.delta must be >= 0, got {self.delta}")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.4
    learning_rate: float = 0.001
    batch_size: int = 512
    epochs: int = 20
    patience: int = 10
    eval_every: int = 1
    loss_target: str = "x_prediction"
    # keep only the most recent N next-item pairs of each user's training region
    augment_window: int | None = None
    # how the flow term reduces over the embedding dimension: sum or mean
    fm_reduction: str = "sum"

    def __post_init__(self):
        _check_choice("train.loss_target", self.loss_target, LOSS_TARGETS)
        _check_choice("train.fm_reduction", self.fm_reduction, ("sum", "mean"))
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("train.alpha and train.beta must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 30
    seed: int = 0
    fusion: str = "deterministic"
    time_convention: str = "noise_level"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampler.steps must be >= 1, got {self.steps}")
        _check_choice("sampler.fusion", self.fusion, FUSION_MODES)
        _check_choice("sampler.time_convention", self.time_convention, TIME_CONVENTIONS)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def replace(self, **overrides) -> RunConfig:
        """Return a copy with dotted-key overrides, e.g. ``{"flow.s": 0.4}``."""
        sections = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        top = {}
        for key, value in overrides.items():
            if "." in key:
                sec, name = key.split(".", 1)
                if sec not in _SECTIONS:
                    raise ConfigError(f"unknown config section: {sec}")
                cls = _SECTIONS[sec]
                ftypes = _field_types(cls)
                if name not in ftypes:
                    raise ConfigError(f"unknown config key: {key}")
                if isinstance(value, str):
                    value = _parse_value(ftypes[name], value, key)
                sections[sec] = dataclasses.replace(sections[sec], **{name: value})
            else:
                if key not in ("seed", "out_dir"):
                    raise ConfigError(f"unknown config key: {key}")
                top[key] = int(value) if key == "seed" else str(value)
        sections.update(top)
        return RunConfig(**sections)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser["run"] = {"seed": str(self.seed), "out_dir": self.out_dir}
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            parser[sec] = {
                f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_flat(self) -> dict[str, str]:
        flat = {"run.seed": str(self.seed), "run.out_dir": self.out_dir}
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                flat[f"{sec}.{f.name}"] = _format_value(getattr(obj, f.name))
        return flat

    @classmethod
    def from_ini(cls, text: str) -> RunConfig:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        kwargs = {}
        for sec in parser.sections():
            if sec == "run":
                for key, raw in parser[sec].items():
                    if key == "seed":
                        kwargs["seed"] = int(raw)
                    elif key == "out_dir":
                        kwargs["out_dir"] = raw
                    else:
                        raise ConfigError(f"unknown config key: run.{key}")
                continue
            if sec not in _SECTIONS:
                raise ConfigError(f"unknown config section: {sec}")
            target = _SECTIONS[sec]
            ftypes = _field_types(target)
            values = {}
            for key, raw in parser[sec].items():
                if key not in ftypes:
                    raise ConfigError(f"unknown config key: {sec}.{key}")
                values[key] = _parse_value(ftypes[key], raw, f"{sec}.{key}")
            kwargs[sec] = target(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_ini(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "flow": FlowConfig,
    "train": TrainConfig,
    "sampler": SamplerConfig,
}


_BOOLS = {"1": True, "true": True, "yes": True, "on": True,
          "0": False, "false": False, "no": False, "off": False}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(tp, raw: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if origin in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.lower() in ("none", ""):
                return None
            return _parse_value(args[0], raw, key)
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(inner(v) for v in raw.split(",") if v.strip())
        if tp is bool:
            if raw.lower() not in _BOOLS:
                raise ValueError(raw)
            return _BOOLS[raw.lower()]
        return tp(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def substream_seed(master: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named random stream."""
    seq = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
