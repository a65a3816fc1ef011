"""Run configuration: one YAML file mapped onto nested dataclasses, validated up front."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .aligner import AlignerConfig
from .env import EnvConfig
from .flow import PretrainConfig
from .instruction import DEFAULT_BODY_PARTS, DEFAULT_SPEEDS, DEFAULT_VERBS, Vocabulary
from .jast import ModelConfig
from .rlhr import RLConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VocabConfig:
    verbs: tuple = DEFAULT_VERBS
    body_parts: tuple = DEFAULT_BODY_PARTS
    speeds: tuple = DEFAULT_SPEEDS

    def build(self) -> Vocabulary:
        return Vocabulary(self.verbs, self.body_parts, self.speeds)


@dataclass(frozen=True)
class DataConfig:
    repeats: int = 16
    frames: int = 240
    perturb_sigma: float = 0.01
    corrupt_fraction: float = 0.05
    stride: int = 4
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.repeats < 0 or self.frames < 4 or self.stride < 1:
            raise ValueError(f"need repeats >= 0, frames >= 4, stride >= 1; got {self.repeats}, "
                             f"{self.frames}, {self.stride}")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError(f"corrupt_fraction must be in [0, 1], got {self.corrupt_fraction}")


@dataclass(frozen=True)
class EvalConfig:
    rollouts_per_instruction: int = 4
    T_max: int = 240
    K_steps: int = 5
    guidance_w: float = 2.0
    r_precision_batch: int = 32
    seed_offset: int = 1000

    def __post_init__(self):
        if self.rollouts_per_instruction < 1 or self.T_max < 4 or self.K_steps < 1:
            raise ValueError("eval needs rollouts_per_instruction >= 1, T_max >= 4, K_steps >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    env: EnvConfig = field(default_factory=EnvConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: PretrainConfig = field(default_factory=PretrainConfig)
    aligner: AlignerConfig = field(default_factory=AlignerConfig)
    rlhr: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if (self.model.d_s, self.model.d_a) != (self.env.d_s, self.env.d_a):
            raise ValueError(f"model d_s/d_a ({self.model.d_s}, {self.model.d_a}) do not match the "
                             f"environment ({self.env.d_s}, {self.env.d_a})")
        if self.rlhr.n_envs != self.vocab.build().M:
            raise ValueError(f"rlhr.n_envs ({self.rlhr.n_envs}) must equal the number of instructions "
                             f"({self.vocab.build().M}), one prompt per environment")
        if self.rlhr.text_window > self.aligner.max_len:
            raise ValueError(f"rlhr.text_window ({self.rlhr.text_window}) exceeds aligner.max_len "
                             f"({self.aligner.max_len})")
        if self.aligner.max_len > self.data.frames:
            raise ValueError(f"aligner.max_len ({self.aligner.max_len}) exceeds data.frames ({self.data.frames})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}; valid keys are {sorted(known)}")
    defaults, kwargs = cls(), {}
    for name, value in data.items():
        default = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list, got {value!r}")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    # the model's state/action sizes follow the environment unless given explicitly
    env = _build(EnvConfig, data.get("env", {}), "env")
    model = dict(data.get("model", {}))
    model.setdefault("d_s", env.d_s)
    model.setdefault("d_a", env.d_a)
    data["model"] = model
    return _build(RunConfig, data, "")


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data)


def dump(cfg: RunConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)
