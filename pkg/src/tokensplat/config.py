"""Run configuration read from a sectioned ``key = value`` file.

Sections: [model], [data], [train], [eval]. Every key maps to a dataclass
field; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ConfigError, ModelConfig
from .synth import SynthConfig, SynthError


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    lr_backbone: float = 0.0  # > 0 gives the encoder/decoder its own learning rate
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 100
    supervise_targets: bool = True  # add the held-out target views to the render loss

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0 or self.lr_backbone < 0:
            raise ConfigError("learning rates must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    scene_dir: str = ""
    pose: str = "1 0 0 0 0 0 0"  # qw qx qy qz tx ty tz, camera -> canonical
    pullback: float = 0.0  # move the render camera back along its optical axis


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if (self.model.height, self.model.width) != (self.data.height, self.data.width):
            raise ConfigError(
                f"model image size {self.model.height}x{self.model.width} differs from data "
                f"{self.data.height}x{self.data.width}"
            )

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            part = getattr(self, name)
            lines.append(f"[{name}]")
            lines.extend(f"{f.name} = {_format(getattr(part, f.name))}" for f in dataclasses.fields(part))
            lines.append("")
        return "\n".join(lines)


SECTIONS = {"model": ModelConfig, "data": SynthConfig, "train": TrainConfig, "eval": EvalConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw: str, kind: str, where: str):
    kind = kind.replace(" ", "")
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case so typos are caught, not folded
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    parts = {}
    for name, cls in SECTIONS.items():
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in types:
                    raise ConfigError(f"{source}: unknown key [{name}] {key}")
                values[key] = _convert(raw, str(types[key]), f"[{name}] {key}")
        try:
            parts[name] = cls(**values)
        except (ConfigError, SynthError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))
