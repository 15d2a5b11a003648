"""Run configuration: one JSON file with model/train/data/io sections.

Every field has a default; unknown sections or keys are hard errors so a
typo cannot silently fall back to a default. Flag overrides are applied by
the CLI after parsing; parse -> serialize -> parse is lossless.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .model import ARCHES, ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad run configuration (unknown key, bad value, unsupported arch)."""


@dataclass
class ModelSection:
    arch: str = "double_decoder"
    d: int = 64
    layers: int = 12
    ctx_layers: int = 8
    gen_layers: int = 4
    vocab_size: int = 259
    base_width: int = 64
    ffn_mult: int = 4
    max_seq_len: int = 2048


@dataclass
class DataSection:
    corpus: str = ""
    tokenizer: str = "byte"
    seq_len: int = 2048


@dataclass
class IOSection:
    checkpoint_dir: str = "checkpoints"
    metrics_path: str = "metrics.ndjson"
    seed: int = 0


_TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


def _default_train_section() -> dict:
    tc = TrainConfig()
    out = {}
    for name in _TRAIN_FIELDS:
        value = getattr(tc, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def _build_section(cls, values: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {', '.join(unknown)}")
    return cls(**values)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: dict = field(default_factory=_default_train_section)
    data: DataSection = field(default_factory=DataSection)
    io: IOSection = field(default_factory=IOSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - {"model", "train", "data", "io"})
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        train = _default_train_section()
        extra = sorted(set(raw.get("train", {})) - set(_TRAIN_FIELDS))
        if extra:
            raise ConfigError(f"unknown key(s) in section 'train': {', '.join(extra)}")
        train.update(raw.get("train", {}))
        return cls(
            model=_build_section(ModelSection, raw.get("model", {}), "model"),
            train=train,
            data=_build_section(DataSection, raw.get("data", {}), "data"),
            io=_build_section(IOSection, raw.get("io", {}), "io"),
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_dict(self) -> dict:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dict(self.train),
            "data": dataclasses.asdict(self.data),
            "io": dataclasses.asdict(self.io),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def set_override(self, dotted: str, value: str) -> None:
        """Apply one 'section.key=value' override; values parse as JSON."""
        if "." not in dotted:
            raise ConfigError(f"override '{dotted}' must look like section.key")
        section, key = dotted.split(".", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        if section == "train":
            if key not in _TRAIN_FIELDS:
                raise ConfigError(f"unknown key(s) in section 'train': {key}")
            self.train[key] = parsed
        elif section in ("model", "data", "io"):
            target = getattr(self, section)
            if not hasattr(target, key):
                raise ConfigError(f"unknown key(s) in section '{section}': {key}")
            setattr(target, key, parsed)
        else:
            raise ConfigError(f"unknown config section(s): {section}")

    # ------------------------------------------------------------------
    def validate_arch(self) -> str:
        arch = self.model.arch
        if arch not in ARCHES:
            hint = "out of scope" if arch in ("sed", "encoder_decoder") else "unknown"
            raise ConfigError(
                f"architecture '{arch}' is {hint}; supported: {', '.join(ARCHES)}"
            )
        return arch

    def model_config(self) -> ModelConfig:
        m = self.model
        try:
            return ModelConfig(
                d=m.d, layers=m.layers, ctx_layers=m.ctx_layers, gen_layers=m.gen_layers,
                vocab_size=m.vocab_size, base_width=m.base_width, ffn_mult=m.ffn_mult,
                max_seq_len=m.max_seq_len,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        kwargs = dict(self.train)
        for key in ("eval_fracs",):
            if isinstance(kwargs.get(key), list):
                kwargs[key] = tuple(kwargs[key])
        try:
            return TrainConfig(seed=self.io.seed, **kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
