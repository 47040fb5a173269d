"""Experiment configuration: one JSON document, defaults filled in and echoed."""
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .encoders import EncoderConfig
from .losses import LossConfig
from .prompts import PromptConfig
from .synthdata import SynthConfig
from .trainer import PRESETS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalOptions:
    n_trials: int = 10
    distractor_fraction: float = 0.0
    settings: Optional[list] = None  # None -> all 12

    def validate(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if not 0 <= self.distractor_fraction <= 1:
            raise ValueError("distractor_fraction must lie in [0, 1]")


SECTIONS = {
    "encoder": EncoderConfig,
    "prompt": PromptConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalOptions,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def resolve(self):
        """Propagate the shared seed and dimensions, then validate everything."""
        for section in (self.encoder, self.prompt, self.train, self.synth):
            section.seed = self.seed
        self.encoder.d_feat = self.synth.d_feat
        self.prompt.d_tok = self.encoder.d_tok
        self.prompt.n_identities = self.synth.n_identities
        try:
            for name in SECTIONS:
                getattr(self, name).validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        return self

    def apply_preset(self, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[name].items():
            setattr(self.train, k, v)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in fields(cls)}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, val in raw.items():
            if key in SECTIONS:
                kwargs[key] = _section(SECTIONS[key], val, key)
            else:
                kwargs[key] = val
        return cls(**kwargs)


def _section(kind, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return kind(**raw)
    except TypeError as err:
        raise ConfigError(f"{name}: {err}") from None


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}") from None
    return ExperimentConfig.from_dict(raw)
