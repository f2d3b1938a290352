"""Flat run configuration shared by every CLI command.

Values come from (lowest to highest precedence) dataclass defaults, a
``key = value`` config file, ``--set key=value`` overrides and explicit flags.
"""

from __future__ import annotations

import subprocess
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .decode import DecodeConfig
from .errors import ConfigurationError
from .model import ModelConfig
from .synth import CorpusSpec
from .training import TrainSettings


@dataclass
class RunConfig:
    # model
    num_layers: int = 2
    num_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 16
    rope_base: float = 10000.0
    max_logical_position: int = 128
    # corpus
    kind: str = "counting"
    sequence_length: int = 48
    num_sequences: int = 4000
    corpus: str = ""             # comma-separated corpus files
    # training
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    train_block_size: int = 32
    alpha: float = 0.1
    cosine_decay: bool = True
    seed: int = 0
    # decoding
    strategy: str = "streaming"
    window_size: int = 6
    entropy_threshold: float = 0.5
    distance_penalty: float = 0.10
    temperature: float = 0.0
    max_new_tokens: int = 24
    block_size: int = 32
    entropy_temperature: float = 1.0
    distance_mode: str = "slot"
    prompt_length: int = 16
    # bench sweeps (comma-separated)
    task: str = "counting"
    sweep_tau: str = "0.5"
    sweep_lambda: str = "0.1"
    sweep_window: str = "6"
    sweep_block: str = "32"
    # mask dump
    dump_length: int = 4
    dump_block: int = 2
    # paths
    checkpoint: str = "model.wdlm"
    prompts: str = ""
    out: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.num_layers, self.num_heads, self.head_dim, self.vocab_size,
                           self.rope_base, self.max_logical_position)

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(self.kind, self.vocab_size, self.sequence_length, self.num_sequences,
                          seed=self.seed, max_logical_position=self.max_logical_position)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(steps=self.steps, batch_size=self.batch_size,
                             learning_rate=self.learning_rate, block_size=self.train_block_size,
                             alpha=self.alpha, seed=self.seed, cosine_decay=self.cosine_decay)

    def decode_config(self, **overrides) -> DecodeConfig:
        values = dict(window_size=self.window_size, entropy_threshold=self.entropy_threshold,
                      distance_penalty=self.distance_penalty, temperature=self.temperature,
                      max_new_tokens=self.max_new_tokens, seed=self.seed,
                      block_size=self.block_size, entropy_temperature=self.entropy_temperature,
                      distance_mode=self.distance_mode)
        values.update(overrides)
        return DecodeConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_assignments(lines, source: str = "<set>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = coerce(key, raw)
    return values


def load_run_config(path: str | None = None, overrides=(), flags: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    values = {}
    if path:
        values.update(parse_assignments(Path(path).read_text().splitlines(), source=path))
    values.update(parse_assignments(overrides))
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = value
    for key, value in values.items():
        setattr(cfg, key, value)
    return cfg


def parse_list(raw: str, kind=float) -> list:
    return [kind(x) for x in str(raw).replace(" ", "").split(",") if x]


def build_id() -> str:
    """git-describe style identifier, falling back to the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__
