"""Flat run configuration: presets, ``key = value`` files and ``--key value`` overrides."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import SyntheticSpec
from .gradcheck import DEFAULT_SEED
from .losses import REGDB_LAMBDAS, SYSU_LAMBDAS
from .pipeline import ModelConfig
from .trainer import TrainConfig

COMMANDS = ("synth", "train", "eval", "gradcheck", "export-embeddings")
DATA_ROOT_ENV = "CYCLETRANS_DATA_ROOT"


class ConfigError(ValueError):
    """Bad key, bad value or unreadable config file."""


@dataclass
class RunConfig:
    command: str = "train"
    preset: str = ""
    config: str = ""
    seed: int = 0
    data_root: str = "data"
    out: str = "runs/latest"
    checkpoint: str = ""
    # synthetic data
    num_identities: int = 32
    samples_per_modality: int = 10
    test_samples_per_modality: int = 4
    hw: int = 18
    raw_dim: int = 16
    identity_scale: float = 1.0
    modality_scale: float = 8.0
    offset_jitter: float = 0.0
    noise_scale: float = 0.1
    # model
    variant: str = "full"
    dim: int = 32
    num_queries: int = 7
    num_prototypes: int = 64
    scale_dim: int | None = None
    init_std: float = 0.02
    # training
    epochs: int = 30
    lr: float = 3.5e-4
    milestones: tuple[int, ...] = (40, 70)
    decay: float = 0.1
    lambdas: tuple[float, ...] = SYSU_LAMBDAS
    margin: float = 0.5
    batch_identities: int = 8
    k_visible: int = 4
    k_infrared: int = 4
    clip: float | None = None
    checkpoint_every: int = 0
    # evaluation
    protocol: str = "single-shot"
    draws: int = 10
    metric: str = "cosine"
    # gradient audit
    step: float = 1e-3
    gradcheck_seed: int = DEFAULT_SEED

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        if len(self.lambdas) != 4:
            raise ConfigError("lambdas needs four values: sep, mmd, rec, aln")
        if self.protocol not in ("single-shot", "multi-shot"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        try:
            self.model_config(2)
            self.train_config()
            self.synth_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def synth_spec(self) -> SyntheticSpec:
        return SyntheticSpec(self.num_identities, self.samples_per_modality,
                             self.test_samples_per_modality, self.hw, self.raw_dim,
                             self.identity_scale, self.modality_scale, self.offset_jitter,
                             self.noise_scale, self.seed)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(self.raw_dim, self.dim, self.num_queries, self.num_prototypes,
                           num_classes, self.scale_dim, self.variant, self.init_std)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, tuple(self.milestones), self.decay,
                           tuple(self.lambdas), self.margin, self.batch_identities,
                           self.k_visible, self.k_infrared, self.clip, self.checkpoint_every,
                           self.seed)

    def dump(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())


PRESETS: dict[str, dict[str, str]] = {
    "sysu-lambdas": {"lambdas": ",".join(map(str, SYSU_LAMBDAS))},
    "regdb-lambdas": {"lambdas": ",".join(map(str, REGDB_LAMBDAS))},
    # CPU-sized run on the synthetic task; see README for why init_std and lr differ
    "desk": {"epochs": "30", "lr": "1e-3", "init_std": "1.0", "num_identities": "32",
             "modality_scale": "8.0", "lambdas": ",".join(map(str, SYSU_LAMBDAS))},
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if key in ("milestones",):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if key in ("lambdas",):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if key in ("scale_dim",):
            return None if raw in ("", "none", "None") else int(raw)
        if key in ("clip",):
            return None if raw in ("", "none", "None") else float(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def parse_overrides(tokens) -> dict[str, str]:
    """``--key value`` pairs (``--key=value`` also accepted)."""
    out, i = {}, 0
    tokens = list(tokens)
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def resolve(command: str, overrides: dict[str, str], env=None) -> RunConfig:
    """defaults < preset < config file < environment data root < command-line flags."""
    env = os.environ if env is None else env
    layers: dict[str, str] = {}
    file_vals = read_config_file(overrides["config"]) if overrides.get("config") else {}
    preset = overrides.get("preset", file_vals.get("preset", ""))
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        layers.update(PRESETS[preset])
    layers.update(file_vals)
    if env.get(DATA_ROOT_ENV):
        layers["data_root"] = env[DATA_ROOT_ENV]
    layers.update(overrides)
    layers["command"] = command
    cfg = RunConfig()
    for key, raw in layers.items():
        setattr(cfg, key, _coerce(key, raw))
    return cfg.validate()
