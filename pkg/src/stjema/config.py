"""Run configuration: one flat, documented key set shared by every command."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .objective import LossWeights
from .optim import SCHEDULES
from .signal import SynthConfig

PHASES = ("pretrain", "finetune", "probe")
TASKS = ("classify", "regress")
PATH_KEYS = ("manifest", "output_dir", "checkpoint", "resume")

# Phase-specific defaults applied by :meth:`TrainConfig.for_phase`.
PHASE_DEFAULTS = {
    "pretrain": {"steps": 2000, "batch_size": 8, "lr": 1e-3, "weight_decay": 1e-4, "schedule": "cosine"},
    "finetune": {"epochs": 30, "batch_size": 32, "lr": 5e-4, "weight_decay": 1e-4, "schedule": "one-cycle"},
    "probe": {"epochs": 100, "batch_size": 32, "lr": 1e-2, "weight_decay": 1e-4, "schedule": "constant"},
}


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    seed: int = 0

    # optimization
    steps: int = 2000
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    checkpoint_every: int = 0  # 0 saves only at the end

    # objective
    gamma: float = 0.5
    lambda_node: float = 1.0
    lambda_adj: float = 1e-4
    ema_beta: float = 0.996
    n_masks: int = 4
    alpha_min: float = 0.1
    alpha_max: float = 0.3
    use_node: bool = True
    use_edge: bool = True
    use_spatial: bool = True
    use_temporal: bool = True

    # dynamic graphs
    window: int = 50
    stride: int = 16
    density: float = 0.3
    slice_length: int = 0  # 0 keeps the full scan

    # model
    n_nodes: int = 16
    d_eta: int = 8
    d_v: int = 16
    d_enc: int = 16
    gin_layers: int = 4
    gin_hidden: int = 32
    token_hidden: int = 16
    channel_hidden: int = 32
    decoder: str = "mixer"

    # downstream
    task: str = "classify"
    label_key: str = "class"
    label_fraction: float = 1.0
    missing_ratio: float = 0.0
    test_fraction: float = 0.3
    ortho_coef: float = 1e-5
    probe_train_readout: bool = False
    cache_features: bool = True

    # synthetic corpus
    n_subjects: int = 200
    n_timepoints: int = 200
    n_states: int = 4
    switch_rates: list = field(default_factory=lambda: [0.05, 0.45])
    ar_coeff: float = 0.5
    noise_sd: float = 0.1
    within_corr: float = 0.6

    # multi-seed runs and ablation sweeps
    ablate_variants: list = field(default_factory=lambda: ["full", "no_node", "no_edge", "no_spatial", "no_temporal"])
    seeds: list = field(default_factory=list)  # empty runs only `seed`
    mask_ratio_grid: list = field(default_factory=list)

    # paths
    manifest: str = ""
    output_dir: str = "runs"
    checkpoint: str = ""
    resume: str = ""

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        if phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
        return cls(phase=phase, **{**PHASE_DEFAULTS[phase], **overrides})

    def validate(self) -> "TrainConfig":
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.steps < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("steps, epochs and batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("need lr > 0 and weight_decay >= 0")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if not 0.0 <= self.missing_ratio < 1.0:
            raise ConfigError("missing_ratio must lie in [0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError("ema_beta must lie in [0, 1]")
        if self.n_masks < 1:
            raise ConfigError("n_masks must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError("density must lie in (0, 1]")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.slice_length < 0:
            raise ConfigError("slice_length must be >= 0")
        self.model_config().validate()
        self.loss_weights().validate()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_nodes=self.n_nodes, d_eta=self.d_eta, d_v=self.d_v, d_enc=self.d_enc, d_dec=self.d_enc,
            gin_layers=self.gin_layers, gin_hidden=self.gin_hidden, token_hidden=self.token_hidden,
            channel_hidden=self.channel_hidden, decoder=self.decoder,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            gamma=self.gamma, lambda_node=self.lambda_node, lambda_adj=self.lambda_adj,
            use_node=self.use_node, use_edge=self.use_edge,
            use_spatial=self.use_spatial, use_temporal=self.use_temporal,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_subjects=self.n_subjects, N=self.n_nodes, T_max=self.n_timepoints,
            n_states=self.n_states, switch_rates=tuple(self.switch_rates), ar_coeff=self.ar_coeff,
            noise_sd=self.noise_sd, seed=self.seed, within_corr=self.within_corr,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of every key except file paths."""
        body = {k: v for k, v in self.to_dict().items() if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


KEYS = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, value):
    default = KEYS[key].default
    if default is dataclasses.MISSING:
        default = KEYS[key].default_factory()
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is list:
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, list):
                raise ValueError(value)
            return value
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {kind.__name__})") from exc


def from_mapping(data: dict, base: TrainConfig | None = None) -> TrainConfig:
    unknown = sorted(set(data) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if base is None:
        phase = data.get("phase", "pretrain")
        if phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
        base = TrainConfig.for_phase(phase)
    return base.replace(**{k: _coerce(k, v) for k, v in data.items()})


def parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not key=value")
        out[key.strip()] = value
    return out


def load_config(path=None, overrides: list[str] | None = None, phase: str | None = None) -> TrainConfig:
    """File keys override phase defaults; ``key=value`` overrides win over both."""
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    if phase is not None:
        data = {**data, "phase": phase}
    extra = parse_overrides(overrides or [])
    cfg = from_mapping({**data, **extra})
    return cfg.validate()


def write_config(cfg: TrainConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
