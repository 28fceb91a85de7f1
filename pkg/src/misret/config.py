"""Experiment configuration: one JSON file, six sections, documented defaults."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .env import WorldSpec
from .infer import SearchConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class WorldSection:
    n_users: int = 200
    n_items: int = 50
    d_f: int = 8
    k: int = 10
    max_steps: int = 30
    quit_patience: int = 3
    quit_frac: float = 0.2
    r_max: float = 5.0
    reward_scale: float = 5.0
    noise_sigma: float = 0.3
    repeat_decay: float = 0.5
    factor_scale: float = 1.0
    episodes: int = 1000
    mix: list = field(default_factory=lambda: [[0.1, 0.5], [0.8, 0.5]])
    n_bins: int = 32
    gamma: float = 1.0


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    T_max: int = 20
    dropout: float = 0.1
    embed_kind: str = "mlp"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    freeze_mode: str = "lora"
    lm_ctx: int = 64


@dataclass
class TrainSection:
    alpha: float = 0.99
    lam: float = 0.1
    lr: float = 3e-4
    batch: int = 64
    steps: int = 20000
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    aux_language: bool = True
    max_head: bool = True
    max_stop_grad: bool = False
    bin_stop_grad: bool = True
    random_history: bool = True
    lang_batch: int = 16
    lang_len: int = 64
    init_from_prior: bool = True
    lm_steps: int = 2000
    lm_lr: float = 1e-3
    lm_batch: int = 32


@dataclass
class SearchSection:
    delta: int = 2
    kappa: float = 10.0
    action_mode: str = "greedy"
    tie_break: str = "longest"
    tie_tol: float = 0.0
    n_envs: int = 100
    episodes_per_env: int = 1


@dataclass
class PathsSection:
    out_dir: str = "runs/default"
    dataset: str = "dataset.jsonl"
    corpus: str | None = None
    prior: str = "prior.ckpt"
    checkpoint: str = "model.ckpt"
    train_log: str = "train_log.jsonl"
    report: str = "eval_report.json"


SECTIONS = {
    "world": WorldSection,
    "model": ModelSection,
    "train": TrainSection,
    "search": SearchSection,
    "paths": PathsSection,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for name, klass in SECTIONS.items():
            sec = d.get(name, {}) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            kw[name] = klass(**sec)
        kw["seed"] = int(d.get("seed", 0))
        return cls(**kw)

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def override(self, key: str, value: Any) -> "ExperimentConfig":
        """Copy with ``section.key`` (or ``seed``) set; string values are parsed as JSON when possible."""
        d = copy.deepcopy(self.to_dict())
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        if key == "seed":
            d["seed"] = value
        else:
            sec, _, name = key.partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigError(f"override key must look like section.key, got {key!r}")
            if name not in {f.name for f in fields(SECTIONS[sec])}:
                raise ConfigError(f"unknown key {name!r} in section {sec!r}")
            d[sec][name] = value
        return ExperimentConfig.from_dict(d)

    # -- builders -----------------------------------------------------------

    def world_spec(self) -> WorldSpec:
        w = self.world
        keys = {f.name for f in fields(WorldSpec)} - {"seed"}
        return WorldSpec(**{k: getattr(w, k) for k in keys}, seed=self.seed)

    def model_config(self, d_s: int, n_items: int, n_bins: int, vocab_size: int = 0,
                     return_scale: float = 1.0, reward_scale: float = 1.0) -> ModelConfig:
        return ModelConfig(d_s=d_s, n_items=n_items, n_bins=n_bins, vocab_size=vocab_size,
                           return_scale=return_scale, reward_scale=reward_scale, **asdict(self.model))

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)} - {"seed"}
        return TrainConfig(**{k: getattr(self.train, k) for k in keys}, seed=self.seed)

    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(delta=s.delta, T_max=self.model.T_max, kappa=s.kappa, action_mode=s.action_mode,
                            tie_break=s.tie_break, tie_tol=s.tie_tol, use_search=self.train.max_head)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else Path(self.paths.out_dir) / p

    def variant(self) -> str:
        name = "MDT4Rec"
        if not self.train.init_from_prior:
            name += "-LM"
        if not self.train.max_head:
            name += "-Max"
        return f"{name}[embed={self.model.embed_kind},freeze={self.model.freeze_mode}]"


def stitch_demo_config() -> ExperimentConfig:
    """Defaults for the two-trajectory toy: a small model trained from scratch."""
    cfg = ExperimentConfig()
    cfg.model = ModelSection(n_layers=1, n_heads=2, d_model=32, d_ff=64, dropout=0.0, lora_rank=0,
                             freeze_mode="full")
    # Large batches keep the weakly penalised over-estimates from drifting upward.
    cfg.train = TrainSection(steps=1500, batch=512, lr=1e-3, aux_language=False, init_from_prior=False)
    cfg.search = SearchSection(n_envs=1, tie_tol=0.05)
    cfg.paths = PathsSection(out_dir="runs/stitch")
    return cfg
