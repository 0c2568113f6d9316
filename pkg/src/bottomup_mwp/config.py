"""Model presets, training hyperparameters and run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .dataio import DEFAULT_CONSTANT_POOL


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    d_op: int = 64
    head_hidden: int = 256
    comb_heads: int = 4
    max_len: int = 128
    # 1/sqrt(d) on combination scores; the raw dot product saturates the sigmoid
    scale_scores: bool = True
    op_loss_all_pairs: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads or self.d_model % self.comb_heads:
            raise ValueError("head counts must divide d_model")


PRESETS = {
    "desk": ModelConfig(),
    "paper-scale": ModelConfig(
        d_model=768, n_heads=12, n_layers=12, d_ff=3072, d_op=256,
        head_hidden=512, comb_heads=12, max_len=512,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


@dataclass
class Hyperparams:
    alpha: float = 1.5
    beta: float = 1.0
    gamma: float = 0.05
    theta: float = 1.5
    beam_k: Optional[int] = None  # None: derived from the training set
    l_max: Optional[int] = None
    beam_floor: int = 4
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    lr_halving_period: int = 20
    seed: int = 0
    answer_tol: float = 1e-4
    checkpoint_every: int = 10
    eval_every: int = 1
    target_accuracy: Optional[float] = None  # stop once validation reaches this
    eval_workers: int = 1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beam_k is not None and self.beam_k < 1:
            raise ValueError("beam_k must be >= 1")
        if self.l_max is not None and self.l_max < 1:
            raise ValueError("l_max must be >= 1")


@dataclass
class RunConfig:
    train_path: str
    val_path: Optional[str] = None
    data_format: str = "native"
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    constant_pool: list = field(default_factory=lambda: list(DEFAULT_CONSTANT_POOL))
    output_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return preset(self.preset, **self.model)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        raw = dict(raw)
        hyper = Hyperparams(**raw.pop("hyper", {}))
        cfg = cls(hyper=hyper, **raw)
        if base_dir is not None:
            for attr in ("train_path", "val_path"):
                value = getattr(cfg, attr)
                if value is not None and not Path(value).is_absolute():
                    setattr(cfg, attr, str(base_dir / value))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
