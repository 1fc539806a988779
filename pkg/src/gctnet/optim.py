"""SGD with momentum, step-decay schedule with warmup, and weight-decay groups.

GCT ``beta`` vectors are never weight-decayed. GCT ``alpha``/``gamma`` are
decayed unless ``decay_gct_alpha_gamma`` is switched off.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    warmup_lr: float = 0.005
    warmup_epochs: int = 1
    decay_epochs: list = field(default_factory=lambda: [10, 15])
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    decay_gct_alpha_gamma: bool = True

    def __post_init__(self):
        self.decay_epochs = [int(e) for e in self.decay_epochs]
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.warmup_epochs < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("warmup_epochs and epochs must be >= 0, batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParamGroup:
    name: str
    decay_exempt: bool = False


DECAY = ParamGroup("decay")
GCT_BETA = ParamGroup("gct_beta", decay_exempt=True)
GCT_ALPHA_GAMMA_EXEMPT = ParamGroup("gct_alpha_gamma", decay_exempt=True)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    n = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.decay_factor ** n


def sgd_step(param, grad, velocity, group: ParamGroup, lr: float, cfg: TrainConfig):
    """One in-place update: ``v = m v + g + wd p``; ``p -= lr v``. Returns ``(param, velocity)``."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"velocity {velocity.shape}")
    wd = 0.0 if group.decay_exempt else cfg.weight_decay
    velocity *= cfg.momentum
    velocity += grad
    if wd:
        velocity += wd * param
    param -= lr * velocity
    return param, velocity


def param_group(layer, key: str, cfg: TrainConfig) -> ParamGroup:
    if layer.kind == "gct":
        if key == "beta":
            return GCT_BETA
        if not cfg.decay_gct_alpha_gamma:
            return GCT_ALPHA_GAMMA_EXEMPT
    return DECAY


class SGD:
    """Momentum SGD over every trainable array of a network."""

    def __init__(self, net, cfg: TrainConfig):
        self.cfg = cfg
        self.entries = [(name, layer, key, param_group(layer, key, cfg))
                        for name, layer, key in net.named_parameters()]
        self.velocity = {name: np.zeros_like(layer.params[key])
                         for name, layer, key, _ in self.entries}

    def groups(self) -> dict:
        return {name: group for name, _, _, group in self.entries}

    def step(self, lr: float):
        for name, layer, key, group in self.entries:
            sgd_step(layer.params[key], layer.grads[key].astype(layer.params[key].dtype, copy=False),
                     self.velocity[name], group, lr, self.cfg)
