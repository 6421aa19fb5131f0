from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from ..activations import parse_activation
from ..icnn import ICNNConfig

__all__ = ["TrainConfig"]


@dataclass
class TrainConfig:
    """Hyperparameters of one training run.

    Defaults follow the toy-density setup: Adam at 0.005, minibatches of
    128, 50 epochs, Gaussian-softplus activations symmetrized on the
    input-facing units.
    """

    n_flows: int = 3
    n_hidden_layers: int = 3
    n_hidden_units: int = 32
    augmented: bool = True
    activation_first: str = "gaussian+symmetrized@gain=1"
    activation_rest: str = "gaussian+plain@gain=1"
    actnorm: bool = True
    learning_rate: float = 0.005
    batch_size: int = 128
    epochs: int = 50
    cg_atol: float = 1e-3
    slq_steps: int = 20
    slq_probes: int = 32
    seed: int = 0
    grad_clip_norm: float | None = None
    lr_schedule: str = "constant"
    log_every: int = 50
    checkpoint_every: int = 0
    val_max: int = 2000
    val_mode: str = "auto"

    def __post_init__(self):
        for name in ("n_flows", "n_hidden_layers", "n_hidden_units", "batch_size", "slq_steps", "slq_probes", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.cg_atol > 0:
            raise ValueError("cg_atol must be positive")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive when set")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.val_mode not in ("auto", "exact", "slq"):
            raise ValueError(f"val_mode must be auto, exact or slq, got {self.val_mode!r}")
        parse_activation(self.activation_first)
        parse_activation(self.activation_rest)

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "cosine" and total_steps > 0:
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))
        return self.learning_rate

    def icnn_config(self, dim: int) -> ICNNConfig:
        return ICNNConfig(
            input_dim=dim,
            depth=self.n_hidden_layers,
            width=self.n_hidden_units,
            augmented=self.augmented,
            activation_first=parse_activation(self.activation_first),
            activation_rest=parse_activation(self.activation_rest),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {', '.join(sorted(unknown))}")
        return cls(**d)
