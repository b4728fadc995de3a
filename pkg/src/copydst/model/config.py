from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace


@dataclass
class TrainConfig:
    """Encoder size, optimization schedule and ablation switches.

    ``loss_weights`` are (gate, span, refer) and must sum to one.
    """

    loss_weights: tuple[float, float, float] = (0.8, 0.1, 0.1)
    lr: float = 5e-3
    warmup_proportion: float = 0.1
    dropout: float = 0.1
    max_len: int = 64
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    slot_value_dropout: float = 0.2
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    grad_clip: float = 1.0
    patience: int | None = None
    min_count: int = 1
    dtype: str = "float32"
    use_history: bool = True
    use_aux: bool = True
    mask_history: bool = True
    single_copy: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ValueError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")
        if abs(sum(self.loss_weights) - 1.0) > 1e-9:
            raise ValueError(f"loss_weights must sum to 1, got {sum(self.loss_weights)}")
        for name in ("warmup_proportion", "dropout", "slot_value_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def without_refer(self) -> "TrainConfig":
        """Weights for corpora that carry no refer labels at all."""
        return replace(self, loss_weights=(0.8, 0.2, 0.0))

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))
