"""Model hyperparameters."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

MODULES = ("object", "attribute", "relation", "function")
FUSION_MODES = ("soft", "hard", "ones")


@dataclass
class ModelConfig:
    """Dimensions use the symbols of the module table; defaults are desk scale.

    ``modules`` restricts the encoder (e.g. ``("object",)`` for a
    single-module baseline, in which case the controller is bypassed and
    the fusion weight is fixed one-hot).
    """

    vocab_size: int = 0
    d_r: int = 64
    d_v: int = 32
    k: int = 4
    d_h: int = 64
    d_a: int = 32
    d_z: int = 32
    j: int = 4
    d_e: int = 32
    d_m: int = 32
    K: int = 64
    d_word: int = 32
    mlp_hidden: int | None = None
    leaky_slope: float = 0.01
    use_reason: bool = True
    fusion: str = "soft"
    modules: tuple[str, ...] = MODULES
    gumbel_tau: float = 1.0
    stop_layout_grad: bool = False
    bos_id: int = 1
    eos_id: int = 2
    max_len: int = 16
    memory_vocab: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.modules = tuple(self.modules)
        self.memory_vocab = tuple(self.memory_vocab)
        if self.d_r % self.k:
            raise ValueError(f"k={self.k} heads must divide d_r={self.d_r}")
        if self.d_z % self.j:
            raise ValueError(f"j={self.j} heads must divide d_z={self.d_z}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        bad = [m for m in self.modules if m not in MODULES]
        if bad or not self.modules:
            raise ValueError(f"unknown modules {bad}; choose from {MODULES}")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel temperature must be positive")

    @property
    def d_k(self) -> int:
        return self.d_r // self.k

    @property
    def d_j(self) -> int:
        return self.d_z // self.j

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or self.d_r

    @property
    def uses_controller(self) -> bool:
        return len(self.modules) > 1 and self.fusion != "ones"

    @classmethod
    def full_scale(cls, **overrides) -> ModelConfig:
        """Full-size dimensions (d_r 2048, d_v 1000, k 8, ...)."""
        base = dict(d_r=2048, d_v=1000, k=8, d_h=1000, d_a=512, d_z=1000, j=8,
                    d_e=1000, d_m=1000, K=10000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modules"] = list(self.modules)
        d["memory_vocab"] = list(self.memory_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
