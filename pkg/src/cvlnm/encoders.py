"""The four feature-extraction modules: object, attribute, relation, function."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Linear, Module, MultiHeadAttention
from .tensor import Tensor


@dataclass
class FeatureSet:
    """Region features of one image: ``R_O`` and ``R_A`` are both N x d_r."""

    R_O: np.ndarray
    R_A: np.ndarray

    def __post_init__(self):
        self.R_O = np.asarray(self.R_O, dtype=np.float64)
        self.R_A = np.asarray(self.R_A, dtype=np.float64)
        if self.R_O.ndim != 2 or self.R_O.shape != self.R_A.shape:
            raise ValueError(f"R_O {self.R_O.shape} and R_A {self.R_A.shape} must be equal N x d_r")
        if self.R_O.shape[0] < 1:
            raise ValueError("a feature set needs at least one region")
        if not (np.all(np.isfinite(self.R_O)) and np.all(np.isfinite(self.R_A))):
            raise ValueError("feature values must be finite")

    @property
    def N(self) -> int:
        return self.R_O.shape[0]

    @property
    def d_r(self) -> int:
        return self.R_O.shape[1]


@dataclass
class ModuleFeatures:
    V_O: Tensor
    V_A: Tensor
    V_R: Tensor
    mask: np.ndarray  # (B, N) bool, True for real regions


def batch_features(feats: list[FeatureSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-pad to the largest N; returns ``(R_O, R_A, mask)`` with a batch axis."""
    n_max = max(f.N for f in feats)
    d_r = feats[0].d_r
    R_O = np.zeros((len(feats), n_max, d_r))
    R_A = np.zeros_like(R_O)
    mask = np.zeros((len(feats), n_max), dtype=bool)
    for b, f in enumerate(feats):
        if f.d_r != d_r:
            raise ValueError(f"mixed feature widths {d_r} and {f.d_r} in one batch")
        R_O[b, :f.N] = f.R_O
        R_A[b, :f.N] = f.R_A
        mask[b, :f.N] = True
    return R_O, R_A, mask


class ObjectModule(Module):
    """``LeakyReLU(FC(R))`` applied row-wise."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc = Linear(cfg.d_r, cfg.d_v, rng)
        self.slope = cfg.leaky_slope

    def __call__(self, R) -> Tensor:
        return T.leaky_relu(self.fc(T.tensor(R) if not isinstance(R, Tensor) else R), self.slope)


class AttributeModule(ObjectModule):
    pass


class RelationModule(Module):
    """Multi-head self-attention over object regions, then FC-ReLU-FC and LeakyReLU."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.att = MultiHeadAttention(cfg.d_r, cfg.d_r, cfg.k, cfg.d_k, cfg.d_r, rng)
        self.fc1 = Linear(cfg.d_r, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, cfg.d_v, rng)
        self.slope = cfg.leaky_slope
        self.last_attention: np.ndarray | None = None

    def __call__(self, R, mask: np.ndarray | None = None) -> Tensor:
        R = R if isinstance(R, Tensor) else T.tensor(R)
        M, att = self.att(R, R, key_mask=mask)
        self.last_attention = att.data
        return T.leaky_relu(self.fc2(T.relu(self.fc1(M))), self.slope)


class FunctionModule(Module):
    """Linguistic module: ``LeakyReLU(FC(h2))``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fc = Linear(cfg.d_h, cfg.d_v, rng)
        self.slope = cfg.leaky_slope

    def __call__(self, h2: Tensor) -> Tensor:
        return T.leaky_relu(self.fc(h2), self.slope)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.obj = ObjectModule(cfg, rng)
        self.attr = AttributeModule(cfg, rng)
        self.rela = RelationModule(cfg, rng)

    def __call__(self, R_O: np.ndarray, R_A: np.ndarray, mask: np.ndarray) -> ModuleFeatures:
        return ModuleFeatures(self.obj(R_O), self.attr(R_A), self.rela(R_O, mask), mask)
