"""Module controller: attention over module outputs, layout history and soft fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import MODULES, ModelConfig
from .nn import Linear, Module, MultiHeadAttention, normal_init, sinusoid_position, uniform_init
from .tensor import Tensor


@dataclass
class AttendedFeatures:
    v_O: Tensor
    v_A: Tensor
    v_R: Tensor
    v_F: Tensor
    alphas: dict[str, np.ndarray]

    def blocks(self) -> list[Tensor]:
        return [self.v_O, self.v_A, self.v_R, self.v_F]


class MSAtt(Module):
    """Additive attention ``a_i = w_a^T tanh(W_v v_i + W_h h)``, ``v^ = V softmax(a)``."""

    def __init__(self, d_v: int, d_h: int, d_a: int, rng: np.random.Generator):
        self.W_v = uniform_init(rng, d_v, (d_v, d_a))
        self.W_h = uniform_init(rng, d_h, (d_h, d_a))
        self.w_a = uniform_init(rng, d_a, (d_a,))

    def project(self, V: Tensor) -> Tensor:
        """``W_v v_i`` for every row; query-independent, so computed once per image."""
        return T.matmul(V, self.W_v)

    def __call__(self, V: Tensor, h: Tensor, mask: np.ndarray | None = None,
                 proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if V.shape[-2] == 0:
            raise ValueError("attention over zero regions")
        proj = self.project(V) if proj is None else proj
        q = T.matmul(h, self.W_h)                       # (..., d_a)
        q = q.reshape(q.shape[:-1] + (1, q.shape[-1]))   # (..., 1, d_a)
        scores = T.matmul(T.tanh(proj + q), self.w_a)    # (..., N)
        alpha = T.softmax(scores, axis=-1, mask=mask)
        a = alpha.reshape(alpha.shape[:-1] + (1, alpha.shape[-1]))
        v_hat = T.matmul(a, V)
        return v_hat.reshape(v_hat.shape[:-2] + (v_hat.shape[-1],)), alpha


class ModuleController(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.att_obj = MSAtt(cfg.d_v, cfg.d_h, cfg.d_a, rng)
        self.att_attr = MSAtt(cfg.d_v, cfg.d_h, cfg.d_a, rng)
        self.att_rela = MSAtt(cfg.d_v, cfg.d_h, cfg.d_a, rng)
        self.query_fc = Linear(3 * cfg.d_v + cfg.d_h, cfg.d_z, rng)
        # layout self-attention scales by the head width, soft fusion by d_z
        self.layout_att = MultiHeadAttention(cfg.d_z, cfg.d_z, cfg.j, cfg.d_j, cfg.d_z, rng)
        self.fuse_att = MultiHeadAttention(cfg.d_z, cfg.d_z, cfg.j, cfg.d_j, cfg.d_z, rng,
                                           scale_dim=cfg.d_z)
        self.weight_fc = Linear(cfg.d_z, 4, rng)
        self.label_emb = normal_init(rng, (4, cfg.d_z))
        self.z0 = normal_init(rng, (cfg.d_z,))

    # -- visual attention ------------------------------------------------
    def attend_all(self, feats, h1: Tensor, proj: dict | None = None):
        """Three independently parameterised MS-ATT reads with query ``h1``."""
        proj = proj or {}
        out, alphas = [], {}
        for key, V, att in (("object", feats.V_O, self.att_obj),
                            ("attribute", feats.V_A, self.att_attr),
                            ("relation", feats.V_R, self.att_rela)):
            v, a = att(V, h1, feats.mask, proj.get(key))
            out.append(v)
            alphas[key] = a.data
        return out, alphas

    def project_all(self, feats) -> dict:
        return {"object": self.att_obj.project(feats.V_O),
                "attribute": self.att_attr.project(feats.V_A),
                "relation": self.att_rela.project(feats.V_R)}

    def build_query(self, v_O: Tensor, v_A: Tensor, v_R: Tensor, h2: Tensor) -> Tensor:
        return T.relu(self.query_fc(T.concat([v_O, v_A, v_R, h2], axis=-1)))

    # -- layout ------------------------------------------------------------
    def start_layout(self, batch: int) -> Tensor:
        """``z_0`` plus the position-0 code, shape (B, d_z)."""
        z0 = self.z0 + sinusoid_position(0, self.cfg.d_z)
        return T.matmul(T.tensor(np.ones((batch, 1))), z0.reshape(1, self.cfg.d_z))

    def layout_self_attention(self, Z: Tensor) -> tuple[Tensor, Tensor]:
        if Z.shape[-2] < 1:
            raise ValueError("layout history is empty")
        return self.layout_att(Z, Z)

    def fusion_weights(self, Z_hat: Tensor, x: Tensor, active: np.ndarray | None = None):
        """Cross-attend query ``x`` over the layout, then ``w = softmax(FC(x_hat))``.

        ``active`` masks modules that are absent from the encoder.
        Returns ``(w, attention)``.
        """
        q = x.reshape(x.shape[:-1] + (1, x.shape[-1]))
        x_hat, att = self.fuse_att(q, Z_hat)
        x_hat = x_hat.reshape(x_hat.shape[:-2] + (x_hat.shape[-1],))
        return T.softmax(self.weight_fc(x_hat), axis=-1, mask=active), att

    def soft_fuse(self, Z_hat: Tensor, x: Tensor, blocks: list[Tensor]):
        """Returns ``(w, v_hat)``; ``v_hat`` concatenates ``w_b * v_b``."""
        w, _ = self.fusion_weights(Z_hat, x)
        return w, fuse_blocks(w, blocks)

    def module_embedding(self, w: Tensor, position: int | None) -> Tensor:
        z = T.matmul(w, self.label_emb)
        if position is not None:
            z = z + sinusoid_position(position, self.cfg.d_z)
        return z


def fuse_blocks(w: Tensor, blocks: list[Tensor]) -> Tensor:
    parts = [w[..., b:b + 1] * blocks[b] for b in range(4)]
    return T.concat(parts, axis=-1)


def hard_select(w: Tensor, temperature: float, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> Tensor:
    """Straight-through Gumbel-Softmax over the four modules.

    The forward value is exactly one-hot; gradients flow through the
    relaxed sample ``softmax((log w + g) / temperature)``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        u = (rng or np.random.default_rng()).uniform(size=w.shape)
        u = np.clip(u, 1e-300, 1.0)
        noise = -np.log(-np.log(u) + 1e-300)
    logw = T.log(w, clamp=1e-12)
    soft = T.softmax((logw + noise) * (1.0 / temperature), axis=-1)
    hard = np.zeros(w.shape)
    np.put_along_axis(hard, soft.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return T.straight_through(hard, soft)


def entropy(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, -w * np.log(w), 0.0)
    return terms.sum(axis=-1)


def module_index(name: str) -> int:
    try:
        return MODULES.index(name)
    except ValueError:
        raise ValueError(f"unknown module {name!r}; choose from {MODULES}") from None


LN4 = math.log(4.0)
