"""Two-layer top-down LSTM decoder with the module controller and memory read.

One decoding step::

    h1 = LSTM1([Embed(s_{t-1}), h2_{t-1}])
    v_O, v_A, v_R = MS-ATT(V_*, h1);  v_F = Function(h2_{t-1})
    x = ReLU(FC([v_O, v_A, v_R, h2_{t-1}]))
    w, v_hat = soft_fuse(MH-ATT(Z), x, ...);  z_t = w E + pos(t)
    v' = memory read with v_hat
    h2 = LSTM2([v_hat, v', h1]);  P(s_t) = softmax(FC(h2))

The function module and the controller query read the previous second-layer
state, because the current one only exists after fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import MODULES, ModelConfig
from .controller import ModuleController, fuse_blocks, hard_select, module_index
from .encoders import Encoder, FeatureSet, FunctionModule, ModuleFeatures, batch_features
from .nn import Embedding, Linear, Module
from .reason import ReasonModule, TripletRecord
from .tensor import Tensor


class LSTMCell(Module):
    """Gate order i, f, o, g over ``[x, h_prev] @ W + b``."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.gates = Linear(d_in + d_h, 4 * d_h, rng)
        self.d_in, self.d_h = d_in, d_h

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_h or c.shape[-1] != self.d_h:
            raise ValueError(f"LSTM shapes: input {x.shape} (want {self.d_in}), "
                             f"h {h.shape}, c {c.shape} (want {self.d_h})")
        z = self.gates(T.concat([x, h], axis=-1))
        H = self.d_h
        i = T.sigmoid(z[..., 0:H])
        f = T.sigmoid(z[..., H:2 * H])
        o = T.sigmoid(z[..., 2 * H:3 * H])
        g = T.tanh(z[..., 3 * H:4 * H])
        c_new = f * c + i * g
        return o * T.tanh(c_new), c_new


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, cell: LSTMCell):
    return cell(x, h_prev, c_prev)


@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    t: int
    last_token: np.ndarray
    Z: list[Tensor] = field(default_factory=list)

    def select(self, rows: np.ndarray) -> DecoderState:
        """Row-gathered copy for beam bookkeeping (inference only)."""
        pick = lambda x: Tensor(x.data[rows])  # noqa: E731
        return DecoderState(pick(self.h1), pick(self.c1), pick(self.h2), pick(self.c2),
                            self.t, self.last_token[rows], [pick(z) for z in self.Z])


@dataclass
class Encoded:
    feats: ModuleFeatures
    proj: dict
    memory: Tensor | None
    batch: int

    def select(self, rows: np.ndarray) -> Encoded:
        pick = lambda x: None if x is None else Tensor(x.data[rows])  # noqa: E731
        f = self.feats
        feats = ModuleFeatures(pick(f.V_O), pick(f.V_A), pick(f.V_R), f.mask[rows])
        proj = {k: pick(v) for k, v in self.proj.items()}
        return Encoded(feats, proj, self.memory, len(rows))


@dataclass
class StepOutput:
    logp: Tensor          # (B, V) log P(s_t)
    state: DecoderState
    w: Tensor             # (B, 4) weights actually used for fusion
    w_soft: Tensor        # (B, 4) controller output before hard selection / cutting
    v_hat: Tensor
    v_prime: Tensor | None
    alphas: dict
    beta: np.ndarray | None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp.data)


class CVLNM(Module):
    def __init__(self, cfg: ModelConfig, memory: list[TripletRecord] | None = None,
                 rng: np.random.Generator | None = None, seed: int = 0):
        if cfg.vocab_size < 2:
            raise ValueError("vocab_size must be set on the model config")
        rng = rng or np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.function = FunctionModule(cfg, rng)
        self.controller = ModuleController(cfg, rng)
        self.word_emb = Embedding(cfg.vocab_size, cfg.d_word, rng)
        self.lstm1 = LSTMCell(cfg.d_word + cfg.d_h, cfg.d_h, rng)
        d_mem = cfg.d_m if cfg.use_reason else 0
        self.lstm2 = LSTMCell(4 * cfg.d_v + d_mem + cfg.d_h, cfg.d_h, rng)
        self.out = Linear(cfg.d_h, cfg.vocab_size, rng)
        self.reason = ReasonModule(cfg, rng) if cfg.use_reason else None
        self.memory_records = list(memory or [])
        if cfg.use_reason:
            if not self.memory_records:
                raise ValueError("the reason module needs at least one triplet")
            self._memory_ids = self.reason.ids(self.memory_records)
        self.active = np.array([m in cfg.modules for m in MODULES])

    # ------------------------------------------------------------------
    def encode(self, feats: list[FeatureSet] | tuple) -> Encoded:
        if isinstance(feats, tuple):
            R_O, R_A, mask = feats
        else:
            R_O, R_A, mask = batch_features(feats)
        if R_O.shape[-1] != self.cfg.d_r:
            raise ValueError(f"feature width {R_O.shape[-1]} does not match model d_r={self.cfg.d_r}")
        enc = self.encoder
        B, N = mask.shape
        zeros = Tensor(np.zeros((B, N, self.cfg.d_v)))
        V_O = enc.obj(R_O) if self.active[0] else zeros
        V_A = enc.attr(R_A) if self.active[1] else zeros
        V_R = enc.rela(R_O, mask) if self.active[2] else zeros
        feats_ = ModuleFeatures(V_O, V_A, V_R, mask)
        c = self.controller
        proj = {}
        for key, V, att, on in (("object", V_O, c.att_obj, self.active[0]),
                                ("attribute", V_A, c.att_attr, self.active[1]),
                                ("relation", V_R, c.att_rela, self.active[2])):
            if on:
                proj[key] = att.project(V)
        memory = self.reason.embed_triplets(self._memory_ids) if self.reason else None
        return Encoded(feats_, proj, memory, B)

    def init_state(self, batch: int) -> DecoderState:
        z = lambda: Tensor(np.zeros((batch, self.cfg.d_h)))  # noqa: E731
        Z = [self.controller.start_layout(batch)] if self.cfg.uses_controller else []
        return DecoderState(z(), z(), z(), z(), 0, np.full(batch, self.cfg.bos_id), Z)

    # ------------------------------------------------------------------
    def step(self, tokens, state: DecoderState, enc: Encoded, *, cut: str | None = None,
             rng: np.random.Generator | None = None, force_w: np.ndarray | None = None) -> StepOutput:
        """One decoding step for a batch of previous tokens."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        B = len(tokens)
        c = self.controller
        x_in = T.concat([self.word_emb(tokens), state.h2], axis=-1)
        h1, c1 = self.lstm1(x_in, state.h1, state.c1)

        zero_v = Tensor(np.zeros((B, cfg.d_v)))
        blocks, alphas = [], {}
        feats = enc.feats
        for b, (key, V, att) in enumerate((("object", feats.V_O, c.att_obj),
                                           ("attribute", feats.V_A, c.att_attr),
                                           ("relation", feats.V_R, c.att_rela))):
            if self.active[b]:
                v, a = att(V, h1, feats.mask, enc.proj.get(key))
                blocks.append(v)
                alphas[key] = a.data
            else:
                blocks.append(zero_v)
        blocks.append(self.function(state.h2) if self.active[3] else zero_v)

        t = state.t + 1
        Z = state.Z
        if cfg.uses_controller:
            query = c.build_query(blocks[0], blocks[1], blocks[2], state.h2)
            Zs = T.stack(Z, axis=1)
            Z_hat, _ = c.layout_self_attention(Zs)
            w_soft, _ = c.fusion_weights(Z_hat, query, self.active)
        elif cfg.fusion == "ones":
            w_soft = Tensor(np.tile(self.active.astype(float), (B, 1)))
        else:
            w_soft = Tensor(np.tile(self.active / self.active.sum(), (B, 1)))

        w = w_soft
        if cut is not None:
            keep = np.ones(4)
            keep[module_index(cut)] = 0.0
            w = w * keep
            if cfg.fusion != "ones":
                w = w / w.sum(axis=-1, keepdims=True)
        if force_w is not None:
            w = Tensor(np.broadcast_to(force_w, (B, 4)))
        elif cfg.fusion == "hard" and cfg.uses_controller:
            # inference picks the argmax; training draws Gumbel noise
            noise = None if T.grad_enabled() else np.zeros(w.shape)
            w = hard_select(w, cfg.gumbel_tau, rng or np.random.default_rng(0), noise)

        v_hat = fuse_blocks(w, blocks)
        if cfg.uses_controller:
            z_t = c.module_embedding(w, position=t)
            if cfg.stop_layout_grad:
                z_t = T.stop_gradient(z_t)
            Z = Z + [z_t]

        v_prime, beta = None, None
        lstm2_in = [v_hat]
        if self.reason is not None:
            v_prime, beta_t = self.reason.attend(v_hat, enc.memory)
            beta = beta_t.data
            lstm2_in.append(v_prime)
        lstm2_in.append(h1)
        h2, c2 = self.lstm2(T.concat(lstm2_in, axis=-1), state.h2, state.c2)
        logp = T.log_softmax(self.out(h2), axis=-1)
        new_state = DecoderState(h1, c1, h2, c2, t, tokens, Z)
        return StepOutput(logp, new_state, w, w_soft, v_hat, v_prime, alphas, beta)

    def decode_step(self, token, state, enc, **kw) -> StepOutput:
        return self.step(token, state, enc, **kw)

    # ------------------------------------------------------------------
    def teacher_forced(self, enc: Encoded, inputs: np.ndarray, **kw) -> list[StepOutput]:
        """Run the decoder over ``inputs`` (B x T previous tokens, starting with <bos>)."""
        state = self.init_state(inputs.shape[0])
        outs = []
        for t in range(inputs.shape[1]):
            o = self.step(inputs[:, t], state, enc, **kw)
            outs.append(o)
            state = o.state
        return outs

    def score(self, feats: FeatureSet, tokens: list[int], **kw) -> float:
        """Teacher-forced log-probability of ``tokens`` (may end with <eos>)."""
        with T.no_grad():
            enc = self.encode([feats])
            inputs = np.array([[self.cfg.bos_id] + list(tokens[:-1])])
            outs = self.teacher_forced(enc, inputs, **kw)
        return float(sum(o.logp.data[0, tok] for o, tok in zip(outs, tokens)))

    def greedy(self, feats: list[FeatureSet], max_len: int | None = None, **kw) -> list[dict]:
        """Batched argmax decoding; each result holds tokens (without <eos>) and per-step traces."""
        max_len = max_len or self.cfg.max_len
        eos = self.cfg.eos_id
        with T.no_grad():
            enc = self.encode(feats)
            B = enc.batch
            state = self.init_state(B)
            tokens = np.full(B, self.cfg.bos_id)
            done = np.zeros(B, dtype=bool)
            results = [dict(tokens=[], logp=0.0, w=[], w_soft=[], alphas=[], beta=[]) for _ in range(B)]
            for _ in range(max_len):
                o = self.step(tokens, state, enc, **kw)
                lp = o.logp.data
                nxt = lp.argmax(axis=-1)
                for b in np.flatnonzero(~done):
                    r = results[b]
                    r["logp"] += float(lp[b, nxt[b]])
                    r["w"].append(o.w.data[b].copy())
                    r["w_soft"].append(o.w_soft.data[b].copy())
                    r["alphas"].append({k: v[b].copy() for k, v in o.alphas.items()})
                    r["beta"].append(None if o.beta is None else o.beta[b].copy())
                    if nxt[b] == eos:
                        done[b] = True
                        r["ended"] = True
                    else:
                        r["tokens"].append(int(nxt[b]))
                if done.all():
                    break
                tokens, state = nxt, o.state
        return results

    def greedy_decode(self, feats: FeatureSet, max_len: int | None = None, **kw) -> dict:
        return self.greedy([feats], max_len, **kw)[0]

    def sample(self, enc: Encoded, rng: np.random.Generator, max_len: int | None = None,
               temperature: float = 1.0, **kw):
        """Multinomial rollout with the graph kept for the chosen tokens' log-probs.

        Returns ``(tokens, mask, seq_logp)``: tokens (B x L) include <eos>
        when emitted, ``mask`` marks valid positions, ``seq_logp`` is a (B,)
        tensor summing log P over valid positions.
        """
        max_len = max_len or self.cfg.max_len
        B = enc.batch
        state = self.init_state(B)
        tokens = np.full(B, self.cfg.bos_id)
        done = np.zeros(B, dtype=bool)
        picked, masks, chosen = [], [], []
        for _ in range(max_len):
            o = self.step(tokens, state, enc, rng=rng, **kw)
            lp = o.logp.data / temperature
            p = np.exp(lp - lp.max(axis=-1, keepdims=True))
            p /= p.sum(axis=-1, keepdims=True)
            u = rng.uniform(size=(B, 1))
            nxt = (p.cumsum(axis=-1) < u).sum(axis=-1)
            nxt = np.minimum(nxt, self.cfg.vocab_size - 1)
            live = ~done
            picked.append(o.logp[np.arange(B), nxt] * live)
            masks.append(live.copy())
            chosen.append(np.where(live, nxt, self.cfg.eos_id))
            done |= nxt == self.cfg.eos_id
            if done.all():
                break
            tokens, state = nxt, o.state
        seq_logp = T.stack(picked, axis=1).sum(axis=1)
        return np.stack(chosen, axis=1), np.stack(masks, axis=1), seq_logp

    # ------------------------------------------------------------------
    def beam_search(self, feats: FeatureSet, beam_size: int = 5, max_len: int | None = None,
                    length_norm: bool = False, **kw) -> dict:
        """Length-synchronous beam search over one image.

        At each step all live hypotheses are expanded and the ``beam_size``
        best continuations kept; those ending in <eos> retire to the
        finished pool (and count against the beam).  The best finished
        hypothesis by cumulative log-probability is returned.
        """
        if beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        max_len = max_len or self.cfg.max_len
        eos = self.cfg.eos_id
        score_of = (lambda h: h["logp"] / max(len(h["seq"]), 1)) if length_norm else (lambda h: h["logp"])
        with T.no_grad():
            enc1 = self.encode([feats])
            state = self.init_state(1)
            live = [dict(seq=[], logp=0.0, trace=[])]
            finished = []
            for step in range(max_len):
                rows = np.zeros(len(live), dtype=np.int64)
                enc = enc1.select(rows) if len(live) > 1 else enc1
                prev = np.array([h["seq"][-1] if h["seq"] else self.cfg.bos_id for h in live])
                o = self.step(prev, state, enc, **kw)
                lp = o.logp.data
                V = lp.shape[1]
                order = np.argsort(-lp, axis=1, kind="stable")
                cand_h = np.repeat(np.arange(len(live)), V)
                cand_tok = order.reshape(-1)
                cum = np.array([h["logp"] for h in live])
                cand_score = cum[cand_h] + lp[cand_h, cand_tok]
                top = np.argsort(-cand_score, kind="stable")[:beam_size]
                new_live, keep_rows = [], []
                last = step == max_len - 1
                for ci in top:
                    hi, tok = cand_h[ci], int(cand_tok[ci])
                    h = live[hi]
                    trace = h["trace"] + [dict(w=o.w.data[hi].copy(), w_soft=o.w_soft.data[hi].copy(),
                                               alphas={k: v[hi].copy() for k, v in o.alphas.items()},
                                               beta=None if o.beta is None else o.beta[hi].copy())]
                    nh = dict(seq=h["seq"] + [tok], logp=float(cand_score[ci]), trace=trace)
                    if tok == eos or last:
                        finished.append(nh)
                    else:
                        new_live.append(nh)
                        keep_rows.append(hi)
                if not new_live:
                    break
                if not length_norm and finished:
                    best_done = max(score_of(h) for h in finished)
                    if best_done >= max(h["logp"] for h in new_live):
                        break
                live = new_live
                state = o.state.select(np.array(keep_rows))
        best = max(finished, key=score_of)  # first maximal one wins ties
        seq = best["seq"]
        ended = bool(seq) and seq[-1] == eos
        return dict(tokens=seq[:-1] if ended else seq, full=seq, logp=best["logp"], ended=ended,
                    w=[s["w"] for s in best["trace"]], w_soft=[s["w_soft"] for s in best["trace"]],
                    alphas=[s["alphas"] for s in best["trace"]], beta=[s["beta"] for s in best["trace"]])
