"""Objectives and the two-phase training loop (cross-entropy, then self-critical RL)."""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import ModelConfig
from .data import Corpus, Vocabulary, build_vocab, make_batch, subsample_captions
from .decoder import CVLNM
from .evaluation import CiderD, teacher_forced_layout
from .reason import memory_vocabulary, select_triplets
from .tensor import Adam, AdamState, Tensor, lr_at_epoch

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def syntax_loss(w: Tensor, gold: np.ndarray) -> Tensor:
    """``-sum_m w*_m log w_m`` averaged over the supervised steps of each
    sequence, then over the batch.

    ``w`` is (B, L, 4); ``gold`` holds module indices with -1 for steps that
    carry no tag (<eos>, padding).  Sequences without any tagged step are
    left out of the batch mean.
    """
    gold = np.asarray(gold)
    if w.shape[:-1] != gold.shape:
        raise ValueError(f"fusion weights {w.shape} do not align with tags {gold.shape}")
    onehot = np.zeros(w.shape)
    valid = gold >= 0
    onehot[valid, gold[valid]] = 1.0
    counts = valid.sum(axis=-1).astype(np.float64)
    has = counts > 0
    if not has.any():
        return Tensor(np.zeros(()))
    scale = np.where(has, 1.0 / np.maximum(counts, 1.0), 0.0) / has.sum()
    nll = -(T.log(w, clamp=LOG_CLAMP) * onehot).sum(axis=-1)     # (B, L)
    return (nll * scale[:, None]).sum()


def xe_loss(logp: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """``-sum_t log P(s*_t)`` per sequence, mean over the batch.  ``logp`` is (B, L, V)."""
    targets = np.asarray(targets, dtype=np.int64)
    B, L, V = logp.shape
    if targets.shape != (B, L):
        raise ValueError(f"targets {targets.shape} do not match log-probs {logp.shape[:2]}")
    if targets.min() < 0 or targets.max() >= V:
        raise IndexError(f"gold token out of range [0, {V})")
    mask = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    picked = logp[np.arange(B)[:, None], np.arange(L)[None, :], targets]
    return -(picked * mask).sum() * (1.0 / B)


def total_loss(L_l, L_s, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return L_l + L_s * lam if lam else L_l


def self_critical_loss(seq_logp: Tensor, r_sample, r_greedy) -> tuple[Tensor, np.ndarray]:
    """REINFORCE with the greedy reward as baseline: ``-mean_b (r_s - r_g) log P(s_s)``."""
    adv = np.asarray(r_sample, dtype=np.float64) - np.asarray(r_greedy, dtype=np.float64)
    return -(seq_logp * adv).sum() * (1.0 / len(adv)), adv


def scst_loss(model: CVLNM, feats, references, reward_fn, rng: np.random.Generator,
              enc=None, temperature: float = 1.0):
    """Self-critical loss for a batch of images.

    ``references[b]`` are token-id lists; ``reward_fn(candidate_ids, refs)``
    scores one caption (an empty sample scores 0).  Returns the loss tensor
    and a diagnostics dict.
    """
    enc = enc or model.encode(feats)
    toks, mask, seq_logp = model.sample(enc, rng, temperature=temperature)
    eos = model.cfg.eos_id
    samples = [[int(t) for t, m in zip(row, mrow) if m and t != eos] for row, mrow in zip(toks, mask)]
    greedy = [r["tokens"] for r in model.greedy(feats)]
    r_s = np.array([reward_fn(s, refs) if s else 0.0 for s, refs in zip(samples, references)])
    r_g = np.array([reward_fn(g, refs) if g else 0.0 for g, refs in zip(greedy, references)])
    loss, adv = self_critical_loss(seq_logp, r_s, r_g)
    return loss, {"reward_sample": float(r_s.mean()), "reward_greedy": float(r_g.mean()),
                  "advantage": adv, "samples": samples, "greedy": greedy}


def stacked_logp(outs) -> Tensor:
    return T.stack([o.logp for o in outs], axis=1)


def stacked_w(outs) -> Tensor:
    return T.stack([o.w_soft for o in outs], axis=1)


def layout_hits(outs, gold: np.ndarray) -> tuple[int, int]:
    W = np.stack([o.w_soft.data for o in outs], axis=1)
    valid = gold >= 0
    return int((W.argmax(axis=-1)[valid] == gold[valid]).sum()), int(valid.sum())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lam: float = 1.0          # syntax-loss weight in the XE phase
    lam_rl: float = 0.5       # ... and in the RL phase
    lr: float = 5e-4
    lr_decay: float = 0.8
    decay_every: int = 5
    epochs_xe: int = 35
    epochs_rl: int = 65
    batch_size: int = 100
    seed: int = 0
    fusion: str = "soft"
    use_reason: bool = True
    modules: tuple[str, ...] = ("object", "attribute", "relation", "function")
    captions_per_image: int = 5
    min_count: int = 5
    top_k_triplets: int = 10000
    grad_clip: float | None = None
    rl_temperature: float = 1.0
    eval_cider: bool = True
    model: dict = field(default_factory=dict)   # extra ModelConfig overrides (dims)

    def __post_init__(self):
        self.modules = tuple(self.modules)
        if self.lam < 0 or self.lam_rl < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs_xe < 0 or self.epochs_rl < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modules"] = list(self.modules)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown training options {unknown}")
        return cls(**d)

    def model_config(self, vocab: Vocabulary, memory, d_r: int | None = None) -> ModelConfig:
        dims = dict(self.model)
        if d_r is not None:
            dims.setdefault("d_r", d_r)
        return ModelConfig(vocab_size=len(vocab), fusion=self.fusion, use_reason=self.use_reason,
                           modules=self.modules, memory_vocab=memory_vocabulary(memory),
                           bos_id=vocab.bos_id, eos_id=vocab.eos_id, **dims)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_checkpoint: str | None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, train: Corpus, cfg: TrainConfig, val: Corpus | None = None,
                 out_dir=None, resume=None):
        if len(train) == 0:
            raise ValueError("empty training corpus")
        self.cfg = cfg
        if cfg.captions_per_image < 5:
            train = subsample_captions(train, cfg.captions_per_image, seed=cfg.seed)
        self.train = train
        self.val = val
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.history: list[dict] = []
        self.last_checkpoint: str | None = None
        self.epoch = 0
        if resume is not None:
            ck = ckpt.load(resume)
            self.model, self.vocab = ck.model, ck.vocab
            self.opt = Adam(self.model.named_parameters(), state=ck.optimizer or AdamState(lr=cfg.lr))
            self.epoch = int(ck.train_state.get("epoch", 0))
            self.history = list(ck.train_state.get("history", []))
            self.last_checkpoint = str(resume)
        else:
            self.vocab = build_vocab(list(train.captions()), cfg.min_count)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                memory = select_triplets(train.triplets, cfg.top_k_triplets, set(self.vocab.words()))
            first = train.images[0].features
            mcfg = cfg.model_config(self.vocab, memory, first.R_O.shape[1] if first is not None else None)
            if mcfg.use_reason and not memory:
                raise ValueError("no triplets match the vocabulary; disable the reason module")
            self.model = CVLNM(mcfg, memory, seed=cfg.seed)
            self.opt = Adam(self.model.named_parameters(), lr=cfg.lr)
        self.params = self.model.named_parameters()
        self._refs_ids = [[self.vocab.encode(c.tokens) for c in im.captions] for im in train.images]
        self._cider = None

    # -- helpers -------------------------------------------------------
    @property
    def total_epochs(self) -> int:
        return self.cfg.epochs_xe + self.cfg.epochs_rl

    def phase_of(self, epoch: int) -> str:
        return "xe" if epoch < self.cfg.epochs_xe else "rl"

    def _snapshot(self):
        return {n: p.data.copy() for n, p in self.params.items()}, copy.deepcopy(self.opt.state)

    def _restore(self, snap) -> None:
        params, state = snap
        for n, p in self.params.items():
            p.data = params[n]
        self.opt.state = state

    def _apply(self, loss: Tensor) -> None:
        val = float(loss.data)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val}")
        grads = T.backward(loss, list(self.params.values()))
        if self.cfg.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.cfg.grad_clip:
                grads = {p: g * (self.cfg.grad_clip / norm) for p, g in grads.items()}
        self.opt.step(grads)

    def cider_scorer(self) -> CiderD:
        if self._cider is None:
            self._cider = CiderD(self._refs_ids)
        return self._cider

    # -- epochs --------------------------------------------------------
    def xe_epoch(self, rng: np.random.Generator, lam: float) -> dict:
        pairs = [(i, j) for i, im in enumerate(self.train.images) for j in range(len(im.captions))]
        order = rng.permutation(len(pairs))
        ims = self.train.images
        tot_l = tot_s = 0.0
        hits = seen = n_batches = 0
        for s in range(0, len(order), self.cfg.batch_size):
            chunk = [pairs[k] for k in order[s:s + self.cfg.batch_size]]
            batch = make_batch([ims[i].captions[j] for i, j in chunk], self.vocab)
            enc = self.model.encode([ims[i].features for i, _ in chunk])
            outs = self.model.teacher_forced(enc, batch.inputs, rng=rng)
            L_l = xe_loss(stacked_logp(outs), batch.targets, batch.mask)
            L_s = syntax_loss(stacked_w(outs), batch.gold)
            self._apply(total_loss(L_l, L_s, lam))
            h, n = layout_hits(outs, batch.gold)
            hits, seen = hits + h, seen + n
            tot_l += float(L_l.data)
            tot_s += float(L_s.data)
            n_batches += 1
        return {"loss_l": tot_l / n_batches, "loss_s": tot_s / n_batches,
                "train_layout_acc": hits / seen if seen else None}

    def rl_epoch(self, rng: np.random.Generator, lam: float) -> dict:
        ims = self.train.images
        order = rng.permutation(len(ims))
        scorer = self.cider_scorer()
        tot_l = tot_s = reward = 0.0
        n_batches = 0
        for s in range(0, len(order), self.cfg.batch_size):
            idx = order[s:s + self.cfg.batch_size]
            feats = [ims[i].features for i in idx]
            enc = self.model.encode(feats)
            L_rl, diag = scst_loss(self.model, feats, [self._refs_ids[i] for i in idx], scorer.score,
                                   rng, enc=enc, temperature=self.cfg.rl_temperature)
            loss = L_rl
            L_s = Tensor(np.zeros(()))
            if lam:
                # syntax supervision comes from a teacher-forced pass over gold captions
                caps = [ims[i].captions[int(rng.integers(len(ims[i].captions)))] for i in idx]
                batch = make_batch(caps, self.vocab)
                outs = self.model.teacher_forced(enc, batch.inputs, rng=rng)
                L_s = syntax_loss(stacked_w(outs), batch.gold)
                loss = total_loss(L_rl, L_s, lam)
            self._apply(loss)
            tot_l += float(L_rl.data)
            tot_s += float(L_s.data)
            reward += diag["reward_sample"]
            n_batches += 1
        return {"loss_l": tot_l / n_batches, "loss_s": tot_s / n_batches,
                "reward": reward / n_batches}

    def validate(self) -> dict:
        if self.val is None or len(self.val) == 0:
            return {"layout_acc": None, "cider": None}
        layout = teacher_forced_layout(self.model, self.val, self.vocab)["average"]
        cider = None
        if self.cfg.eval_cider:
            feats = [im.features for im in self.val.images]
            caps = []
            for i in range(0, len(feats), 64):
                caps += [self.vocab.decode(r["tokens"]) for r in self.model.greedy(feats[i:i + 64])]
            refs = [[c.tokens for c in im.captions] for im in self.val.images]
            cider = CiderD(refs).corpus(caps, refs)[0]
        return {"layout_acc": layout, "cider": cider}

    def checkpoint(self) -> ckpt.Checkpoint:
        state = {"epoch": self.epoch, "history": self.history, "train_config": self.cfg.to_dict(),
                 "rng": {"scheme": "default_rng([seed, epoch])", "seed": self.cfg.seed}}
        return ckpt.Checkpoint(self.model, self.vocab, self.opt.state, state)

    def _write_checkpoint(self) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / f"epoch_{self.epoch:03d}.cvlc"
        ckpt.save(path, self.checkpoint())
        ckpt.save(self.out_dir / "last.cvlc", self.checkpoint())
        self.last_checkpoint = str(path)

    def _log(self, rec: dict) -> None:
        self.history.append(rec)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def run(self, epochs: int | None = None) -> list[dict]:
        """Train up to ``epochs`` more epochs (default: to the end of the schedule)."""
        stop = self.total_epochs if epochs is None else min(self.total_epochs, self.epoch + epochs)
        while self.epoch < stop:
            e = self.epoch
            phase = self.phase_of(e)
            # one generator per epoch keeps resumed runs on the same random stream
            rng = np.random.default_rng([self.cfg.seed, e])
            lr = lr_at_epoch(e, self.cfg.lr, self.cfg.lr_decay, self.cfg.decay_every)
            self.opt.state.lr = lr
            snap = self._snapshot()
            try:
                if phase == "xe":
                    stats = self.xe_epoch(rng, self.cfg.lam)
                else:
                    stats = self.rl_epoch(rng, self.cfg.lam_rl)
            except FloatingPointError as exc:
                self._restore(snap)
                raise TrainingDiverged(f"epoch {e}: {exc}", self.last_checkpoint) from exc
            self.epoch = e + 1
            rec = {"epoch": e, "phase": phase, "lr": lr, **stats, **self.validate()}
            self._log(rec)
            log.info("epoch %d %s loss_l=%.4f loss_s=%.4f", e, phase, rec["loss_l"], rec["loss_s"])
            self._write_checkpoint()
        return self.history


def train(corpus: Corpus, cfg: TrainConfig, val: Corpus | None = None, out_dir=None,
          resume=None) -> Trainer:
    tr = Trainer(corpus, cfg, val, out_dir, resume)
    tr.run()
    return tr
