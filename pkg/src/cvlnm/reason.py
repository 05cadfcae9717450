"""Commonsense memory: weighted triplets embedded and read by dot-product attention."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Embedding, Linear, Module, uniform_init
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 10000


@dataclass(frozen=True)
class TripletRecord:
    subject: str
    predicate: str
    object: str
    weight: float

    def sort_key(self):
        return (-self.weight, self.subject, self.predicate, self.object)


class TripletFormatError(ValueError):
    pass


def parse_triplets(lines, source: str = "<triplets>") -> list[TripletRecord]:
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4 or not all(p.strip() for p in parts[:3]):
            raise TripletFormatError(f"{source}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            weight = float(parts[3])
        except ValueError:
            raise TripletFormatError(f"{source}:{lineno}: weight {parts[3]!r} is not a number") from None
        if not np.isfinite(weight):
            raise TripletFormatError(f"{source}:{lineno}: weight must be finite")
        records.append(TripletRecord(parts[0].strip(), parts[1].strip(), parts[2].strip(), weight))
    return records


def select_triplets(records: list[TripletRecord], K: int = DEFAULT_TOP_K,
                    vocabulary=None) -> list[TripletRecord]:
    """Keep triplets keyed by vocabulary words, sort by weight (ties lexicographic), cut at K."""
    if vocabulary is not None:
        records = [r for r in records if r.subject in vocabulary and r.object in vocabulary]
    records = sorted(records, key=TripletRecord.sort_key)
    if K > len(records):
        warnings.warn(f"requested {K} triplets but only {len(records)} available; keeping all",
                      stacklevel=2)
    return records[:K]


def load_triplets(path, K: int = DEFAULT_TOP_K, vocabulary=None) -> list[TripletRecord]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        records = parse_triplets(fh, str(path))
    return select_triplets(records, K, vocabulary)


def write_triplets(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# subject\tpredicate\tobject\tweight\n")
        for r in records:
            fh.write(f"{r.subject}\t{r.predicate}\t{r.object}\t{r.weight!r}\n")


def memory_vocabulary(records) -> tuple[str, ...]:
    return tuple(sorted({tok for r in records for tok in (r.subject, r.predicate, r.object)}))


class ReasonModule(Module):
    """``m = ReLU(FC([e_s, e_p, e_o]))``; read with ``beta = softmax(M^T W v)``.

    The token table is separate from the caption word embeddings.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.vocab = {tok: i for i, tok in enumerate(cfg.memory_vocab)}
        self.emb = Embedding(max(len(self.vocab), 1), cfg.d_e, rng)
        self.fc = Linear(3 * cfg.d_e, cfg.d_m, rng)
        self.W_q = uniform_init(rng, 4 * cfg.d_v, (4 * cfg.d_v, cfg.d_m))

    def ids(self, records) -> np.ndarray:
        out = np.empty((len(records), 3), dtype=np.int64)
        for k, r in enumerate(records):
            for j, tok in enumerate((r.subject, r.predicate, r.object)):
                if tok not in self.vocab:
                    raise KeyError(f"triplet token {tok!r} is not in the memory vocabulary")
                out[k, j] = self.vocab[tok]
        return out

    def embed_triplets(self, ids: np.ndarray) -> Tensor:
        """Memory matrix with one row per triplet, shape (K, d_m)."""
        e = self.emb(ids)                                    # (K, 3, d_e)
        e = e.reshape(ids.shape[0], 3 * e.shape[-1])
        return T.relu(self.fc(e))

    def embed_triplet(self, record: TripletRecord) -> Tensor:
        return self.embed_triplets(self.ids([record]))[0]

    def attend(self, v_hat: Tensor, M: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(v_prime, beta)`` for query ``v_hat`` of shape (..., 4 d_v)."""
        if M.shape[0] == 0:
            raise ValueError("memory bank is empty")
        logits = T.matmul(T.matmul(v_hat, self.W_q), M.T)    # (..., K)
        beta = T.softmax(logits, axis=-1)
        return T.matmul(beta, M), beta
