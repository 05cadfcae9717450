"""Caption metrics (CIDEr-D, BLEU, CHAIR) and module-layout diagnostics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import MODULES
from .controller import entropy, module_index

SIGMA = 6.0


def ngrams(tokens, n: int) -> Counter:
    tokens = list(tokens)
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------

class CiderD:
    """CIDEr-D with document frequencies taken from a fixed reference corpus.

    ``references`` is a list (one entry per image) of lists of token lists.
    Vectors use raw n-gram counts times ``log(N) - log(max(1, df))``; the
    per-order similarity clips candidate weights at the reference ones and
    applies a Gaussian length penalty with sigma 6.
    """

    def __init__(self, references, max_n: int = 4, sigma: float = SIGMA):
        self.max_n = max_n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngrams(r, n))
            self.df.update(seen)
        self.log_n = math.log(float(max(len(references), 1)))

    def _vec(self, tokens):
        vec, norm = [], []
        for n in range(1, self.max_n + 1):
            v = {g: c * (self.log_n - math.log(max(1.0, self.df[g]))) for g, c in ngrams(tokens, n).items()}
            vec.append(v)
            norm.append(math.sqrt(sum(x * x for x in v.values())))
        return vec, norm, len(tokens)

    def _sim(self, hyp, ref) -> np.ndarray:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        delta = float(lh - lr)
        out = np.zeros(self.max_n)
        for n in range(self.max_n):
            val = sum(min(w, vr[n][g]) * vr[n][g] for g, w in vh[n].items() if g in vr[n])
            if nh[n] != 0 and nr[n] != 0:
                val /= nh[n] * nr[n]
            out[n] = val * math.exp(-(delta ** 2) / (2 * self.sigma ** 2))
        return out

    def score(self, candidate, refs) -> float:
        if not refs:
            raise ValueError("CIDEr-D needs at least one reference per candidate")
        if len(candidate) == 0:
            return 0.0
        hyp = self._vec(candidate)
        total = np.zeros(self.max_n)
        for r in refs:
            total += self._sim(hyp, self._vec(r))
        return float(total.mean() / len(refs) * 10.0)

    def corpus(self, candidates, references) -> tuple[float, np.ndarray]:
        if len(candidates) != len(references):
            raise ValueError("one reference set per candidate is required")
        scores = np.array([self.score(c, r) for c, r in zip(candidates, references)])
        return (float(scores.mean()) if len(scores) else 0.0), scores


def cider_d(candidates, references) -> float:
    """Corpus CIDEr-D with document frequencies from ``references`` themselves."""
    return CiderD(references).corpus(candidates, references)[0]


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions pooled over the corpus, uniform
    geometric mean, brevity penalty against the closest reference length
    (shorter one on ties).  Any zero precision gives 0 (no smoothing)."""
    if len(candidates) != len(references):
        raise ValueError("one reference set per candidate is required")
    match = np.zeros(max_n)
    total = np.zeros(max_n)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("BLEU needs at least one reference per candidate")
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cg = ngrams(cand, n)
            best = Counter()
            for r in refs:
                best |= ngrams(r, n)
            match[n - 1] += sum(min(c, best[g]) for g, c in cg.items())
            total[n - 1] += sum(cg.values())
    if c_len == 0 or np.any(match == 0):
        return 0.0
    log_p = np.mean(np.log(match / total))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


# ---------------------------------------------------------------------------
# CHAIR
# ---------------------------------------------------------------------------

def chair(candidates, gold_objects, lexicon) -> dict:
    """``lexicon`` maps object words to categories (or is a set of object words)."""
    if not lexicon:
        raise ValueError("CHAIR needs a non-empty object lexicon")
    if not isinstance(lexicon, dict):
        lexicon = {w: w for w in lexicon}
    mentions = halluc = bad_caps = 0
    for cand, gold in zip(candidates, gold_objects):
        gold = set(gold)
        bad = 0
        for w in set(cand):
            if w in lexicon:
                mentions += 1
                if lexicon[w] not in gold:
                    bad += 1
        halluc += bad
        bad_caps += bad > 0
    n = len(candidates)
    return {"chair_s": bad_caps / n if n else 0.0,
            "chair_i": halluc / mentions if mentions else None}


# ---------------------------------------------------------------------------
# layout diagnostics
# ---------------------------------------------------------------------------

def _as_index(m) -> int:
    return module_index(m) if isinstance(m, str) else int(m)


def layout_accuracy(pred_w, gold) -> dict:
    """Per-module and overall accuracy of ``argmax w`` against gold module tags.

    ``pred_w`` is a list of (T_i x 4) weight sequences and ``gold`` the
    matching tag sequences (names or indices).  ``np.argmax`` already breaks
    ties toward the lowest index.
    """
    if len(pred_w) != len(gold):
        raise ValueError(f"{len(pred_w)} predicted sequences vs {len(gold)} gold")
    hits = np.zeros(4)
    seen = np.zeros(4)
    for w, g in zip(pred_w, gold):
        w = np.asarray(w, dtype=np.float64).reshape(-1, 4) if len(w) else np.zeros((0, 4))
        if len(w) != len(g):
            raise ValueError(f"sequence length mismatch: {len(w)} weights vs {len(g)} tags")
        g = np.array([_as_index(x) for x in g], dtype=np.int64)
        pred = w.argmax(axis=1) if len(w) else np.zeros(0, dtype=np.int64)
        np.add.at(seen, g, 1)
        np.add.at(hits, g, pred == g)
    per = {m: (float(hits[i] / seen[i]) if seen[i] else None) for i, m in enumerate(MODULES)}
    per["average"] = float(hits.sum() / seen.sum()) if seen.sum() else None
    return per


def word_recall(predictions, references, cls: str) -> float | None:
    """Fraction of distinct reference words of class ``cls`` that the prediction mentions.

    ``cls`` is a module name (object, attribute, ...) or a POS tag;
    ``references`` holds lists of tagged captions per image.
    """
    use_module = cls in MODULES
    n_pre = n_gt = 0
    for pred, refs in zip(predictions, references):
        gt = {w for cap in refs
              for w, m, p in zip(cap.tokens, cap.modules, cap.pos)
              if (m if use_module else p) == cls}
        n_gt += len(gt)
        n_pre += len(gt & set(pred))
    return n_pre / n_gt if n_gt else None


def token_class_ratios(captions, lexicon: dict, default: str = "function") -> dict:
    """Share of generated tokens falling in each module class."""
    counts = Counter(lexicon.get(w, default) for cap in captions for w in cap)
    total = sum(counts.values())
    out = {m: (counts[m] / total if total else 0.0) for m in MODULES}
    out["n_tokens"] = total
    return out


def removal_ratios(model, feats, vocab, lexicon: dict, cut: str | None, max_len=None) -> dict:
    """Decode with one module's fusion weight zeroed (others renormalised) and
    report the class mix of the generated words."""
    if cut is not None:
        module_index(cut)
    caps = []
    for i in range(0, len(feats), 64):
        for r in model.greedy(feats[i:i + 64], max_len=max_len, cut=cut):
            caps.append(vocab.decode(r["tokens"]))
    out = token_class_ratios(caps, lexicon)
    out["cut"] = cut
    return out


def fusion_entropy(w_seqs, token_seqs=None, bins: int = 10) -> dict:
    """Entropy of the fusion weights per step, overall and per generated word."""
    steps = [np.asarray(w, dtype=np.float64).reshape(-1, 4) for w in w_seqs if len(w)]
    if not steps:
        return {"mean_entropy": None, "mean_max_prob": None, "histogram": [], "per_word": {}}
    W = np.concatenate(steps)
    H = entropy(W)
    hist, edges = np.histogram(H, bins=bins, range=(0.0, math.log(4.0)))
    per_word = {}
    if token_seqs is not None:
        acc: dict[str, list] = {}
        for w, toks in zip(w_seqs, token_seqs):
            for wt, tok in zip(np.asarray(w).reshape(-1, 4), toks):
                acc.setdefault(tok, []).append(float(entropy(wt)))
        per_word = {k: float(np.mean(v)) for k, v in sorted(acc.items())}
    return {"mean_entropy": float(H.mean()), "mean_max_prob": float(W.max(axis=1).mean()),
            "histogram": hist.tolist(), "bin_edges": edges.tolist(), "per_word": per_word}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

METRICS = ("layout_acc", "cider", "bleu", "chair", "recall", "entropy")


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def teacher_forced_layout(model, corpus, vocab, batch_size: int = 64) -> dict:
    """Layout accuracy on gold captions: w at each word step vs the gold tag."""
    from . import tensor as T
    from .data import make_batch

    pairs = [(im.features, cap) for im in corpus.images for cap in im.captions]
    pred, gold = [], []
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            batch = make_batch([c for _, c in chunk], vocab)
            enc = model.encode([f for f, _ in chunk])
            outs = model.teacher_forced(enc, batch.inputs)
            W = np.stack([o.w_soft.data for o in outs], axis=1)     # (B, L, 4)
            for b in range(len(chunk)):
                keep = batch.word_mask[b]
                pred.append(W[b][keep])
                gold.append(batch.gold[b][keep])
    return layout_accuracy(pred, gold)


def evaluate(model, corpus, vocab, metrics=("layout_acc", "cider", "bleu"), beam: int = 1,
             cut: str | None = None, df_corpus=None) -> EvalReport:
    """Decode every image of ``corpus`` and compute the requested metrics."""
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metrics {bad}; valid: {', '.join(METRICS)}")
    report = EvalReport()
    feats = [im.features for im in corpus.images]
    refs = [[c.tokens for c in im.captions] for im in corpus.images]
    need_decode = any(m in metrics for m in ("cider", "bleu", "chair", "recall", "entropy")) or cut
    if need_decode:
        if beam > 1:
            outs = [model.beam_search(f, beam_size=beam, cut=cut) for f in feats]
        else:
            outs = []
            for i in range(0, len(feats), 64):
                outs += model.greedy(feats[i:i + 64], cut=cut)
        caps = [vocab.decode(o["tokens"]) for o in outs]
    for m in metrics:
        if m == "layout_acc":
            la = teacher_forced_layout(model, corpus, vocab)
            report.metrics["layout_acc"] = la["average"]
            report.breakdown["layout_acc"] = la
        elif m == "cider":
            scorer = CiderD(df_corpus if df_corpus is not None else refs)
            report.metrics["cider"] = scorer.corpus(caps, refs)[0]
        elif m == "bleu":
            report.metrics["bleu"] = bleu(caps, refs)
        elif m == "chair":
            lex = {w: w for w in corpus.object_words()}
            report.metrics["chair"] = chair(caps, [im.objects for im in corpus.images], lex)
        elif m == "recall":
            tagged = [im.captions for im in corpus.images]
            report.metrics["recall"] = {c: word_recall(caps, tagged, c) for c in MODULES}
        elif m == "entropy":
            report.metrics["entropy"] = fusion_entropy([o["w_soft"] for o in outs], caps)
    if cut is not None:
        report.breakdown["removal"] = token_class_ratios(caps, corpus.lexicon())
        report.breakdown["removal"]["cut"] = cut
    return report
