"""Synthetic scene/caption corpus, vocabulary, POS tagging rules and file formats.

The generator stands in for detector features: each object's row of
``R_O`` is its category prototype plus Gaussian noise, each row of ``R_A``
the sum of its attribute prototypes plus noise.  Objects are ordered by
category index and the predicate between two objects is a fixed function
of their categories, so with ``sigma=0`` the caption content is fully
determined by the features.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import MODULES
from .encoders import FeatureSet
from .reason import TripletRecord, write_triplets

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
MAX_WORDS = 16

POS_MODULE = {
    "NN": "object", "NNS": "object", "NNP": "object", "NNPS": "object",
    "ADJ": "attribute", "JJ": "attribute", "JJR": "attribute", "JJS": "attribute",
    "VB": "relation", "VBD": "relation", "VBG": "relation", "VBN": "relation",
    "VBP": "relation", "VBZ": "relation", "PREP": "relation", "IN": "relation",
    "CD": "relation",
    "OTHER": "function", "CC": "function", "DT": "function", "DET": "function",
    "EX": "function", "PRP": "function", "TO": "function", "RB": "function",
}


def pos_to_module(tag: str, strict: bool = False) -> str:
    """Nouns -> object, adjectives -> attribute, verbs/prepositions/quantifiers
    -> relation, everything else -> function."""
    mod = POS_MODULE.get(tag)
    if mod is None:
        if strict:
            raise ValueError(f"unknown POS tag {tag!r}")
        warnings.warn(f"unknown POS tag {tag!r} mapped to function", stacklevel=2)
        return "function"
    return mod


@dataclass
class TaggedCaption:
    tokens: list[str]
    pos: list[str]
    modules: list[str]

    def __post_init__(self):
        if not (len(self.tokens) == len(self.pos) == len(self.modules)):
            raise ValueError("tokens, pos and modules must have equal length")

    @classmethod
    def from_tagged(cls, pairs) -> TaggedCaption:
        toks = [w for w, _ in pairs]
        pos = [p for _, p in pairs]
        return cls(toks, pos, [pos_to_module(p) for p in pos])

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "pos": self.pos, "modules": self.modules}


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate vocabulary entries")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(tokens)}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    unk_id = 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok) -> bool:
        return tok in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def words(self) -> list[str]:
        return self.itos[4:]


def build_vocab(captions, min_count: int = 5) -> Vocabulary:
    """Words seen fewer than ``min_count`` times fall back to <unk>.

    Order: frequency descending, then lexicographic.
    """
    counts = Counter()
    n = 0
    for cap in captions:
        toks = cap.tokens if isinstance(cap, TaggedCaption) else cap
        counts.update(t.lower() for t in toks)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

DEFAULT_CATEGORIES = ("dog", "cat", "man", "woman", "horse", "car",
                      "bus", "table", "tree", "bird", "boat", "kite")
DEFAULT_ATTRIBUTES = ("red", "small", "white", "black", "large", "wooden")
DEFAULT_PREDICATES = (("on", "PREP"), ("near", "PREP"), ("under", "PREP"),
                      ("riding", "VB"), ("holding", "VB"))


@dataclass
class SynthConfig:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    attributes: tuple[str, ...] = DEFAULT_ATTRIBUTES
    predicates: tuple[tuple[str, str], ...] = DEFAULT_PREDICATES
    d_r: int = 64
    sigma: float = 0.1
    min_objects: int = 2
    max_objects: int = 3
    max_attributes: int = 2
    captions_per_scene: int = 5
    world_seed: int = 0
    attribute_rate: float = 0.8    # chance a caption mentions an object's attributes

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.attributes = tuple(self.attributes)
        self.predicates = tuple(tuple(p) for p in self.predicates)
        if not self.categories or not self.attributes or not self.predicates:
            raise ValueError("category, attribute and predicate inventories must be non-empty")
        if not 2 <= self.min_objects <= self.max_objects <= len(self.categories):
            raise ValueError("need 2 <= min_objects <= max_objects <= number of categories")
        if self.max_objects > 3:
            raise ValueError("captions are capped at 16 words, which fits at most 3 objects")
        if not 0.0 <= self.attribute_rate <= 1.0:
            raise ValueError("attribute_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["predicates"] = [list(p) for p in self.predicates]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SceneObject:
    category: int
    attributes: tuple[int, ...]


@dataclass
class SyntheticScene:
    objects: list[SceneObject]
    relations: list[tuple[int, int, int]]   # (subject idx, predicate idx, object idx)
    seed: int


class World:
    """Prototype vectors and the category-pair predicate table shared by all scenes."""

    def __init__(self, cfg: SynthConfig):
        rng = np.random.default_rng([cfg.world_seed, 7919])
        self.cfg = cfg
        self.cat_proto = rng.normal(0.0, 1.0, (len(cfg.categories), cfg.d_r))
        self.attr_proto = rng.normal(0.0, 1.0, (len(cfg.attributes), cfg.d_r))
        nc = len(cfg.categories)
        self.predicate = rng.integers(0, len(cfg.predicates), size=(nc, nc))

    def features(self, scene: SyntheticScene, rng: np.random.Generator) -> FeatureSet:
        cfg = self.cfg
        n = len(scene.objects)
        R_O = np.stack([self.cat_proto[o.category] for o in scene.objects])
        R_A = np.zeros((n, cfg.d_r))
        for i, o in enumerate(scene.objects):
            for a in o.attributes:
                R_A[i] += self.attr_proto[a]
        R_O = R_O + cfg.sigma * rng.normal(size=R_O.shape)
        R_A = R_A + cfg.sigma * rng.normal(size=R_A.shape)
        return FeatureSet(R_O, R_A)


def _noun_phrase(obj: SceneObject, cfg: SynthConfig, det: str, with_attrs: bool):
    out = [(det, "DT")]
    if with_attrs:
        out += [(cfg.attributes[a], "ADJ") for a in obj.attributes]
    out.append((cfg.categories[obj.category], "NN"))
    return out


def realize_caption(scene: SyntheticScene, cfg: SynthConfig, rng: np.random.Generator) -> TaggedCaption:
    """One caption variant: template, determiners and attribute mentions vary."""
    objs = scene.objects
    template = int(rng.integers(0, 3))
    nps = [_noun_phrase(o, cfg, "a" if rng.random() < 0.7 else "the",
                        rng.random() < cfg.attribute_rate)
           for o in objs]
    pairs = []
    if template == 1:
        pairs += [("there", "EX"), ("is", "VB")]
    pairs += nps[0]
    s, p, o = scene.relations[0]
    pairs += [cfg.predicates[p]] + nps[o]
    if len(objs) == 3:
        if template == 2:
            pairs += [("and", "CC")] + nps[2]
        else:
            s2, p2, o2 = scene.relations[1]
            pairs += [cfg.predicates[p2]] + nps[o2]
    return TaggedCaption.from_tagged(pairs[:MAX_WORDS])


def generate_scene(seed: int, cfg: SynthConfig, world: World | None = None):
    """Returns ``(scene, features, captions)``; fully determined by ``seed`` and ``cfg``."""
    world = world or World(cfg)
    rng = np.random.default_rng([cfg.world_seed, seed])
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    cats = sorted(int(c) for c in rng.choice(len(cfg.categories), n, replace=False))
    objects = []
    for c in cats:
        k = int(rng.integers(1, cfg.max_attributes + 1))
        attrs = tuple(sorted(int(a) for a in rng.choice(len(cfg.attributes), k, replace=False)))
        objects.append(SceneObject(c, attrs))
    relations = [(i, int(world.predicate[cats[i], cats[i + 1]]), i + 1) for i in range(n - 1)]
    scene = SyntheticScene(objects, relations, seed)
    feats = world.features(scene, rng)
    caps = [realize_caption(scene, cfg, rng) for _ in range(cfg.captions_per_scene)]
    return scene, feats, caps


def synthetic_triplets(cfg: SynthConfig, world: World | None = None) -> list[TripletRecord]:
    """Commonsense-style triplets ``(category, predicate, category)`` with random importance."""
    world = world or World(cfg)
    rng = np.random.default_rng([cfg.world_seed, 104729])
    out = []
    for a, ca in enumerate(cfg.categories):
        for b, cb in enumerate(cfg.categories):
            if a == b:
                continue
            pred = cfg.predicates[world.predicate[a, b]][0]
            out.append(TripletRecord(ca, pred, cb, round(float(rng.uniform(0.1, 10.0)), 4)))
    return out


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    image_id: str
    features: FeatureSet | None
    captions: list[TaggedCaption]
    objects: list[str] = field(default_factory=list)
    feature_path: str | None = None


@dataclass
class Corpus:
    images: list[ImageRecord]
    triplets: list[TripletRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def captions(self):
        for im in self.images:
            yield from im.captions

    def subset(self, images) -> Corpus:
        return Corpus(list(images), self.triplets, dict(self.meta))

    def module_marginals(self) -> dict[str, float]:
        counts = Counter(m for c in self.captions() for m in c.modules)
        total = sum(counts.values()) or 1
        return {m: counts[m] / total for m in MODULES}

    def lexicon(self) -> dict[str, str]:
        """word -> module by majority over gold tags."""
        votes: dict[str, Counter] = {}
        for c in self.captions():
            for w, m in zip(c.tokens, c.modules):
                votes.setdefault(w, Counter())[m] += 1
        return {w: sorted(v.items(), key=lambda kv: (-kv[1], MODULES.index(kv[0])))[0][0]
                for w, v in votes.items()}

    def object_words(self) -> set[str]:
        return {w for c in self.captions() for w, m in zip(c.tokens, c.modules) if m == "object"}


def generate_corpus(n_scenes: int, seed: int = 0, cfg: SynthConfig | None = None) -> Corpus:
    if n_scenes < 1:
        raise ValueError("empty corpus: n_scenes must be >= 1")
    cfg = cfg or SynthConfig()
    world = World(cfg)
    images = []
    for i in range(n_scenes):
        scene, feats, caps = generate_scene(seed * 1_000_003 + i, cfg, world)
        objs = [cfg.categories[o.category] for o in scene.objects]
        images.append(ImageRecord(f"syn{seed}_{i:06d}", feats, caps, objs))
    meta = {"synth": cfg.to_dict(), "seed": seed, "n_scenes": n_scenes}
    corpus = Corpus(images, synthetic_triplets(cfg, world), meta)
    corpus.meta["module_marginals"] = corpus.module_marginals()
    return corpus


def split_of(image_id: str) -> str:
    """Seed-stable 80/10/10 train/val/test assignment by hash of the id."""
    h = int(hashlib.sha256(image_id.encode()).hexdigest(), 16) % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


def split_corpus(corpus: Corpus) -> dict[str, Corpus]:
    parts = {"train": [], "val": [], "test": []}
    for im in corpus.images:
        parts[split_of(im.image_id)].append(im)
    return {k: corpus.subset(v) for k, v in parts.items()}


def subsample_captions(corpus: Corpus, X: int, seed: int = 0) -> Corpus:
    """Keep ``X`` captions per image, drawn uniformly without replacement."""
    if not 1 <= X <= 5:
        raise ValueError(f"captions per image must be in 1..5, got {X}")
    rng = np.random.default_rng(seed)
    images = []
    for im in corpus.images:
        n = len(im.captions)
        keep = sorted(rng.choice(n, min(X, n), replace=False).tolist())
        images.append(ImageRecord(im.image_id, im.features, [im.captions[i] for i in keep],
                                  im.objects, im.feature_path))
    return corpus.subset(images)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"CVLF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFileError(ValueError):
    pass


def features_to_bytes(fs: FeatureSet) -> bytes:
    N, d_r = fs.R_O.shape
    return (_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, N, d_r)
            + fs.R_O.astype("<f4").tobytes() + fs.R_A.astype("<f4").tobytes())


def features_from_bytes(blob: bytes, source: str = "<bytes>") -> FeatureSet:
    if len(blob) < _HEADER.size:
        raise FeatureFileError(f"{source}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, version, N, d_r = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{source}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{source}: unsupported version {version}, expected {FEATURE_VERSION}")
    expected = _HEADER.size + 2 * N * d_r * 4
    if len(blob) != expected:
        raise FeatureFileError(f"{source}: expected {expected} bytes for N={N}, d_r={d_r}, got {len(blob)}")
    body = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    R_O = body[:N * d_r].reshape(N, d_r)
    R_A = body[N * d_r:].reshape(N, d_r)
    if not (np.all(np.isfinite(R_O)) and np.all(np.isfinite(R_A))):
        raise FeatureFileError(f"{source}: non-finite feature values")
    return FeatureSet(R_O, R_A)


def save_features(path, fs: FeatureSet) -> None:
    Path(path).write_bytes(features_to_bytes(fs))


def load_features(path) -> FeatureSet:
    return features_from_bytes(Path(path).read_bytes(), str(path))


def save_corpus(corpus: Corpus, out_dir, feature_dir: str = "features") -> Path:
    """Write ``corpus.jsonl``, one feature file per image and ``triplets.tsv``."""
    out = Path(out_dir)
    (out / feature_dir).mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for im in corpus.images:
            rel = im.feature_path or f"{feature_dir}/{im.image_id}.cvlf"
            if im.features is not None:
                save_features(out / rel, im.features)
            rec = {"image_id": im.image_id, "feature_path": rel,
                   "captions": [c.to_dict() for c in im.captions], "objects": im.objects}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    write_triplets(out / "triplets.tsv", corpus.triplets)
    return out


def load_corpus(path, load_feats: bool = True) -> Corpus:
    from .reason import parse_triplets

    root = Path(path)
    jsonl = root / "corpus.jsonl" if root.is_dir() else root
    root = jsonl.parent
    images = []
    with open(jsonl, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                caps = [TaggedCaption(c["tokens"], c["pos"], c["modules"]) for c in rec["captions"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{jsonl}:{lineno}: malformed corpus record ({exc})") from None
            feats = load_features(root / rec["feature_path"]) if load_feats else None
            images.append(ImageRecord(rec["image_id"], feats, caps, rec.get("objects", []),
                                      rec["feature_path"]))
    triplets = []
    tsv = root / "triplets.tsv"
    if tsv.exists():
        with open(tsv, encoding="utf-8") as fh:
            triplets = parse_triplets(fh, str(tsv))
    meta = {}
    if (root / "manifest.json").exists():
        meta = json.loads((root / "manifest.json").read_text())
    return Corpus(images, triplets, meta)


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for im in corpus.images:
        h.update(im.image_id.encode())
        for c in im.captions:
            h.update(" ".join(c.tokens).encode())
        if im.features is not None:
            h.update(features_to_bytes(im.features))
    return h.hexdigest()[:16]


@dataclass
class CaptionBatch:
    """Teacher-forcing arrays for a list of captions, padded to the longest.

    ``inputs`` starts with <bos>; ``targets`` ends with <eos>; ``gold`` holds
    module indices of the target words (-1 at <eos> and padding, which the
    syntax loss and layout accuracy skip).
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    gold: np.ndarray

    @property
    def word_mask(self) -> np.ndarray:
        return self.gold >= 0


def make_batch(captions: list[TaggedCaption], vocab: Vocabulary, max_words: int = MAX_WORDS) -> CaptionBatch:
    B = len(captions)
    if B == 0:
        raise ValueError("empty caption batch")
    L = min(max(len(c.tokens) for c in captions), max_words) + 1
    inputs = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    gold = np.full((B, L), -1, dtype=np.int64)
    for b, cap in enumerate(captions):
        ids = vocab.encode(cap.tokens[:max_words])
        n = len(ids)
        targets[b, :n + 1] = ids + [vocab.eos_id]
        inputs[b, :n + 1] = [vocab.bos_id] + ids
        mask[b, :n + 1] = 1.0
        gold[b, :n] = [MODULES.index(m) for m in cap.modules[:max_words]]
    return CaptionBatch(inputs, targets, mask, gold)
