"""Single-file checkpoints.

Layout: magic ``CVLC``, u32 version, u64 header length, UTF-8 JSON header
(sorted keys), then raw little-endian float64 tensors in header order.
The header carries the model hyperparameters, vocabulary, memory triplets,
a tensor directory with byte offsets, optimizer scalars and training state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .data import Vocabulary
from .decoder import CVLNM
from .reason import TripletRecord
from .tensor import AdamState

MAGIC = b"CVLC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: CVLNM
    vocab: Vocabulary
    optimizer: AdamState | None = None
    train_state: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def to_bytes(ck: Checkpoint) -> bytes:
    params = ck.model.named_parameters()
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{n}", p.data) for n, p in params.items()]
    opt = None
    if ck.optimizer is not None:
        o = ck.optimizer
        opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t}
        for n in params:
            if n in o.m:
                arrays.append((f"adam_m/{n}", o.m[n]))
                arrays.append((f"adam_v/{n}", o.v[n]))
    directory, offset = [], 0
    for name, a in arrays:
        nbytes = a.size * 8
        directory.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": VERSION,
        "hyperparameters": ck.model.cfg.to_dict(),
        "vocab": ck.vocab.itos,
        "memory": [[r.subject, r.predicate, r.object, r.weight] for r in ck.model.memory_records],
        "tensors": directory,
        "optimizer": opt,
        "train_state": ck.train_state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + body


def from_bytes(raw: bytes, source: str = "<bytes>", expect: ModelConfig | None = None,
               force: bool = False) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from None
    cfg = ModelConfig.from_dict(header["hyperparameters"])
    if expect is not None and not force:
        a, b = cfg.to_dict(), expect.to_dict()
        diff = sorted(k for k in a if a[k] != b.get(k))
        if diff:
            raise CheckpointError(f"{source}: hyperparameters differ from the requested config: {diff}")
    arrays = {}
    for d in header["tensors"]:
        lo = start + d["offset"]
        hi = lo + d["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{source}: tensor {d['name']} needs bytes {lo}..{hi}, file has {len(raw)}")
        arrays[d["name"]] = np.frombuffer(raw[lo:hi], dtype="<f8").reshape(d["shape"]).astype(np.float64)
    expected_end = start + sum(d["nbytes"] for d in header["tensors"])
    if expected_end != len(raw):
        raise CheckpointError(f"{source}: expected {expected_end} bytes, got {len(raw)}")
    memory = [TripletRecord(s, p, o, float(w)) for s, p, o, w in header["memory"]]
    model = CVLNM(cfg, memory, seed=0)
    model.load_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], t=o["t"])
        for k, v in arrays.items():
            kind, _, name = k.partition("/")
            if kind == "adam_m":
                opt.m[name] = v
            elif kind == "adam_v":
                opt.v[name] = v
    return Checkpoint(model, Vocabulary(header["vocab"]), opt, header.get("train_state") or {})


def save(path, ck: Checkpoint) -> str:
    """Write atomically; returns the sha256 prefix of the file."""
    raw = to_bytes(ck)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(raw)
    tmp.replace(path)
    return hashlib.sha256(raw).hexdigest()[:16]


def load(path, expect: ModelConfig | None = None, force: bool = False) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path), expect, force)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
