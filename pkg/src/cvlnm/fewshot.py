"""Caption-budget sweep: train each configuration with X captions per image and
report the CIDEr-D drop relative to X=5."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, split_corpus
from .evaluation import CiderD
from .training import TrainConfig, Trainer

log = logging.getLogger(__name__)

# baselines of the robustness table, minus the reason module and RL phase
PRESETS = {
    "module_o": dict(modules=("object",), lam=0.0, use_reason=False),
    "mh_att_z": dict(lam=0.0, use_reason=False),
    "mh_att_z_ls": dict(lam=1.0, use_reason=False),
    "cvlnm": dict(lam=1.0, use_reason=True),
}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CVLNM_THREADS", "1")))
    except ValueError:
        return 1


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SweepResult:
    cells: list[dict] = field(default_factory=list)

    def scores(self, config: str, X: int) -> dict[int, float]:
        return {c["seed"]: c["cider"] for c in self.cells
                if c["config"] == config and c["X"] == X and c.get("cider") is not None}

    def deterioration(self, config: str, X: int) -> dict[int, float]:
        """Per-seed ``score(X=5) - score(X)``; seeds missing either cell are skipped."""
        full, part = self.scores(config, 5), self.scores(config, X)
        return {s: full[s] - part[s] for s in sorted(full) if s in part}

    def table(self) -> list[dict]:
        rows = []
        configs = sorted({c["config"] for c in self.cells})
        xs = sorted({c["X"] for c in self.cells})
        for name in configs:
            for X in xs:
                sc = list(self.scores(name, X).values())
                de = list(self.deterioration(name, X).values())
                rows.append({
                    "config": name, "X": X, "n": len(sc),
                    "cider_mean": float(np.mean(sc)) if sc else None,
                    "cider_std": float(np.std(sc)) if sc else None,
                    "deterioration_mean": float(np.mean(de)) if de else None,
                    "deterioration_std": float(np.std(de)) if de else None,
                })
        return rows

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = self.table()
        (out / "sweep.json").write_text(json.dumps({"cells": self.cells, "table": rows},
                                                   indent=2, sort_keys=True) + "\n")
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["config"])
            w.writeheader()
            w.writerows(rows)


def run_cell(train: Corpus, test: Corpus, cfg: TrainConfig) -> float:
    tr = Trainer(train, cfg)
    tr.run()
    feats = [im.features for im in test.images]
    caps = []
    for i in range(0, len(feats), 64):
        caps += [tr.vocab.decode(r["tokens"]) for r in tr.model.greedy(feats[i:i + 64])]
    refs = [[c.tokens for c in im.captions] for im in test.images]
    return CiderD(refs).corpus(caps, refs)[0]


def run_sweep(corpus: Corpus, configs: dict[str, TrainConfig], xs=(1, 2, 3, 4, 5), seeds=(0,),
              cache_dir=None, threads: int | None = None, test: Corpus | None = None) -> SweepResult:
    """Train and score every (config, X, seed) cell on the held-out split.

    Completed cells are cached under ``cache_dir`` and reused; a failing
    cell is recorded with its error and the sweep continues.
    """
    xs = sorted(set(xs) | {5})
    if test is None:
        parts = split_corpus(corpus)
        train, test = parts["train"], parts["test"]
    else:
        train = corpus
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    jobs = []
    for name, base in configs.items():
        for X in xs:
            for seed in seeds:
                d = base.to_dict()
                d.update(captions_per_image=X, seed=seed)
                jobs.append((name, X, seed, TrainConfig.from_dict(d)))

    def work(job):
        name, X, seed, cfg = job
        key = f"{config_hash(cfg)}_X{X}_s{seed}"
        path = cache / f"{key}.json" if cache is not None else None
        if path is not None and path.exists():
            return json.loads(path.read_text())
        cell = {"config": name, "X": X, "seed": seed, "key": key}
        try:
            cell["cider"] = run_cell(train, test, cfg)
        except Exception as exc:   # one broken cell must not sink the sweep
            log.warning("cell %s failed: %s", key, exc)
            cell["cider"] = None
            cell["error"] = f"{type(exc).__name__}: {exc}"
        if path is not None and "error" not in cell:
            path.write_text(json.dumps(cell, sort_keys=True))
        return cell

    n = threads or worker_count()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            cells = list(pool.map(work, jobs))
    else:
        cells = [work(j) for j in jobs]
    return SweepResult(cells)


def load_spec(path) -> dict:
    """Sweep spec JSON: {"configs": {name: preset name or overrides}, "X": [...],
    "seeds": [...], "base": {shared TrainConfig fields}}."""
    spec = json.loads(Path(path).read_text())
    base = spec.get("base", {})
    configs = {}
    for name, val in spec.get("configs", {}).items():
        over = dict(PRESETS[val]) if isinstance(val, str) else dict(val)
        if isinstance(val, dict) and "preset" in over:
            over = {**PRESETS[over.pop("preset")], **over}
        configs[name] = TrainConfig.from_dict({**base, **over})
    if not configs:
        raise ValueError("sweep spec lists no configs")
    return {"configs": configs, "X": spec.get("X", [1, 2, 3, 4, 5]), "seeds": spec.get("seeds", [0])}
