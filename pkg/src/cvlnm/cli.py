"""Command line: gen-data, train, caption, eval, sweep.

Exit codes: 0 success, 1 usage or validation error, 2 I/O failure,
3 numerical failure.  Every option can also come from a JSON file given
with ``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import MODULES
from .data import (FeatureFileError, SynthConfig, corpus_digest, generate_corpus, load_corpus,
                   load_features, save_corpus, split_corpus)
from .evaluation import METRICS, evaluate, removal_ratios
from .training import TrainConfig, Trainer, TrainingDiverged

log = logging.getLogger("cvlnm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    if a.scenes < 1:
        raise UsageError("empty corpus: --scenes must be at least 1")
    synth = SynthConfig(sigma=a.sigma, d_r=a.d_r, world_seed=a.world_seed,
                        captions_per_scene=a.captions_per_scene, max_objects=a.max_objects,
                        attribute_rate=a.attribute_rate)
    corpus = generate_corpus(a.scenes, seed=a.seed, cfg=synth)
    out = save_corpus(corpus, a.out)
    manifest = {"synth_config": synth.to_dict(), "config_hash": synth.digest(), "seed": a.seed,
                "n_scenes": a.scenes, "sigma": a.sigma, "corpus_hash": corpus_digest(corpus),
                "module_marginals": corpus.module_marginals()}
    blob = json.dumps(manifest, indent=2, sort_keys=True)
    (out / "manifest.json").write_text(blob + "\n")
    _emit({"out": str(out), "manifest_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
           "corpus_hash": manifest["corpus_hash"]})
    return EXIT_OK


def _train_config(a) -> TrainConfig:
    d = dict(a.train_options or {})
    for flag, key in (("lam", "lam"), ("lam_rl", "lam_rl"), ("fusion", "fusion"), ("lr", "lr"),
                      ("captions_per_image", "captions_per_image"), ("epochs_xe", "epochs_xe"),
                      ("epochs_rl", "epochs_rl"), ("batch_size", "batch_size"), ("seed", "seed"),
                      ("min_count", "min_count"), ("lr_decay", "lr_decay"), ("model", "model")):
        v = getattr(a, flag, None)
        if v is not None:
            d[key] = v
    if a.no_reason:
        d["use_reason"] = False
    if a.cut_module:
        d["modules"] = [m for m in MODULES if m != a.cut_module]
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from None


def cmd_train(a) -> int:
    cfg = _train_config(a)
    corpus = load_corpus(a.corpus)
    parts = split_corpus(corpus)
    if a.resume and not a.force:
        prev = ckpt.load(a.resume).train_state.get("train_config")
        if prev is not None and prev != cfg.to_dict():
            diff = sorted(k for k in prev if prev[k] != cfg.to_dict().get(k))
            raise UsageError(f"--resume checkpoint was trained with different settings {diff}; use --force")
    tr = Trainer(parts["train"], cfg, val=parts["val"], out_dir=a.out, resume=a.resume)
    try:
        tr.run()
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit({"epochs": tr.epoch, "last_checkpoint": tr.last_checkpoint, "final": tr.history[-1] if tr.history else None})
    return EXIT_OK


def caption_record(model, vocab, feats, beam: int, top_k: int = 3) -> dict:
    if feats.d_r != model.cfg.d_r:
        raise UsageError(f"features have d_r={feats.d_r} but the checkpoint expects d_r={model.cfg.d_r}")
    res = model.beam_search(feats, beam_size=beam)
    words = vocab.decode(res["full"])
    steps = []
    for t, word in enumerate(words):
        w = np.asarray(res["w_soft"][t])
        rec = {"word": word, "w": w.tolist(), "module": MODULES[int(np.argmax(w))],
               "region": {k: int(np.argmax(v)) for k, v in res["alphas"][t].items()}}
        beta = res["beta"][t]
        if beta is not None:
            top = np.argsort(-beta, kind="stable")[:top_k]
            rec["memory"] = [{"triplet": [model.memory_records[i].subject, model.memory_records[i].predicate,
                                          model.memory_records[i].object], "beta": float(beta[i])} for i in top]
        steps.append(rec)
    return {"caption": " ".join(vocab.decode(res["tokens"])), "tokens": vocab.decode(res["tokens"]),
            "logp": res["logp"], "ended": res["ended"], "steps": steps}


def cmd_caption(a) -> int:
    ck = ckpt.load(a.ckpt)
    feats = load_features(a.features)
    _emit(caption_record(ck.model, ck.vocab, feats, a.beam, a.top_k))
    return EXIT_OK


def cmd_eval(a) -> int:
    metrics = [m.strip() for m in a.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}; valid names: {', '.join(METRICS)}")
    if a.cut_module and a.cut_module not in MODULES:
        raise UsageError(f"unknown module {a.cut_module!r}; valid: {', '.join(MODULES)}")
    ck = ckpt.load(a.ckpt)
    corpus = load_corpus(a.corpus)
    if a.split != "all":
        corpus = split_corpus(corpus)[a.split]
    report = evaluate(ck.model, corpus, ck.vocab, metrics, beam=a.beam)
    if a.cut_module:
        feats = [im.features for im in corpus.images]
        lex = corpus.lexicon()
        report.breakdown["removal"] = {
            "baseline": removal_ratios(ck.model, feats, ck.vocab, lex, None),
            "cut": removal_ratios(ck.model, feats, ck.vocab, lex, a.cut_module)}
    report.provenance = {"checkpoint": ckpt.file_hash(a.ckpt), "corpus": corpus_digest(corpus),
                         "split": a.split, "seed": a.seed, "beam": a.beam}
    if a.out:
        report.save(a.out)
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_sweep(a) -> int:
    from .fewshot import load_spec, run_sweep

    spec = load_spec(a.spec)
    corpus = load_corpus(a.corpus)
    res = run_sweep(corpus, spec["configs"], spec["X"], spec["seeds"],
                    cache_dir=Path(a.out) / "cache")
    res.save(a.out)
    _emit({"table": res.table()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cvlnm", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--config", help="JSON file with option defaults")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--d-r", dest="d_r", type=int, default=64)
    g.add_argument("--world-seed", type=int, default=0)
    g.add_argument("--captions-per-scene", type=int, default=5)
    g.add_argument("--max-objects", type=int, default=3)
    g.add_argument("--attribute-rate", type=float, default=0.8)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a corpus directory")
    t.add_argument("--config", help="JSON file with training options")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--lambda-rl", dest="lam_rl", type=float)
    t.add_argument("--fusion", choices=["soft", "hard", "ones"])
    t.add_argument("--captions-per-image", type=int)
    t.add_argument("--no-reason", action="store_true")
    t.add_argument("--cut-module", choices=MODULES)
    t.add_argument("--epochs-xe", type=int)
    t.add_argument("--epochs-rl", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--min-count", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train, train_options=None, model=None)

    c = sub.add_parser("caption", help="caption one feature file")
    c.add_argument("--config")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--features", required=True)
    c.add_argument("--beam", type=int, default=5)
    c.add_argument("--top-k", type=int, default=3)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--metrics", default="layout_acc,cider,bleu")
    e.add_argument("--cut-module")
    e.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    e.add_argument("--beam", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="few-shot caption-budget sweep")
    s.add_argument("--config")
    s.add_argument("--spec", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def _apply_config_file(parser, argv):
    """Load ``--config`` as subcommand defaults so that explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    path = pre.parse_known_args(argv)[0].config
    subs = parser._subparsers._group_actions[0].choices
    command = next((x for x in argv if x in subs), None)
    if not path or command is None:
        return
    try:
        opts = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(opts, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    sub = subs[command]
    dests = {a.dest for a in sub._actions}
    if command == "train":
        # keys that are not flags pass through as training options
        sub.set_defaults(**{k: v for k, v in opts.items() if k in dests},
                         train_options={k: v for k, v in opts.items() if k not in dests})
    else:
        unknown = sorted(set(opts) - dests)
        if unknown:
            raise UsageError(f"unknown options in {path}: {unknown}")
        sub.set_defaults(**opts)
    for act in sub._actions:
        if act.dest in opts:
            act.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FeatureFileError, ckpt.CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
