"""Train a model with the syntax loss, then zero each module's fusion weight in
turn and see how the mix of generated words shifts."""

from cvlnm.config import MODULES
from cvlnm.data import generate_corpus, split_corpus
from cvlnm.evaluation import removal_ratios
from cvlnm.training import TrainConfig, Trainer

corpus = generate_corpus(500, seed=0)
parts = split_corpus(corpus)
cfg = TrainConfig(lam=1.0, lr=2e-3, lr_decay=1.0, epochs_xe=12, epochs_rl=0,
                  batch_size=50, min_count=1, eval_cider=False, seed=0)
trainer = Trainer(parts["train"], cfg, val=parts["val"])
trainer.run()

lex = corpus.lexicon()
feats = [im.features for im in parts["test"].images]
print(f"{'cut':>10s} " + " ".join(f"{m:>10s}" for m in MODULES))
for cut in (None,) + MODULES:
    r = removal_ratios(trainer.model, feats, trainer.vocab, lex, cut)
    print(f"{str(cut):>10s} " + " ".join(f"{r[m]:10.3f}" for m in MODULES))
