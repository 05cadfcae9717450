"""Generate a small synthetic corpus, train briefly, and caption a held-out scene.

Run with ``python3 demos/quickstart.py``; takes about a minute on one core.
"""

import numpy as np

from cvlnm.config import MODULES
from cvlnm.data import generate_corpus, split_corpus
from cvlnm.training import TrainConfig, Trainer

corpus = generate_corpus(200, seed=0)
parts = split_corpus(corpus)
print(f"{len(parts['train'])} train / {len(parts['val'])} val / {len(parts['test'])} test scenes")
print("module marginals:", {k: round(v, 3) for k, v in corpus.module_marginals().items()})

cfg = TrainConfig(lam=1.0, lr=2e-3, lr_decay=1.0, epochs_xe=8, epochs_rl=0,
                  batch_size=50, min_count=1, eval_cider=False, seed=0)
trainer = Trainer(parts["train"], cfg, val=parts["val"])
for rec in trainer.run():
    print(f"epoch {rec['epoch']}: loss_l {rec['loss_l']:.3f}  loss_s {rec['loss_s']:.3f}  "
          f"val layout acc {rec['layout_acc']:.3f}")

scene = parts["test"].images[0]
out = trainer.model.beam_search(scene.features, beam_size=3)
words = trainer.vocab.decode(out["tokens"])
print("\nreference:", " ".join(scene.captions[0].tokens))
print("generated:", " ".join(words))
for word, w in zip(words + ["<eos>"], out["w"]):
    print(f"  {word:>10s}  {MODULES[int(np.argmax(w))]:<9s} w={np.round(w, 2)}")
