"""Few-shot sweep: train the object-only and syntax-loss configurations with one
or five captions per scene and report the CIDEr-D drop."""

import sys

from cvlnm.data import generate_corpus
from cvlnm.fewshot import PRESETS, run_sweep
from cvlnm.training import TrainConfig

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
corpus = generate_corpus(300, seed=11)
base = dict(lr=2e-3, lr_decay=1.0, epochs_xe=15, epochs_rl=0, batch_size=50,
            min_count=1, eval_cider=False)
configs = {name: TrainConfig(**{**base, **PRESETS[name]}) for name in ("module_o", "mh_att_z_ls")}
res = run_sweep(corpus, configs, xs=[1], seeds=seeds)
for row in res.table():
    print(f"{row['config']:>12s}  X={row['X']}  CIDEr-D {row['cider_mean']:.3f}  "
          f"drop {row['deterioration_mean']:.3f}")
