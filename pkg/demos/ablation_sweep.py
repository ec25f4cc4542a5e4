"""A miniature ablation: which ingredients earn their keep?

Runs four arms x two seeds on a small task and prints the median final
target accuracy per arm, exactly the way `pmtrans ablate` summarizes a
sweep.
"""

import numpy as np

from pmtrans import cli
from pmtrans import config as C
from pmtrans import data as D

cfg = C.from_text("""
seed = 0
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
n_classes = 3
n_per_domain = 90
epochs = 6
warmup_epochs = 2
shift_gradient = 0.3
shift_noise = 0.08
shift_invert = false
""")

ds_s, ds_t = D.generate_pair(cfg.n_classes, cfg.n_per_domain,
                             C.to_shift_spec(cfg), cfg.seed,
                             image_size=cfg.image_size)

arms = [
    ("full", {}),
    ("label_loss_only", {"use_lf": "false"}),
    ("feature_loss_only", {"use_ll": "false"}),
    ("source_only", {"mix_mode": "none"}),
]
seeds = [0, 1]

print(f"running {len(arms)} arms x {len(seeds)} seeds "
      f"(small task, ~a minute)...\n")
results = cli.run_arms(cfg, arms, seeds, ds_s, ds_t)

print("\nmedian final target accuracy per arm:")
print(cli.summary_csv(arms, results))
