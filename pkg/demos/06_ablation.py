"""A miniature ablation: attention variants compared under one schedule.

This is the scaled-down version of the study the acceptance suite runs
(there: 2,000 train / 400 val, 3 seeds; here: a fraction of that so the
demo finishes over coffee). Expect noisier numbers than the full run.

Run:  python demos/06_ablation.py
"""

import os

from sanl.evaluate import AblationSpec, run_ablation
from sanl.train import TrainConfig

OUT = "demo_out"
os.makedirs(OUT, exist_ok=True)

spec = AblationSpec(
    suite="table3",
    seeds=(0,),
    data_seed=7,
    train_count=400,
    val_count=100,
    train_config=TrainConfig(lr=0.004, lr_decay_every=4, epochs_coarse=4,
                             epochs_joint=0, batch_size=4, seed=0, val_limit=50),
)

result = run_ablation(spec, log=print)
path = os.path.join(OUT, "mini_ablation.csv")
result.to_csv(path)

print("\narm        mean NE   params  flops")
for arm in result.arms:
    print("%-9s  %.4f   %.2fx   %.2fx"
          % (arm.name, arm.mean_ne, arm.params_rel, arm.flops_rel))
print("\nfull table written to %s" % path)
