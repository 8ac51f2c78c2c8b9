"""Train a small landmark model end to end and inspect its predictions.

Uses a reduced dataset and schedule so it finishes in a few minutes;
the ablation demo and the acceptance suite run the full recipe.

Run:  python demos/05_train_and_eval.py
"""

import os

from sanl.evaluate import decode_heatmaps, evaluate_model, render_overlay
from sanl.network import ModelConfig, build_model
from sanl.synth import LANDMARK_NAMES, SynthSpec, generate_dataset
from sanl.tensor import no_grad
from sanl.train import TrainConfig, train

OUT = "demo_out"
os.makedirs(OUT, exist_ok=True)

spec = SynthSpec(seed=11, count=700, occlusion_prob=0.3, clutter_level=10)
samples = generate_dataset(spec)
train_s, val_s = samples[:600], samples[600:]

model = build_model(ModelConfig(attention_variant="base"), seed=0)
cfg = TrainConfig(lr=0.004, lr_decay_every=5, epochs_coarse=6, epochs_joint=0,
                  batch_size=4, seed=0, val_limit=60)
print("training %d samples for %d epochs..." % (len(train_s), cfg.epochs_coarse))
report = train(model, train_s, val_s, None, cfg)
for epoch, phase, loss, val_ne in report.rows:
    print("  epoch %d [%s] loss %.4f  val NE %.4f" % (epoch, phase, loss, val_ne))

full = evaluate_model(model, val_s)
print("\nper-landmark NE on the held-out split:")
for name, ne, count in zip(LANDMARK_NAMES, full.per_landmark, full.visible_counts):
    print("  %-9s %-8s (%d visible)" % (name, "-" if ne is None else "%.4f" % ne, count))
print("average NE: %.4f" % full.average)

for i in range(3):
    image, ann = val_s[i]
    with no_grad():
        coarse, fine = model.forward(image)
    preds = decode_heatmaps(fine if fine is not None else coarse, spec.image_size)
    path = os.path.join(OUT, "prediction_%d.ppm" % i)
    render_overlay(image, preds, ann, path)
    print("wrote %s (crosses = predicted, rings = ground truth)" % path)
