"""Pretrain the category classifier and visualize its Grad-CAM attention maps.

The maps are what the spatial-aware attention blocks consume: bright means
"this region drove the predicted category", which on this data is the
garment itself.

Run:  python demos/04_gradcam_maps.py   (a couple of minutes on a laptop)
"""

import os

import numpy as np

from sanl.ops import upsample_array
from sanl.synth import CATEGORY_NAMES, SynthSpec, generate_dataset, write_ppm
from sanl.train import TrainConfig, classifier_accuracy, pretrain_attention_net
from sanl.attention import grad_cam_maps

OUT = "demo_out"
os.makedirs(OUT, exist_ok=True)

spec = SynthSpec(seed=3, count=900, occlusion_prob=0.2, clutter_level=5)
samples = generate_dataset(spec)
train_s, val_s = samples[:750], samples[750:]

cfg = TrainConfig(seed=3, classifier_epochs=6, classifier_lr=0.02, lr_decay_every=3)
print("training the classifier on %d samples..." % len(train_s))
net = pretrain_attention_net(train_s, cfg)
print("held-out accuracy: %.1f%%" % (100 * classifier_accuracy(net, val_s)))

for i in range(4):
    image, ann = val_s[i]
    maps = grad_cam_maps(net, image, strides=(4, 32))
    side = image.shape[1]
    panel = np.zeros((side, side * 3, 3))
    panel[:, :side] = image.data.transpose(1, 2, 0)
    for j, stride in enumerate((4, 32), start=1):
        heat = upsample_array(maps[stride].values, stride)
        panel[:, side * j:side * (j + 1)] = heat[:, :, None] * np.array([1.0, 0.55, 0.1])
    path = os.path.join(OUT, "gradcam_%d_%s.ppm" % (i, CATEGORY_NAMES[ann.category]))
    write_ppm(path, np.clip(np.rint(panel * 255), 0, 255).astype(np.uint8))
    print("wrote %s (image | stride-4 map | stride-32 map)" % path)
