"""Inference decoding, the normalized-error metric, the ablation runner and
overlay rendering.

Decoding follows the centroid rule: sigmoid the logits, bilinearly upsample
to the input resolution, threshold, label 4-connected components, and take
the activation-weighted centroid of the largest component (ties broken by
summed activation, then by label index). Centroid sums use math.fsum so the
result is independent of pixel visitation order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import synth
from .network import ModelConfig, build_model, count_flops, count_params, heatmap_tensor
from .ops import upsample_array
from .synth import LANDMARK_NAMES, SynthSpec, write_ppm
from .tensor import Tensor, no_grad, sigmoid_array
from .train import (TrainConfig, TrainingDiverged, compute_attention_maps,
                    pretrain_attention_net, train)

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])

# one fixed color per landmark, collar->hem
PALETTE = (
    (230, 30, 30), (30, 90, 230), (30, 180, 60), (240, 170, 20),
    (170, 40, 200), (20, 200, 200), (250, 100, 160), (120, 120, 40),
)


@dataclass
class LandmarkPrediction:
    x: float
    y: float
    confidence: float        # peak sigmoid value inside the chosen component
    component_size: int


def _upsample_offset(factor):
    # map coordinate m represents image pixel m*stride; the align-corners-false
    # upsample places source m at output index m*f + (f-1)/2, so undo that here
    return 0.5 - factor / 2.0


def decode_heatmaps(heatmaps, input_size, threshold=0.5):
    """Landmark predictions from (K, h, w) logits at any stride dividing input_size."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    logits = heatmap_tensor(heatmaps)
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, np.float64)
    k, h, w = logits.shape
    if h != w or input_size % h != 0:
        raise ValueError("map %s does not tile a %d px image" % ((h, w), input_size))
    factor = input_size // h
    activations = sigmoid_array(logits)
    offset = _upsample_offset(factor)

    preds = []
    for c in range(k):
        up = upsample_array(activations[c], factor)
        mask = up > threshold
        if not mask.any():
            flat = int(np.argmax(up))
            uy, ux = divmod(flat, input_size)
            preds.append(LandmarkPrediction(
                x=_clamp(ux + offset, input_size), y=_clamp(uy + offset, input_size),
                confidence=float(up[uy, ux]), component_size=1))
            continue
        labels, n_labels = ndimage.label(mask, structure=_FOUR_CONNECTED)
        best, best_key = None, None
        for lab in range(1, n_labels + 1):
            members = labels == lab
            size = int(members.sum())
            key = (size, float(up[members].sum()), -lab)
            if best_key is None or key > best_key:
                best, best_key = members, key
        ys, xs = np.nonzero(best)
        wts = up[ys, xs]
        total = math.fsum(wts)
        cx = math.fsum(wts * xs) / total
        cy = math.fsum(wts * ys) / total
        preds.append(LandmarkPrediction(
            x=_clamp(cx + offset, input_size), y=_clamp(cy + offset, input_size),
            confidence=float(wts.max()), component_size=len(ys)))
    return preds


def _clamp(v, size):
    return float(min(max(v, 0.0), size - 1.0))


def normalized_error(preds, annotation, image_size):
    """Per-landmark NE (None for invisible landmarks) plus the visible average."""
    nes = []
    for pred, (gx, gy), vis in zip(preds, annotation.landmarks, annotation.visibility):
        if vis:
            nes.append(math.hypot(pred.x - gx, pred.y - gy) / image_size)
        else:
            nes.append(None)
    visible = [ne for ne in nes if ne is not None]
    return nes, (sum(visible) / len(visible) if visible else None)


@dataclass
class EvalReport:
    per_landmark: list       # mean NE per landmark, None where never visible
    average: float           # mean over all visible landmark instances
    visible_counts: list
    sample_count: int
    config: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("landmark,mean_ne,visible_count\n")
            for name, ne, count in zip(LANDMARK_NAMES, self.per_landmark, self.visible_counts):
                fh.write("%s,%s,%d\n" % (name, "" if ne is None else repr(ne), count))
            fh.write("average,%s,%d\n"
                     % ("undefined" if self.average is None else repr(self.average),
                        int(sum(self.visible_counts))))


def evaluate_model(model, samples, attention_maps=None, threshold=0.5, config_echo=None):
    """Decode every sample and aggregate NE over visible landmarks."""
    k = model.config.num_landmarks
    size = model.config.input_size
    sums, counts = [0.0] * k, [0] * k
    with no_grad():
        for i, sample in enumerate(samples):
            maps = attention_maps[i] if attention_maps is not None else None
            coarse, fine = model.forward(sample.image, maps)
            preds = decode_heatmaps(fine if fine is not None else coarse, size, threshold)
            nes, _ = normalized_error(preds, sample.annotation, size)
            for c, ne in enumerate(nes):
                if ne is not None:
                    sums[c] += ne
                    counts[c] += 1
    per = [sums[c] / counts[c] if counts[c] else None for c in range(k)]
    total = sum(sums)
    total_count = sum(counts)
    return EvalReport(per_landmark=per,
                      average=total / total_count if total_count else None,
                      visible_counts=counts, sample_count=len(samples),
                      config=config_echo or {"model": model.config.to_dict(),
                                             "threshold": threshold})


# ---------------------------------------------------------------------------
# ablation runner

_ARM_DEFS = {
    # name: (variant, visible_only, with_finenet)
    "base": ("base", True, False),
    "nl": ("nl", True, False),
    "sanl32": ("sanl32", True, False),
    "sanl_all": ("sanl_all", True, False),
    "novis": ("base", False, False),
    "c2f": ("sanl_all", True, True),
}

SUITES = {
    "table3": ("base", "nl", "sanl32", "sanl_all"),
    "table4": ("novis", "base", "sanl_all", "c2f"),
    "full": ("base", "nl", "sanl32", "sanl_all", "novis", "c2f"),
}


def default_ablation_train_config(seed=0):
    """The schedule every ablation arm shares; sized for a CPU budget."""
    return TrainConfig(lr=0.02, lr_decay_every=5, epochs_coarse=6, epochs_joint=2,
                       batch_size=1, seed=seed, val_limit=100,
                       classifier_epochs=14, classifier_lr=0.04,
                       classifier_batch=2, classifier_decay_every=12)


@dataclass
class AblationSpec:
    suite: str = "table3"
    seeds: tuple = (0, 1, 2)
    data_seed: int = 7
    train_count: int = 2000
    val_count: int = 400
    image_size: int = 64
    occlusion_prob: float = 0.3
    clutter_level: int = 12
    classifier_pool: int = 6000        # the classifier pretrains on its own pool
    classifier_occlusion: float = 0.15  # a lightly occluded pool trains cleaner maps
    classifier_channels: tuple = (24, 48, 96, 192)
    train_config: TrainConfig = None

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ValueError("unknown suite %r (have %s)" % (self.suite, sorted(SUITES)))
        self.seeds = tuple(int(s) for s in self.seeds)
        self.classifier_channels = tuple(self.classifier_channels)
        if self.train_config is None:
            self.train_config = default_ablation_train_config()


@dataclass
class ArmResult:
    name: str
    variant: str
    visible_only: bool
    with_finenet: bool
    per_seed_ne: list
    params_rel: float
    flops_rel: float
    status: str = "ok"

    @property
    def mean_ne(self):
        vals = [v for v in self.per_seed_ne if np.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def std_ne(self):
        vals = [v for v in self.per_seed_ne if np.isfinite(v)]
        return float(np.std(vals)) if vals else float("nan")


@dataclass
class AblationResult:
    spec: AblationSpec
    arms: list

    def arm(self, name):
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("arm,variant,visible_only,with_finenet,seeds,mean_ne,std_ne,"
                     "params_rel,flops_rel,status\n")
            for a in self.arms:
                fh.write("%s,%s,%d,%d,%d,%r,%r,%r,%r,%s\n"
                         % (a.name, a.variant, a.visible_only, a.with_finenet,
                            len(a.per_seed_ne), a.mean_ne, a.std_ne,
                            a.params_rel, a.flops_rel, a.status))


def _model_config(arm_name, image_size):
    variant, _, finenet = _ARM_DEFS[arm_name]
    return ModelConfig(attention_variant=variant, input_size=image_size,
                       with_finenet=finenet)


@dataclass
class AblationContext:
    """Everything the arms share: data, the frozen classifier, its maps."""

    synth_spec: SynthSpec
    train_samples: list
    val_samples: list
    net: object
    train_maps: list
    val_maps: list
    classifier_acc: float


def prepare_ablation(spec, log=None):
    """Generate the datasets, pretrain the classifier, compute the maps."""
    say = log or (lambda msg: None)
    synth_spec = SynthSpec(seed=spec.data_seed, count=spec.train_count + spec.val_count,
                           image_size=spec.image_size, occlusion_prob=spec.occlusion_prob,
                           clutter_level=spec.clutter_level)
    say("generating %d samples" % synth_spec.count)
    samples = synth.generate_dataset(synth_spec)
    train_samples = samples[:spec.train_count]
    val_samples = samples[spec.train_count:]

    # the classifier learns categories from its own pool, disjoint from the
    # landmark data by seed, mirroring pretraining on a separate category
    # dataset; a held-out slice of that pool measures its accuracy
    pool_spec = replace(synth_spec, seed=spec.data_seed + 1000,
                        count=spec.classifier_pool + 400,
                        occlusion_prob=spec.classifier_occlusion)
    say("pretraining the category classifier on %d samples" % spec.classifier_pool)
    pool = synth.generate_dataset(pool_spec)
    clf_model_config = ModelConfig(stage_channels=spec.classifier_channels,
                                   input_size=spec.image_size)
    clf_config = replace(spec.train_config, seed=spec.data_seed)
    net = pretrain_attention_net(pool[:spec.classifier_pool], clf_config,
                                 model_config=clf_model_config)
    from .train import classifier_accuracy
    acc = classifier_accuracy(net, pool[spec.classifier_pool:])
    say("classifier held-out accuracy: %.3f" % acc)

    say("computing attention maps")
    train_maps = compute_attention_maps(net, train_samples)
    val_maps = compute_attention_maps(net, val_samples)
    return AblationContext(synth_spec=synth_spec, train_samples=train_samples,
                           val_samples=val_samples, net=net, train_maps=train_maps,
                           val_maps=val_maps, classifier_acc=acc)


def run_ablation(spec, log=None, context=None):
    """Train every arm of the suite across the seeds and tabulate mean NE.

    The dataset, classifier and attention maps are generated once and shared;
    every arm runs under the same TrainConfig. A diverging arm is marked
    failed and the run continues.
    """
    say = log or (lambda msg: None)
    ctx = context if context is not None else prepare_ablation(spec, log)
    train_samples, val_samples = ctx.train_samples, ctx.val_samples
    net, train_maps, val_maps = ctx.net, ctx.train_maps, ctx.val_maps

    base_cfg = _model_config("base", spec.image_size)
    base_params, base_flops = count_params(base_cfg), count_flops(base_cfg)

    arms = []
    for arm_name in SUITES[spec.suite]:
        variant, visible_only, finenet = _ARM_DEFS[arm_name]
        model_cfg = _model_config(arm_name, spec.image_size)
        per_seed = []
        status = "ok"
        for seed in spec.seeds:
            cfg = replace(spec.train_config, seed=seed, visible_only=visible_only)
            model = build_model(model_cfg, seed=seed)
            cache = (train_maps, val_maps) if model.required_map_strides() else None
            try:
                train(model, train_samples, val_samples, net, cfg, map_cache=cache)
                report = evaluate_model(model, val_samples, attention_maps=val_maps
                                        if model.required_map_strides() else None)
                per_seed.append(report.average if report.average is not None
                                else float("nan"))
                say("arm %-8s seed %d: val NE %.5f" % (arm_name, seed, per_seed[-1]))
            except TrainingDiverged as exc:
                per_seed.append(float("nan"))
                status = "failed: %s" % exc
                say("arm %-8s seed %d: diverged (%s)" % (arm_name, seed, exc))
        arms.append(ArmResult(
            name=arm_name, variant=variant, visible_only=visible_only,
            with_finenet=finenet, per_seed_ne=per_seed,
            params_rel=count_params(model_cfg) / base_params,
            flops_rel=count_flops(model_cfg) / base_flops,
            status=status))
    return AblationResult(spec=spec, arms=arms)


# ---------------------------------------------------------------------------
# overlay rendering

def _to_u8_image(image):
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = arr.transpose(1, 2, 0)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return arr.copy()


def _draw_cross(img, x, y, color, arm=3):
    size = img.shape[0]
    cx, cy = int(round(x)), int(round(y))
    for d in range(-arm, arm + 1):
        if 0 <= cy + d < size and 0 <= cx < size:
            img[cy + d, cx] = color
        if 0 <= cy < size and 0 <= cx + d < size:
            img[cy, cx + d] = color


def _draw_ring(img, x, y, color, radius=3):
    size = img.shape[0]
    cx, cy = int(round(x)), int(round(y))
    for yy in range(cy - radius - 1, cy + radius + 2):
        for xx in range(cx - radius - 1, cx + radius + 2):
            if 0 <= yy < size and 0 <= xx < size:
                if abs(math.hypot(xx - cx, yy - cy) - radius) < 0.6:
                    img[yy, xx] = color


def render_overlay(image, prediction, annotation, out_path):
    """Write a PPM with crosses at predictions and rings at visible ground truth.

    An empty/absent prediction list yields an unmodified copy of the image.
    """
    img = _to_u8_image(image)
    if annotation is not None:
        for c, ((gx, gy), vis) in enumerate(zip(annotation.landmarks,
                                                annotation.visibility)):
            if vis:
                _draw_ring(img, gx, gy, PALETTE[c % len(PALETTE)])
    if prediction:
        for c, pred in enumerate(prediction):
            _draw_cross(img, pred.x, pred.y, PALETTE[c % len(PALETTE)])
    out_dir = os.path.dirname(os.path.abspath(out_path))
    if not os.path.isdir(out_dir):
        raise FileNotFoundError("output directory %s does not exist" % out_dir)
    write_ppm(out_path, img)
    return out_path
