"""Heatmap targets, the visibility-masked weighted BCE loss, plain SGD, and the
two-phase trainer (coarse pretrain, then joint coarse+fine fine-tuning)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import grad_cam_maps
from .network import STRIDES, HeatmapSet, heatmap_tensor
from .tensor import GradientError, ShapeError, Tensor, backward, make_op, no_grad, sigmoid_array


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries (step, lr, param_name) diagnostics."""

    def __init__(self, step, lr, param_name):
        self.step = step
        self.lr = lr
        self.param_name = param_name
        super().__init__("non-finite loss at step %d (lr=%g, first offending parameter: %s)"
                         % (step, lr, param_name))


@dataclass
class TrainConfig:
    lr: float = 0.001
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    weight_decay: float = 5e-4
    lambda_p: float = 5.0
    sigma_coarse: float = 2.0
    sigma_fine: float = 0.75
    epochs_coarse: int = 20
    epochs_joint: int = 5
    visible_only: bool = True
    seed: int = 0
    batch_size: int = 1
    classifier_epochs: int = 12
    classifier_lr: float = 0.04
    classifier_batch: int = 2
    classifier_decay_every: int = 8
    val_limit: int = 0       # cap on per-epoch validation samples; 0 = all

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning-rate schedule values must be positive")
        if self.lambda_p <= 0:
            raise ValueError("lambda_p must be positive")
        if not self.sigma_fine < self.sigma_coarse:
            raise ValueError("sigma_fine must be smaller than sigma_coarse")
        if min(self.sigma_fine, self.sigma_coarse) <= 0:
            raise ValueError("sigmas must be positive")
        if self.batch_size < 1 or self.epochs_coarse < 0 or self.epochs_joint < 0:
            raise ValueError("invalid schedule lengths")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        """Load from JSON (always) or TOML (when the interpreter ships tomllib)."""
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ImportError:
                raise ValueError("TOML configs need Python >= 3.11; use JSON instead")
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def lr_at(config, epoch):
    """Step schedule; a pure function of the (global) epoch index."""
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def make_target(annotation, sigma, map_size, image_size, kind="coarse"):
    """Per-landmark Gaussian targets on a map grid.

    Landmark pixel coordinates are projected to map coordinates by dividing
    by the stride (image_size / map_size) and the Gaussian is evaluated at
    the continuous position, so a grid-aligned landmark peaks at exactly 1.0.
    Channels for invisible landmarks are generated too; masking is the
    loss's job.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    stride = image_size / map_size
    k = len(annotation.landmarks)
    ys, xs = np.mgrid[0:map_size, 0:map_size].astype(np.float64)
    maps = np.zeros((k, map_size, map_size))
    for c, (px, py) in enumerate(annotation.landmarks):
        mx, my = px / stride, py / stride
        maps[c] = np.exp(-((xs - mx) ** 2 + (ys - my) ** 2) / (2.0 * sigma * sigma))
    return HeatmapSet(Tensor(maps), kind)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def landmark_loss(pred, target, visibility, lambda_p, visible_only=True):
    """Weighted binary cross-entropy over contributing landmark channels.

    With ``visible_only`` the invisible channels contribute exactly zero loss
    and zero gradient; the normalizer is the number of contributing map
    elements. Computed in the numerically stable logit form.
    """
    if lambda_p <= 0:
        raise ValueError("lambda_p must be positive")
    logits = heatmap_tensor(pred)
    tgt = heatmap_tensor(target)
    tgt = tgt.data if isinstance(tgt, Tensor) else np.asarray(tgt, np.float64)
    if logits.shape != tgt.shape:
        raise ShapeError("prediction %s vs target %s" % (logits.shape, tgt.shape))
    k, h, w = logits.shape
    channel_mask = np.asarray(visibility, bool) if visible_only else np.ones(k, bool)
    if channel_mask.shape != (k,):
        raise ShapeError("visibility must have one flag per channel")
    n = int(channel_mask.sum()) * h * w
    if n == 0:
        zero = np.zeros_like(logits.data)
        return make_op(np.float64(0.0), [logits], lambda g: [zero])

    x = logits.data
    loglik = lambda_p * tgt * (-_softplus(-x)) + (1.0 - tgt) * (-_softplus(x))
    value = -loglik[channel_mask].sum() / n

    def back(g):
        s = sigmoid_array(x)
        dx = (lambda_p * tgt * (s - 1.0) + (1.0 - tgt) * s) / n
        dx[~channel_mask] = 0.0
        return [g * dx]

    return make_op(np.float64(value), [logits], back)


def cross_entropy_logits(logits, target_class):
    """Softmax cross-entropy of a (num_classes,) logit tensor, stable form."""
    x = logits.data
    m = x.max()
    lse = m + np.log(np.sum(np.exp(x - m)))
    soft = np.exp(x - lse)

    def back(g):
        dx = soft.copy()
        dx[target_class] -= 1.0
        return [g * dx]

    return make_op(np.float64(lse - x[target_class]), [logits], back)


def sgd_step(params, lr, weight_decay=0.0):
    """Plain SGD: p <- p - lr * (grad + weight_decay * p). No momentum."""
    items = params.items() if hasattr(params, "items") else ((repr(p), p) for p in params)
    for name, p in items:
        if p.grad is None:
            raise GradientError("missing gradient for parameter %s" % name)
        # algebraically p*(1 - lr*wd) - lr*grad, applied without temporaries
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * p.grad


def zero_grads(params):
    for p in params.values():
        p.zero_grad()


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)   # (epoch, phase, loss, val_ne)
    config: TrainConfig = None

    @property
    def final_val_ne(self):
        return self.rows[-1][3] if self.rows else float("nan")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,phase,loss,val_ne\n")
            for epoch, phase, loss, val_ne in self.rows:
                fh.write("%d,%s,%r,%r\n" % (epoch, phase, loss, val_ne))


def _first_nonfinite(params):
    for name, p in sorted(params.items()):
        if not np.all(np.isfinite(p.data)):
            return name
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name + ".grad"
    return "loss"


def compute_attention_maps(net, samples, strides=STRIDES):
    """Grad-CAM maps for every sample, from the frozen classifier."""
    return [grad_cam_maps(net, s.image, strides) for s in samples]


def _epoch_rng(seed, tag, epoch):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, tag, epoch])


def _validate(model, samples, maps, config):
    from .evaluate import decode_heatmaps, normalized_error  # avoid a module cycle

    size = model.config.input_size
    limit = config.val_limit or len(samples)
    total, count = 0.0, 0
    with no_grad():
        for i, sample in enumerate(samples[:limit]):
            sample_maps = maps[i] if maps is not None else None
            coarse, fine = model.forward(sample.image, sample_maps)
            preds = decode_heatmaps(fine if fine is not None else coarse, size)
            nes, _ = normalized_error(preds, sample.annotation, size)
            for ne in nes:
                if ne is not None:
                    total += ne
                    count += 1
    return total / count if count else float("nan")


def train(model, train_samples, val_samples, attention_net, config, map_cache=None):
    """Two-phase landmark training; deterministic under config.seed.

    Phase 1 fits the coarse predictor against wide-Gaussian targets for
    ``epochs_coarse`` epochs; phase 2 (models with a refiner) trains the
    whole network for ``epochs_joint`` more epochs under the sum of coarse
    and fine losses. Attention maps come from the frozen classifier, either
    precomputed via ``map_cache=(train_maps, val_maps)`` or computed here.
    """
    if not train_samples:
        raise ValueError("empty training set")
    strides = model.required_map_strides()
    if strides:
        if attention_net is None:
            raise ValueError("variant %r needs a pretrained attention net"
                             % model.config.attention_variant)
        if map_cache is not None:
            train_maps, val_maps = map_cache
        else:
            train_maps = compute_attention_maps(attention_net, train_samples)
            val_maps = compute_attention_maps(attention_net, val_samples)
    else:
        train_maps = val_maps = None

    size = model.config.input_size
    map_size = size // 4
    coarse_targets = [make_target(s.annotation, config.sigma_coarse, map_size, size, "coarse")
                      for s in train_samples]
    fine_targets = None
    if model.finenet is not None:
        fine_targets = [make_target(s.annotation, config.sigma_fine, map_size, size, "fine")
                        for s in train_samples]

    report = TrainReport(config=config)
    coarse_params = model.coarse_parameters()
    all_params = model.named_parameters()
    step = 0

    def run_epochs(first_epoch, n_epochs, phase):
        nonlocal step
        params = coarse_params if phase == "coarse" else all_params
        for epoch in range(first_epoch, first_epoch + n_epochs):
            lr = lr_at(config, epoch)
            order = _epoch_rng(config.seed, 211, epoch).permutation(len(train_samples))
            loss_sum = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                for i in batch:
                    i = int(i)
                    sample_maps = train_maps[i] if train_maps is not None else None
                    coarse, fine = model.forward(train_samples[i].image, sample_maps,
                                                 run_finenet=(phase == "joint"))
                    vis = train_samples[i].annotation.visibility
                    loss = landmark_loss(coarse, coarse_targets[i], vis,
                                         config.lambda_p, config.visible_only)
                    if phase == "joint":
                        loss = loss + landmark_loss(fine, fine_targets[i], vis,
                                                    config.lambda_p, config.visible_only)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDiverged(step, lr, _first_nonfinite(params))
                    loss_sum += value
                    backward(loss * (1.0 / len(batch)))
                sgd_step(params, lr, config.weight_decay)
                zero_grads(all_params)
                step += 1
            val_ne = _validate(model, val_samples, val_maps, config)
            report.rows.append((epoch, phase, loss_sum / len(order), val_ne))

    run_epochs(0, config.epochs_coarse, "coarse")
    if model.finenet is not None:
        run_epochs(config.epochs_coarse, config.epochs_joint, "joint")
    return report


def pretrain_attention_net(samples, config, model_config=None, net=None):
    """Train the category classifier with softmax cross-entropy, then freeze it."""
    from .network import AttentionNet, ModelConfig  # local to keep import edges one-way

    categories = {s.annotation.category for s in samples}
    if len(categories) < 2:
        raise ValueError("classifier pretraining needs at least two categories")
    if net is None:
        if model_config is None:
            model_config = ModelConfig(input_size=samples[0].image.shape[1],
                                       num_categories=max(categories) + 1)
        net = AttentionNet(model_config, seed=config.seed)
    params = net.named_parameters()
    for epoch in range(config.classifier_epochs):
        # gentler decay than the landmark schedule; plain SGD needs the long tail
        lr = config.classifier_lr * 0.2 ** (epoch // config.classifier_decay_every)
        order = _epoch_rng(config.seed, 307, epoch).permutation(len(samples))
        for start in range(0, len(order), config.classifier_batch):
            batch = order[start:start + config.classifier_batch]
            for i in batch:
                sample = samples[int(i)]
                loss = cross_entropy_logits(net.forward(sample.image),
                                            sample.annotation.category)
                backward(loss * (1.0 / len(batch)))
            sgd_step(params, lr, config.weight_decay)
            zero_grads(params)
    net.trained = True
    return net


def classifier_accuracy(net, samples):
    with no_grad():
        hits = sum(1 for s in samples if net.predict(s.image) == s.annotation.category)
    return hits / len(samples)
