"""Model assembly: pyramid backbone with attention insertion points, top-down
feature pyramid, dilated-branch heatmap head, residual refiner, and the
category classifier that supplies Grad-CAM attention maps.

The backbone is deliberately small (two 3x3 convs per stage), but the
attention blocks sit exactly where the ablations need them: after the last
convolution of each stride-4/8/16/32 stage.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attention import NonLocalParams, non_local_forward, sanl_forward
from .layers import Conv2dLayer, LinearLayer
from .tensor import Tensor, concat, relu, reshape

VARIANTS = ("base", "nl", "sanl32", "sanl_all")
STRIDES = (4, 8, 16, 32)

# inputs in [0,1] are centered before the first convolution
INPUT_OFFSET = 0.5

FINENET_WIDTH = 16


@dataclass
class ModelConfig:
    attention_variant: str = "base"
    stage_channels: tuple = (16, 32, 64, 128)
    fpn_channels: int = 32
    num_landmarks: int = 8
    num_categories: int = 4
    input_size: int = 64
    with_finenet: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.attention_variant not in VARIANTS:
            raise ValueError("unknown attention variant %r" % (self.attention_variant,))
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be 4 positive ints")
        if self.input_size % 32 != 0:
            raise ValueError("input_size must be divisible by 32, got %d" % self.input_size)
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be >= 1")
        if self.num_categories < 2:
            raise ValueError("num_categories must be >= 2")

    @property
    def branch_channels(self):
        return max(self.fpn_channels // 2, 1)

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class HeatmapSet:
    """Per-landmark activation maps; "coarse" and "fine" both live at stride 4,
    they differ in the sharpness of the targets that supervise them."""

    maps: Tensor
    resolution: str = "coarse"


def heatmap_tensor(h):
    return h.maps if isinstance(h, HeatmapSet) else h


class Backbone:
    """Four stages of 3x3 convs reaching strides 4/8/16/32, with an optional
    attention block appended after each stage's last convolution."""

    def __init__(self, config, seed=0):
        self.config = config
        self.variant = config.attention_variant
        ch = config.stage_channels
        self.stages = []
        prev = 3
        for i, c in enumerate(ch, start=1):
            reduce = Conv2dLayer("backbone.stage%d.conv1" % i, prev, c, 3,
                                 stride=2, padding=1, seed=seed)
            refine = Conv2dLayer("backbone.stage%d.conv2" % i, c, c, 3,
                                 stride=1, padding=1, seed=seed)
            self.stages.append((reduce, refine))
            prev = c
        self.attention = {}
        if self.variant != "base":
            for stride, c in zip(STRIDES, ch):
                self.attention[stride] = NonLocalParams.create(
                    c, seed=seed, name="attn.s%d" % stride)

    def _block_map(self, stride, size, attention_maps):
        if self.variant == "sanl32":
            source = attention_maps.get(32)
            if source is None:
                raise ValueError("sanl32 variant requires the stride-32 attention map")
            vals = source.values
            if vals.shape != (size, size):
                vals = ops.upsample_array(vals, size // vals.shape[0])
            return vals
        source = attention_maps.get(stride)
        if source is None:
            raise ValueError("sanl_all variant requires an attention map at stride %d" % stride)
        return source.values

    def forward(self, x, attention_maps=None):
        """Returns the stage outputs keyed by stride."""
        if self.variant in ("sanl32", "sanl_all") and not attention_maps:
            raise ValueError("variant %r requires attention maps" % self.variant)
        h = ops.pool2d(x, "avg", 2, 2)  # entry downsample to stride 2
        feats = {}
        for (reduce, refine), stride in zip(self.stages, STRIDES):
            h = relu(reduce(h))
            h = relu(refine(h))
            if self.variant == "nl":
                h = non_local_forward(h, self.attention[stride])
            elif self.variant in ("sanl32", "sanl_all"):
                vals = self._block_map(stride, h.shape[1], attention_maps)
                h = sanl_forward(h, vals, self.attention[stride])
            feats[stride] = h
        return feats

    def named_parameters(self):
        out = {}
        for reduce, refine in self.stages:
            out.update(reduce.named_parameters())
            out.update(refine.named_parameters())
        for stride in STRIDES:
            if stride in self.attention:
                out.update(self.attention[stride].named_parameters())
        return out


class FeaturePyramid:
    """Top-down pathway over the four stage outputs: 1x1 laterals, upsample-add,
    and a 3x3 smoothing conv on each merged level."""

    def __init__(self, config, seed=0):
        f = config.fpn_channels
        self.laterals = {s: Conv2dLayer("fpn.lateral.s%d" % s, c, f, 1, seed=seed)
                         for s, c in zip(STRIDES, config.stage_channels)}
        self.smooth = {s: Conv2dLayer("fpn.smooth.s%d" % s, f, f, 3, padding=1, seed=seed)
                       for s in STRIDES[:-1]}

    def forward(self, feats):
        if sorted(feats) != list(STRIDES):
            raise ValueError("expected feature maps at strides %s, got %s"
                             % (STRIDES, sorted(feats)))
        pyramid = {}
        top = self.laterals[32](feats[32])
        pyramid[32] = top
        carry = top
        for s in (16, 8, 4):
            merged = self.laterals[s](feats[s]) + ops.bilinear_upsample(carry, 2)
            pyramid[s] = self.smooth[s](merged)
            carry = merged
        return pyramid

    def named_parameters(self):
        out = {}
        for s in STRIDES:
            out.update(self.laterals[s].named_parameters())
            if s in self.smooth:
                out.update(self.smooth[s].named_parameters())
        return out


class CoarseHead:
    """Merge the pyramid at stride 4 and predict per-landmark logits through
    parallel dilated 3x3 branches (rates 1/2/4) plus a 1x1 branch."""

    def __init__(self, config, seed=0):
        f, b, k = config.fpn_channels, config.branch_channels, config.num_landmarks
        merged = 4 * f
        self.branch_1x1 = Conv2dLayer("head.branch_1x1", merged, b, 1, seed=seed)
        self.branches = [
            Conv2dLayer("head.branch_d%d" % d, merged, b, 3, dilation=d, padding=d, seed=seed)
            for d in (1, 2, 4)
        ]
        self.out = Conv2dLayer("head.out", 4 * b, k, 1, seed=seed)

    def forward(self, pyramid):
        parts = [pyramid[4]]
        for s in (8, 16, 32):
            parts.append(ops.bilinear_upsample(pyramid[s], s // 4))
        merged = concat(parts, axis=0)
        taps = [relu(self.branch_1x1(merged))]
        taps.extend(relu(b(merged)) for b in self.branches)
        return self.out(concat(taps, axis=0))

    def named_parameters(self):
        out = self.branch_1x1.named_parameters()
        for b in self.branches:
            out.update(b.named_parameters())
        out.update(self.out.named_parameters())
        return out


class FineNet:
    """Two-level hourglass over the coarse logits; its zero-initialized last
    conv makes the refined output equal the coarse input at init."""

    def __init__(self, config, seed=0):
        k, fw = config.num_landmarks, FINENET_WIDTH
        self.pre = Conv2dLayer("finenet.pre", k, fw, 3, padding=1, seed=seed)
        self.down1 = Conv2dLayer("finenet.down1", fw, fw, 3, stride=2, padding=1, seed=seed)
        self.down2 = Conv2dLayer("finenet.down2", fw, fw, 3, stride=2, padding=1, seed=seed)
        self.up1 = Conv2dLayer("finenet.up1", fw, fw, 3, padding=1, seed=seed)
        self.up2 = Conv2dLayer("finenet.up2", fw, fw, 3, padding=1, seed=seed)
        self.out = Conv2dLayer("finenet.out", fw, k, 3, padding=1, seed=seed, zero_init=True)

    def forward(self, coarse):
        e0 = relu(self.pre(coarse))
        e1 = relu(self.down1(e0))
        e2 = relu(self.down2(e1))
        d1 = relu(self.up1(ops.bilinear_upsample(e2, 2) + e1))
        d0 = relu(self.up2(ops.bilinear_upsample(d1, 2) + e0))
        return coarse + self.out(d0)

    def named_parameters(self):
        out = {}
        for layer in (self.pre, self.down1, self.down2, self.up1, self.up2, self.out):
            out.update(layer.named_parameters())
        return out


class LandmarkModel:
    """Backbone + pyramid + coarse head, with an optional residual refiner."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        self.backbone = Backbone(config, seed)
        self.fpn = FeaturePyramid(config, seed)
        self.head = CoarseHead(config, seed)
        self.finenet = FineNet(config, seed) if config.with_finenet else None

    def required_map_strides(self):
        return {"base": (), "nl": (), "sanl32": (32,),
                "sanl_all": STRIDES}[self.config.attention_variant]

    def forward(self, image, attention_maps=None, run_finenet=True):
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.shape[1] != self.config.input_size:
            raise ValueError("expected %dx%d input, got %s"
                             % (self.config.input_size, self.config.input_size, x.shape))
        feats = self.backbone.forward(x - INPUT_OFFSET, attention_maps)
        coarse = self.head.forward(self.fpn.forward(feats))
        fine = None
        if self.finenet is not None and run_finenet:
            fine = HeatmapSet(self.finenet.forward(coarse), "fine")
        return HeatmapSet(coarse, "coarse"), fine

    def named_parameters(self):
        out = {}
        out.update(self.backbone.named_parameters())
        out.update(self.fpn.named_parameters())
        out.update(self.head.named_parameters())
        if self.finenet is not None:
            out.update(self.finenet.named_parameters())
        return out

    def coarse_parameters(self):
        out = {}
        out.update(self.backbone.named_parameters())
        out.update(self.fpn.named_parameters())
        out.update(self.head.named_parameters())
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def load_state(self, blobs):
        params = self.named_parameters()
        if sorted(params) != sorted(blobs):
            raise ValueError("parameter names do not match the checkpoint")
        for name, tensor in params.items():
            arr = blobs[name]
            if arr.shape != tensor.data.shape:
                raise ValueError("shape mismatch for %s: %s vs %s"
                                 % (name, arr.shape, tensor.data.shape))
            tensor.data[...] = arr


class AttentionNet:
    """Category classifier: attention-free backbone, global average pooling and
    a linear head; exposes the four stride feature maps for Grad-CAM."""

    def __init__(self, config, seed=0):
        base_cfg = ModelConfig(**{**config.to_dict(), "attention_variant": "base",
                                  "with_finenet": False})
        self.config = base_cfg
        self.seed = seed
        self.backbone = Backbone(base_cfg, seed)
        self.fc = LinearLayer("classifier.fc", base_cfg.stage_channels[-1],
                              base_cfg.num_categories, seed=seed)
        self.trained = False

    def forward_with_features(self, image):
        x = image if isinstance(image, Tensor) else Tensor(image)
        feats = self.backbone.forward(x - INPUT_OFFSET)
        pooled = ops.pool2d(feats[32], "global-avg")
        logits = self.fc(reshape(pooled, (self.config.stage_channels[-1], 1)))
        return reshape(logits, (self.config.num_categories,)), feats

    def forward(self, image):
        logits, _ = self.forward_with_features(image)
        return logits

    def predict(self, image):
        return int(np.argmax(self.forward(image).data))

    def named_parameters(self):
        out = self.backbone.named_parameters()
        out.update(self.fc.named_parameters())
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def load_state(self, blobs):
        params = self.named_parameters()
        if sorted(params) != sorted(blobs):
            raise ValueError("parameter names do not match the checkpoint")
        for name, tensor in params.items():
            tensor.data[...] = blobs[name]


def build_backbone(config, seed=0):
    return Backbone(config, seed)


def build_model(config, seed=0):
    return LandmarkModel(config, seed)


def build_attention_net(config, seed=0):
    return AttentionNet(config, seed)


def model_forward(model, image, attention_maps=None):
    return model.forward(image, attention_maps)


# ---------------------------------------------------------------------------
# parameter / compute accounting (closed-form, mirrors the layer inventory)

def _conv_params(c_in, c_out, k, bias=True):
    return c_out * c_in * k * k + (c_out if bias else 0)


def _attention_params(c):
    inner = max(c // 2, 1)
    return 3 * (c * inner + inner) + inner * c


def count_params(config, include_finenet=None):
    """Closed-form trainable-parameter count for a LandmarkModel config."""
    ch = config.stage_channels
    total = 0
    prev = 3
    for c in ch:
        total += _conv_params(prev, c, 3) + _conv_params(c, c, 3)
        prev = c
    if config.attention_variant != "base":
        total += sum(_attention_params(c) for c in ch)
    f = config.fpn_channels
    total += sum(_conv_params(c, f, 1) for c in ch)
    total += 3 * _conv_params(f, f, 3)
    b, k = config.branch_channels, config.num_landmarks
    total += _conv_params(4 * f, b, 1) + 3 * _conv_params(4 * f, b, 3)
    total += _conv_params(4 * b, k, 1)
    with_fine = config.with_finenet if include_finenet is None else include_finenet
    if with_fine:
        fw = FINENET_WIDTH
        total += _conv_params(k, fw, 3) + 4 * _conv_params(fw, fw, 3) + _conv_params(fw, k, 3)
    return total


def count_flops(config):
    """Closed-form multiply-accumulate count for one forward pass."""
    s = config.input_size
    ch = config.stage_channels
    total = (s // 2) ** 2 * 3 * 4  # entry 2x2 average pool
    prev = 3
    for i, c in enumerate(ch):
        side = s // (4 * 2 ** i)
        total += side * side * c * prev * 9   # stride-2 reduce
        total += side * side * c * c * 9      # stride-1 refine
        prev = c
    if config.attention_variant != "base":
        for i, c in enumerate(ch):
            n = (s // (4 * 2 ** i)) ** 2
            inner = max(c // 2, 1)
            total += 3 * n * c * inner        # theta/phi/g projections
            total += 2 * n * n * inner        # similarities + aggregation
            total += n * inner * c            # w projection
    f = config.fpn_channels
    for i, c in enumerate(ch):
        side = s // (4 * 2 ** i)
        total += side * side * f * c          # lateral 1x1
    for i in range(3):
        side = s // (4 * 2 ** i)
        total += side * side * f * f * 9      # smoothing conv
        total += side * side * f * 4          # upsample-add taps
    side = s // 4
    b, k = config.branch_channels, config.num_landmarks
    for i in (1, 2, 3):
        total += side * side * f * 4          # head upsample taps
    total += side * side * b * (4 * f)        # 1x1 branch
    total += 3 * side * side * b * (4 * f) * 9
    total += side * side * k * (4 * b)
    if config.with_finenet:
        fw = FINENET_WIDTH
        total += side * side * fw * k * 9
        total += (side // 2) ** 2 * fw * fw * 9
        total += (side // 4) ** 2 * fw * fw * 9
        total += (side // 2) ** 2 * fw * fw * 9 + (side // 2) ** 2 * fw * 4
        total += side * side * fw * fw * 9 + side * side * fw * 4
        total += side * side * k * fw * 9
    return total


# ---------------------------------------------------------------------------
# checkpoints: JSON header + concatenated little-endian float64 blobs

_MAGIC = b"SANLCKPT"


def save_checkpoint(path, kind, config, seed, params, extra=None):
    """Write a self-describing checkpoint; round-trips are bit-exact."""
    names = sorted(params)
    header = {
        "kind": kind,
        "config": config.to_dict() if isinstance(config, ModelConfig) else dict(config),
        "seed": int(seed),
        "extra": extra or {},
        "params": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (kind, config_dict, seed, extra, name->array)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError("%s is not a model checkpoint" % path)
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        blobs = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("truncated checkpoint %s at parameter %s" % (path, entry["name"]))
            blobs[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header["kind"], header["config"], header["seed"], header.get("extra", {}), blobs


def save_model(path, model):
    save_checkpoint(path, "landmark_model", model.config, model.seed, model.named_parameters())


def load_model(path):
    kind, config, seed, _, blobs = load_checkpoint(path)
    if kind != "landmark_model":
        raise ValueError("checkpoint %s holds %r, not a landmark model" % (path, kind))
    model = LandmarkModel(ModelConfig.from_dict(config), seed)
    model.load_state(blobs)
    return model


def save_attention_net(path, net):
    save_checkpoint(path, "attention_net", net.config, net.seed, net.named_parameters(),
                    extra={"trained": net.trained})


def load_attention_net(path):
    kind, config, seed, extra, blobs = load_checkpoint(path)
    if kind != "attention_net":
        raise ValueError("checkpoint %s holds %r, not an attention net" % (path, kind))
    net = AttentionNet(ModelConfig.from_dict(config), seed)
    net.load_state(blobs)
    net.trained = bool(extra.get("trained", False))
    return net
