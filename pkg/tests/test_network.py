"""Model assembly: shapes, variant nesting, parameter accounting, checkpoints."""

import numpy as np
import pytest

from sanl import ops
from sanl.attention import AttentionMap
from sanl.network import (AttentionNet, FineNet, ModelConfig, STRIDES, build_attention_net,
                          build_backbone, build_model, count_flops, count_params,
                          load_attention_net, load_model, model_forward,
                          save_attention_net, save_model)
from sanl.tensor import Tensor, backward, no_grad, softmax, tsum, mul


def _image(rng, size=64):
    return Tensor(rng.random((3, size, size)))


def _zero_maps(size):
    return {s: AttentionMap(s, np.zeros((size // s, size // s))) for s in STRIDES}


def _random_maps(rng, size):
    return {s: AttentionMap(s, rng.random((size // s, size // s))) for s in STRIDES}


def test_backbone_stage_shapes():
    cfg = ModelConfig()
    backbone = build_backbone(cfg, seed=0)
    feats = backbone.forward(_image(np.random.default_rng(0)) - 0.5)
    expected = {4: (16, 16, 16), 8: (32, 8, 8), 16: (64, 4, 4), 32: (128, 2, 2)}
    assert {s: feats[s].shape for s in STRIDES} == expected


def test_nl_equals_base_at_init():
    rng = np.random.default_rng(1)
    img = _image(rng)
    out_base, _ = build_model(ModelConfig(attention_variant="base"), seed=3).forward(img)
    out_nl, _ = build_model(ModelConfig(attention_variant="nl"), seed=3).forward(img)
    assert np.array_equal(out_base.maps.data, out_nl.maps.data)


def test_variant_nesting_identical_initial_outputs():
    rng = np.random.default_rng(2)
    img = _image(rng)
    size = 64
    outputs = []
    for variant in ("base", "nl", "sanl32", "sanl_all"):
        model = build_model(ModelConfig(attention_variant=variant), seed=5)
        maps = _zero_maps(size) if variant.startswith("sanl") else None
        coarse, _ = model.forward(img, maps)
        outputs.append(coarse.maps.data)
    for other in outputs[1:]:
        assert np.array_equal(outputs[0], other)


def test_sanl_zero_maps_equals_nl_with_trained_w():
    rng = np.random.default_rng(3)
    img = _image(rng)
    nl = build_model(ModelConfig(attention_variant="nl"), seed=7)
    sanl = build_model(ModelConfig(attention_variant="sanl_all"), seed=7)
    for params in (nl.backbone.attention, sanl.backbone.attention):
        for s, p in params.items():
            p.w.weight.data[...] = np.random.default_rng(s).normal(size=p.w.weight.shape)
    out_nl, _ = nl.forward(img)
    out_sanl, _ = sanl.forward(img, _zero_maps(64))
    assert np.array_equal(out_nl.maps.data, out_sanl.maps.data)


def test_parameter_count_matches_closed_form():
    for variant in ("base", "nl", "sanl_all"):
        for finenet in (False, True):
            cfg = ModelConfig(attention_variant=variant, with_finenet=finenet)
            model = build_model(cfg, seed=0)
            actual = sum(p.size for p in model.named_parameters().values())
            assert actual == count_params(cfg), (variant, finenet)


def test_sanl_extra_params_are_exactly_the_four_blocks():
    base = count_params(ModelConfig(attention_variant="base"))
    sanl = count_params(ModelConfig(attention_variant="sanl_all"))
    blocks = 0
    for c in ModelConfig().stage_channels:
        inner = max(c // 2, 1)
        blocks += 3 * (c * inner + inner) + inner * c
    assert sanl - base == blocks


def test_flops_increase_with_attention():
    base = count_flops(ModelConfig(attention_variant="base"))
    nl = count_flops(ModelConfig(attention_variant="nl"))
    assert nl > base


def test_fpn_zero_features_give_zero_pyramid():
    cfg = ModelConfig()
    model = build_model(cfg, seed=0)
    feats = {s: Tensor(np.zeros((c, 64 // s, 64 // s)))
             for s, c in zip(STRIDES, cfg.stage_channels)}
    pyramid = model.fpn.forward(feats)
    for s in STRIDES:
        assert not pyramid[s].data.any()


def test_fpn_top_level_propagates_everywhere():
    cfg = ModelConfig()
    model = build_model(cfg, seed=1)
    feats = {s: Tensor(np.zeros((c, 64 // s, 64 // s)))
             for s, c in zip(STRIDES, cfg.stage_channels)}
    feats[32] = Tensor(np.random.default_rng(4).normal(size=(128, 2, 2)))
    pyramid = model.fpn.forward(feats)
    for s in STRIDES:
        assert np.abs(pyramid[s].data).max() > 0, s


def test_fpn_output_shapes():
    cfg = ModelConfig()
    model = build_model(cfg, seed=0)
    feats = {s: Tensor(np.zeros((c, 64 // s, 64 // s)))
             for s, c in zip(STRIDES, cfg.stage_channels)}
    pyramid = model.fpn.forward(feats)
    assert {s: pyramid[s].shape for s in STRIDES} == {
        4: (32, 16, 16), 8: (32, 8, 8), 16: (32, 4, 4), 32: (32, 2, 2)}


def test_fpn_wrong_level_count_errors():
    model = build_model(ModelConfig(), seed=0)
    with pytest.raises(ValueError):
        model.fpn.forward({4: Tensor(np.zeros((16, 16, 16)))})


def test_coarse_head_shape_contract():
    for size in (32, 64):
        cfg = ModelConfig(input_size=size)
        model = build_model(cfg, seed=0)
        coarse, fine = model.forward(Tensor(np.zeros((3, size, size))))
        assert coarse.maps.shape == (8, size // 4, size // 4)
        assert fine is None


def test_coarse_head_zero_input_is_constant_per_channel():
    cfg = ModelConfig()
    model = build_model(cfg, seed=0)
    # give the head biases a signal so the constant pattern is visible
    model.head.out.bias.data[...] = np.arange(8.0)
    pyramid = {s: Tensor(np.zeros((32, 64 // s, 64 // s))) for s in STRIDES}
    out = model.head.forward(pyramid).data
    for c in range(8):
        assert np.allclose(out[c], out[c, 0, 0])
    assert np.allclose(out[:, 0, 0], np.arange(8.0))


def test_head_branch_receptive_widths():
    cfg = ModelConfig()
    model = build_model(cfg, seed=2)
    for branch, width in zip(model.head.branches, (3, 5, 9)):
        x = Tensor(np.zeros((128, 16, 16)), requires_grad=True)
        out = branch(x)
        pick = np.zeros(out.shape)
        pick[0, 8, 8] = 1.0
        backward(tsum(mul(out, Tensor(pick))))
        support = np.nonzero(np.abs(x.grad).sum(axis=0))
        span_y = support[0].max() - support[0].min() + 1
        span_x = support[1].max() - support[1].min() + 1
        assert (span_y, span_x) == (width, width)


def test_finenet_identity_at_init_and_shape():
    cfg = ModelConfig(with_finenet=True)
    model = build_model(cfg, seed=3)
    coarse, fine = model.forward(_image(np.random.default_rng(5)))
    assert fine.maps.shape == coarse.maps.shape == (8, 16, 16)
    assert np.array_equal(fine.maps.data, coarse.maps.data)


def test_finenet_gradients_reach_both_head_and_hourglass():
    cfg = ModelConfig(with_finenet=True)
    model = build_model(cfg, seed=4)
    # break the zero init so gradients can reach the hourglass
    rng = np.random.default_rng(6)
    model.finenet.out.weight.data[...] = rng.normal(size=model.finenet.out.weight.shape) * 0.1
    coarse, fine = model.forward(_image(rng))
    backward(tsum(mul(fine.maps, fine.maps)))
    head_grad = model.head.out.weight.grad
    hg_grad = model.finenet.up2.weight.grad
    for g in (head_grad, hg_grad):
        assert g is not None and np.all(np.isfinite(g)) and np.any(g != 0.0)


def test_attention_net_logits_and_softmax():
    cfg = ModelConfig(num_categories=4)
    net = build_attention_net(cfg, seed=0)
    logits, feats = net.forward_with_features(_image(np.random.default_rng(7)))
    assert logits.shape == (4,)
    assert sorted(feats) == list(STRIDES)
    probs = softmax(logits, axis=0)
    assert np.isclose(probs.data.sum(), 1.0)


def test_base_variant_ignores_attention_maps():
    rng = np.random.default_rng(8)
    img = _image(rng)
    model = build_model(ModelConfig(), seed=9)
    plain, _ = model.forward(img)
    with_maps, _ = model.forward(img, _random_maps(rng, 64))
    assert np.array_equal(plain.maps.data, with_maps.maps.data)


def test_sanl_variant_requires_maps():
    model = build_model(ModelConfig(attention_variant="sanl_all"), seed=0)
    with pytest.raises(ValueError):
        model.forward(_image(np.random.default_rng(9)))
    model32 = build_model(ModelConfig(attention_variant="sanl32"), seed=0)
    with pytest.raises(ValueError):
        model32.forward(_image(np.random.default_rng(9)),
                        {4: AttentionMap(4, np.zeros((16, 16)))})


def test_sanl32_upsamples_the_top_map():
    rng = np.random.default_rng(10)
    img = _image(rng)
    model = build_model(ModelConfig(attention_variant="sanl32"), seed=11)
    maps = {32: AttentionMap(32, rng.random((2, 2)))}
    coarse, _ = model.forward(img, maps)
    assert coarse.maps.shape == (8, 16, 16)


def test_deterministic_builds_from_seed():
    a = build_model(ModelConfig(attention_variant="sanl_all", with_finenet=True), seed=21)
    b = build_model(ModelConfig(attention_variant="sanl_all", with_finenet=True), seed=21)
    pa, pb = a.named_parameters(), b.named_parameters()
    assert sorted(pa) == sorted(pb)
    for name in pa:
        assert np.array_equal(pa[name].data, pb[name].data), name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=48)
    with pytest.raises(ValueError):
        ModelConfig(attention_variant="both")
    with pytest.raises(ValueError):
        ModelConfig(num_landmarks=0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build_model(ModelConfig(attention_variant="sanl_all", with_finenet=True), seed=13)
    rng = np.random.default_rng(14)
    for p in model.named_parameters().values():
        p.data += rng.normal(size=p.data.shape) * 0.37
    path = str(tmp_path / "model.ckpt")
    save_model(path, model)
    restored = load_model(path)
    assert restored.config == model.config
    for name, p in model.named_parameters().items():
        assert np.array_equal(restored.named_parameters()[name].data, p.data), name


def test_attention_net_checkpoint_round_trip(tmp_path):
    net = build_attention_net(ModelConfig(), seed=15)
    net.trained = True
    path = str(tmp_path / "attn.ckpt")
    save_attention_net(path, net)
    restored = load_attention_net(path)
    assert restored.trained
    for name, p in net.named_parameters().items():
        assert np.array_equal(restored.named_parameters()[name].data, p.data), name


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_model(str(path))


def _fd_loss(model, img, maps, probe):
    coarse, _ = model.forward(img, maps)
    return tsum(mul(coarse.maps, probe)) + tsum(mul(coarse.maps, coarse.maps))


def test_end_to_end_gradient_check_small_model():
    rng = np.random.default_rng(16)
    cfg = ModelConfig(attention_variant="sanl_all", stage_channels=(2, 3, 3, 4),
                      fpn_channels=2, num_landmarks=2, num_categories=2, input_size=32)
    model = build_model(cfg, seed=17)
    img = Tensor(rng.random((3, 32, 32)))
    maps = {s: AttentionMap(s, rng.random((32 // s, 32 // s))) for s in STRIDES}
    probe = Tensor(rng.normal(size=(2, 8, 8)))

    backward(_fd_loss(model, img, maps, probe))
    params = model.named_parameters()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params.items()}
    model.zero_grad()

    h = 1e-5
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            with no_grad():
                hi = _fd_loss(model, img, maps, probe).item()
            flat[i] = keep - h
            with no_grad():
                lo = _fd_loss(model, img, maps, probe).item()
            flat[i] = keep
            num[i] = (hi - lo) / (2 * h)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    assert worst < 1e-4, worst
