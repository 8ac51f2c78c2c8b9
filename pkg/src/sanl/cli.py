"""Command-line surface: synth, pretrain-attn, train, eval, gradcheck, ablate,
overlay. Exit code 0 on success, 1 on a runtime error (one parsable line on
stderr), 2 on usage errors."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import evaluate, gradcheck, network, synth
from .evaluate import AblationSpec, SUITES, decode_heatmaps, evaluate_model, render_overlay, run_ablation
from .network import ModelConfig, VARIANTS, build_model, load_attention_net, load_model, save_attention_net, save_model
from .synth import SynthSpec, read_dataset, write_dataset
from .tensor import no_grad
from .train import TrainConfig, compute_attention_maps, pretrain_attention_net, train


def _say(msg):
    print(msg)


def _train_config(args, seed):
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
        return replace(cfg, seed=seed) if seed is not None else cfg
    return TrainConfig(seed=seed or 0)


def cmd_synth(args):
    spec = SynthSpec(seed=args.seed or 0, count=args.count, image_size=args.size,
                     occlusion_prob=args.occlusion_prob, clutter_level=args.clutter)
    write_dataset(spec, args.out)
    _say("wrote %d samples to %s" % (spec.count, args.out))
    return 0


def cmd_pretrain_attn(args):
    _, samples = read_dataset(args.data)
    cfg = _train_config(args, args.seed)
    net = pretrain_attention_net(samples, cfg)
    save_attention_net(args.out, net)
    _say("saved attention net to %s" % args.out)
    return 0


def cmd_train(args):
    _, samples = read_dataset(args.data)
    n_val = max(1, int(len(samples) * args.val_fraction))
    train_samples, val_samples = samples[:-n_val], samples[-n_val:]
    cfg = _train_config(args, args.seed)
    model_cfg = ModelConfig(attention_variant=args.variant,
                            input_size=train_samples[0].image.shape[1],
                            with_finenet=args.finenet)
    model = build_model(model_cfg, seed=cfg.seed)
    net = load_attention_net(args.attn) if args.attn else None
    report = train(model, train_samples, val_samples, net, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_model(os.path.join(args.out, "model.ckpt"), model)
    report.to_csv(os.path.join(args.out, "train_report.csv"))
    _say("final val NE %r; checkpoint and report in %s" % (report.final_val_ne, args.out))
    return 0


def cmd_eval(args):
    _, samples = read_dataset(args.data)
    model = load_model(args.checkpoint)
    maps = None
    if model.required_map_strides():
        if not args.attn:
            raise ValueError("this checkpoint needs --attn for its attention maps")
        net = load_attention_net(args.attn)
        maps = compute_attention_maps(net, samples)
    report = evaluate_model(model, samples, attention_maps=maps)
    if args.out:
        report.to_csv(args.out)
    _say("samples=%d average NE %s" % (report.sample_count,
                                       "undefined" if report.average is None
                                       else repr(report.average)))
    return 0


def cmd_gradcheck(args):
    ok, _ = gradcheck.run_suite(seed=args.seed or 0, instances=args.instances, log=_say)
    return 0 if ok else 1


def cmd_ablate(args):
    cfg = TrainConfig.from_file(args.config) if args.config else None
    spec = AblationSpec(suite=args.suite, seeds=tuple(range(args.seeds)),
                        data_seed=args.seed if args.seed is not None else 7,
                        train_count=args.train_count, val_count=args.val_count,
                        classifier_pool=args.classifier_pool, train_config=cfg)
    result = run_ablation(spec, log=_say)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation_%s.csv" % args.suite)
    result.to_csv(path)
    _say("wrote %s" % path)
    return 0


def cmd_overlay(args):
    _, samples = read_dataset(args.data)
    sample = samples[args.index]
    model = load_model(args.checkpoint)
    maps = None
    if model.required_map_strides():
        if not args.attn:
            raise ValueError("this checkpoint needs --attn for its attention maps")
        net = load_attention_net(args.attn)
        maps = compute_attention_maps(net, [sample])[0]
    with no_grad():
        coarse, fine = model.forward(sample.image, maps)
    preds = decode_heatmaps(fine if fine is not None else coarse,
                            model.config.input_size)
    render_overlay(sample.image, preds, sample.annotation, args.out)
    _say("wrote %s" % args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sanl",
        description="Spatial-aware non-local attention landmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, out_default=None):
        p.add_argument("--seed", type=int, default=None, help="master RNG seed")
        p.add_argument("--config", default=None, help="training config file (JSON)")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output path")
        elif out_required:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--occlusion-prob", type=float, default=0.3)
    p.add_argument("--clutter", type=int, default=6)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain-attn", help="pretrain the category classifier")
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(func=cmd_pretrain_attn)

    p = sub.add_parser("train", help="train a landmark model")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="base")
    p.add_argument("--attn", default=None, help="attention-net checkpoint")
    p.add_argument("--finenet", action="store_true")
    p.add_argument("--val-fraction", type=float, default=0.15)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attn", default=None)
    common(p, out_required=False)
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--instances", type=int, default=20)
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", choices=sorted(SUITES), default="table3")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--val-count", type=int, default=400)
    p.add_argument("--classifier-pool", type=int, default=4000)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay", help="render predictions over a sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attn", default=None)
    p.add_argument("--index", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_overlay)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, IndexError, RuntimeError) as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
