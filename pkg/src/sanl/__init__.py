"""Spatial-aware non-local attention for garment landmark detection.

A self-verifying desk-scale stack: a minimal reverse-mode autodiff core,
non-local / spatial-aware non-local attention blocks with Grad-CAM map
extraction, a pyramid heatmap network with coarse-to-fine refinement, a
procedural synthetic dataset, a training harness, and evaluation tooling.
"""

from .tensor import Tensor, backward, no_grad, ShapeError, GradientError
from .attention import AttentionMap, NonLocalParams, non_local_forward, sanl_forward, grad_cam
from .network import ModelConfig, build_model, build_attention_net, load_checkpoint, save_checkpoint
from .synth import SynthSpec, LandmarkAnnotation, generate_sample, write_dataset, read_dataset
from .train import TrainConfig, make_target, landmark_loss, sgd_step, train, pretrain_attention_net
from .evaluate import decode_heatmaps, normalized_error, evaluate_model, run_ablation, render_overlay

__all__ = [
    "Tensor", "backward", "no_grad", "ShapeError", "GradientError",
    "AttentionMap", "NonLocalParams", "non_local_forward", "sanl_forward", "grad_cam",
    "ModelConfig", "build_model", "build_attention_net", "load_checkpoint", "save_checkpoint",
    "SynthSpec", "LandmarkAnnotation", "generate_sample", "write_dataset", "read_dataset",
    "TrainConfig", "make_target", "landmark_loss", "sgd_step", "train", "pretrain_attention_net",
    "decode_heatmaps", "normalized_error", "evaluate_model", "run_ablation", "render_overlay",
]
