"""DDPNet real-time semantic segmentation kit.

NCHW tensors with tape-based reverse-mode differentiation, the dense dual-path
network and its label-space decoder, static cost analysis, and a training,
evaluation and persistence stack that runs on a CPU.
"""
from ddpnet.errors import (
    CheckpointError,
    CodecError,
    ConfigError,
    DataError,
    DDPNetError,
    ShapeError,
    UsageError,
)
from ddpnet.tensor import Shape, Tensor, add, concat_channels, split_channels
from ddpnet.autodiff import GradientSet, Tape, backward, finite_diff_check, gradients
from ddpnet.model import (
    CALIBRATED,
    PRESETS,
    DDPNet,
    ModelSpec,
    ablation_spec,
    build_ddpnet,
    preset_spec,
    with_dpm_form,
)
from ddpnet.analysis import CostReport, benchmark_fps, cost_report, count_flops, count_macs, count_params, shape_infer
from ddpnet.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CALIBRATED",
    "CheckpointError",
    "CodecError",
    "ConfigError",
    "CostReport",
    "DDPNet",
    "DDPNetError",
    "DataError",
    "GradientSet",
    "ModelSpec",
    "PRESETS",
    "Shape",
    "ShapeError",
    "Tape",
    "Tensor",
    "UsageError",
    "ablation_spec",
    "add",
    "backward",
    "benchmark_fps",
    "build_ddpnet",
    "concat_channels",
    "cost_report",
    "count_flops",
    "count_macs",
    "count_params",
    "finite_diff_check",
    "gradients",
    "preset_spec",
    "shape_infer",
    "split_channels",
    "with_dpm_form",
]
