"""Block-structured pruning with a differentiable top-k mask.

The main entry points are :func:`blockprune.smart.run_smart` for the
annealed soft-mask pruner, :mod:`blockprune.baselines` for the AWG and
magnitude references, and the scikit-learn style wrappers in
:mod:`blockprune.estimators`.
"""

from .baselines import AwgConfig, run_awg, run_magnitude
from .blocks import BlockSpec, partition, sparsity_report
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, parse_config
from .data import gen_blobs, load_idx
from .dtopk import hard_topk, soft_topk, topk_forward, topk_jacobian, topk_vjp
from .estimators import AwgPruner, DenseClassifier, MagnitudePruner, SmartPruner
from .models import ModelSpec, build_model
from .smart import SmartConfig, TempSchedule, compute_k, harden, run_smart

__version__ = "0.1.0"

__all__ = [
    "AwgConfig",
    "AwgPruner",
    "BlockSpec",
    "DenseClassifier",
    "MagnitudePruner",
    "ModelSpec",
    "SmartConfig",
    "SmartPruner",
    "TempSchedule",
    "build_model",
    "compute_k",
    "gen_blobs",
    "hard_topk",
    "harden",
    "load_checkpoint",
    "load_config",
    "load_idx",
    "parse_config",
    "partition",
    "run_awg",
    "run_magnitude",
    "run_smart",
    "save_checkpoint",
    "soft_topk",
    "sparsity_report",
    "topk_forward",
    "topk_jacobian",
    "topk_vjp",
]
