"""
mmfuse - multimodal fusion of 3D CT volumes and clinical tables

A numpy reverse-mode tensor library, an attention-refined 3D CNN image encoder, a KAN tabular
encoder and multiscale cross-attention fusion, trained end to end with plain SGD on a
reproducible synthetic cohort.

Example:
    ```python
    from mmfuse import RunConfig, train

    cfg = RunConfig(geometry=(4, 16, 16), epochs=2, backbone_channels=(16, 16, 16), cab_reduction=4)
    result = train(cfg, "runs/toy")
    print(result.manifest.final_metrics)
    ```
"""

__version__ = "0.1.1"

from .config import AblationGrid, DataConfig, ModelConfig, RunConfig, TrainConfig, load_config
from .data import augment, oversample, synth_generate
from .e3d_msca import BfpuParams, E3dMscaParams, bfpu_fuse, e3d_msca_forward
from .encoders import BackboneParams, classify, image_encode
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    MmfuseError,
    NonFiniteError,
    NonFiniteLossError,
)
from .functional import conv3d, layer_norm, matmul, softmax
from .gradcheck import grad_check
from .kan import TabularEncoderParams, tabular_encode
from .losses import bce_loss
from .metrics import MetricsReport, compute_metrics
from .model import FusionModel
from .msca_fusion import MscaParams, bsf_merge, cross_attention, fuse_scale, msca_forward
from .optim import SGD, sgd_step
from .tensor import Tensor, no_grad
from .trainer import RunManifest, evaluate_checkpoint, train

__all__ = [
    # Tensor core
    "Tensor",
    "no_grad",
    "matmul",
    "conv3d",
    "softmax",
    "layer_norm",
    "grad_check",
    # Modules
    "E3dMscaParams",
    "BfpuParams",
    "e3d_msca_forward",
    "bfpu_fuse",
    "MscaParams",
    "cross_attention",
    "fuse_scale",
    "bsf_merge",
    "msca_forward",
    "BackboneParams",
    "image_encode",
    "classify",
    "TabularEncoderParams",
    "tabular_encode",
    "FusionModel",
    # Training
    "bce_loss",
    "sgd_step",
    "SGD",
    "oversample",
    "augment",
    "synth_generate",
    "MetricsReport",
    "compute_metrics",
    "train",
    "evaluate_checkpoint",
    "RunManifest",
    # Configuration
    "RunConfig",
    "ModelConfig",
    "TrainConfig",
    "DataConfig",
    "AblationGrid",
    "load_config",
    # Errors
    "MmfuseError",
    "DimensionError",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "NonFiniteError",
    "NonFiniteLossError",
]
