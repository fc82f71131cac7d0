"""Self-contained dense dilated convolutions merging (DDCM) segmentation engine.

A minimal reverse-mode autodiff core over (n, c, h, w) float32 tensors,
dilated-convolution layers, the DDCM encoder/decoder network with a truncated
ResNet50 backbone, median-frequency-balanced training, sliding-window TTA
inference, segmentation metrics, and static cost analysis.

Attributes are loaded lazily so that ``ddcmseg.cli`` can cap BLAS thread
pools (``--threads``) before numpy is imported.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "CostReport": "costs", "count": "costs",
    "DdcmConfig": "ddcm", "DdcmModule": "ddcm", "add_ddcm_module": "ddcm",
    "receptive_field": "ddcm", "receptive_field_of": "ddcm",
    "CheckpointError": "errors", "ConfigError": "errors", "DataError": "errors",
    "NumericError": "errors", "ShapeError": "errors",
    "LayerSpec": "graph", "ModelGraph": "graph",
    "StitchPlan": "inference", "plan_windows": "inference", "predict_image": "inference",
    "BatchNormState": "layers", "Conv2dSpec": "layers", "PReluState": "layers",
    "batch_norm": "layers", "conv2d": "layers", "log_softmax_channels": "layers",
    "max_pool": "layers", "prelu": "layers", "relu": "layers",
    "upsample_bilinear": "layers",
    "ConfusionMatrix": "metrics",
    "BackboneSpec": "models", "DdcmR50Spec": "models", "build_backbone": "models",
    "build_ddcm_r50": "models", "load_checkpoint": "models", "predictor": "models",
    "save_checkpoint": "models",
    "AdamAmsgrad": "optim", "TrainSchedule": "optim", "lr_at": "optim",
    "train": "optim", "weighted_ce_loss": "optim",
    "TileDataset": "data", "PatchSampler": "data", "ClassStats": "data",
    "compute_class_stats": "data", "generate_synthetic": "data", "sample_epoch": "data",
    "Tape": "tensor", "Tensor4": "tensor", "add": "tensor", "backward": "tensor",
    "concat_channels": "tensor", "mul": "tensor", "set_debug_checks": "tensor",
    "slice_channels": "tensor", "sum_all": "tensor",
    "ExperimentConfig": "config", "build_model": "config",
}


def __getattr__(name):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    value = getattr(import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
