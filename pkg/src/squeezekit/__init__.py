"""Construction kit, analyzer and desk-scale trainer for SqueezeNet-family CNNs."""
from .arch_builder import (ArchGraph, FireSpec, HeadSpec, Metaparams, StemSpec, Variant,
                           build_fire, build_squeezenet, ensure_valid, expand_metaparams,
                           infer_shapes, validate)
from .analysis_dse import (activation_profile, count_params, model_size, sweep_pct3x3, sweep_sr,
                           train_toy)
from .compression import CompressionConfig, compress_model
from .errors import SqueezeKitError

__version__ = "0.1.0"

__all__ = [
    "ArchGraph", "FireSpec", "HeadSpec", "Metaparams", "StemSpec", "Variant",
    "build_fire", "build_squeezenet", "ensure_valid", "expand_metaparams", "infer_shapes",
    "validate", "activation_profile", "count_params", "model_size", "sweep_pct3x3", "sweep_sr",
    "train_toy", "CompressionConfig", "compress_model", "SqueezeKitError",
]
