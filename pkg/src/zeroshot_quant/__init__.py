"""Data-free post-training quantization with weight-derived statistics.

Pipeline: estimate per-layer activation statistics from the weights
(:mod:`.calib`), synthesize calibration inputs that reproduce them
(:mod:`.distill`), calibrate activation ranges and quantize (:mod:`.quant`).
"""
from .calib import EsaPolicy, SubstituteSet, esa_adjust, estimate_substitutes, se_step
from .distill import DistillConfig, DistilledData, distill_loss, zscore_loss
from .errors import (EmptyObserver, InvalidArgument, InvalidModel, NumericFault, ParseError,
                     QuantToolkitError, UnsupportedOp, UnsupportedVersion)
from .folding import fold_bn
from .graph import BNParams, LayerSpec, ModelGraph, forward, load_model, save_model
from .quant import (QuantParams, calibrate_activations, compute_qparams, fake_quantize,
                    quantize_model, quantized_forward)
from .tensor import ChannelStats

__version__ = "0.1.0"

__all__ = [
    "BNParams", "ChannelStats", "DistillConfig", "DistilledData", "EmptyObserver", "EsaPolicy",
    "InvalidArgument", "InvalidModel", "LayerSpec", "ModelGraph", "NumericFault", "ParseError",
    "QuantParams", "QuantToolkitError", "SubstituteSet", "UnsupportedOp", "UnsupportedVersion",
    "calibrate_activations", "compute_qparams", "distill_loss", "esa_adjust",
    "estimate_substitutes", "fake_quantize", "fold_bn", "forward", "load_model",
    "quantize_model", "quantized_forward", "save_model", "se_step", "zscore_loss",
]
