"""Lower a trained ModelGraph into integer/fixed-point layers."""

from .layers import (
    FixedActivation,
    FixedBatchNorm,
    FixedDense,
    LutSoftmaxLayer,
    PackedBinaryDense,
    Signal,
    TernaryDense,
    ThresholdLayer,
    TwoThresholdLayer,
)
from .passes import (
    CompiledModel,
    CompileError,
    LayerPrecision,
    PrecisionConflictError,
    QuantPlan,
    assign_precision,
    compile_model,
    fold_bn_binary,
    fold_bn_ternary,
    infer_accumulator_width,
    model_hash,
    threshold_on_grid,
)
from .serialize import SerializationError, from_bytes, load_compiled, save_compiled, to_bytes

compile = compile_model  # noqa: A001

__all__ = [
    "CompileError", "CompiledModel", "FixedActivation", "FixedBatchNorm", "FixedDense",
    "LayerPrecision", "LutSoftmaxLayer", "PackedBinaryDense", "PrecisionConflictError",
    "QuantPlan", "SerializationError", "Signal", "TernaryDense", "ThresholdLayer",
    "TwoThresholdLayer", "assign_precision", "compile", "compile_model", "fold_bn_binary",
    "fold_bn_ternary", "from_bytes", "infer_accumulator_width", "load_compiled", "model_hash",
    "save_compiled", "threshold_on_grid", "to_bytes",
]
