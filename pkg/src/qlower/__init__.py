"""Lowering of quantized networks from full precision to integer-only deployment."""
from .build import GraphBuilder
from .graph import FP, FQ, ID, QD, Graph, Node, Op, Representation, load, save, validate
from .interpreter import ExecTrace, OpTally, integer_input, run
from .lowering import (
    add_input_bias,
    bn_quantizer,
    fold_bn,
    harden_weights,
    integerize,
    lower,
    merge_bn_thresholds,
    set_deployment,
)
from .pact import calibrate, to_fakequantized
from .requant import RequantParams, choose_shift, requantize
from .tensor import QuantSpec, dequantize, quantize_linear
from .verify import VerifyReport, compare_representations, derive_node_bound

__version__ = "0.1.0"

__all__ = [
    "FP", "FQ", "ID", "QD", "ExecTrace", "Graph", "GraphBuilder", "Node", "Op", "OpTally",
    "QuantSpec", "Representation", "RequantParams", "VerifyReport", "add_input_bias",
    "bn_quantizer", "calibrate", "choose_shift", "compare_representations",
    "derive_node_bound", "dequantize", "fold_bn", "harden_weights", "integer_input",
    "integerize", "load", "lower", "merge_bn_thresholds", "quantize_linear", "requantize",
    "run", "save", "set_deployment", "to_fakequantized", "validate",
]
