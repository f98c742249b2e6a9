from raregen.numerics.linalg import lu_decompose, lu_logdet, psd_sqrt
from raregen.numerics.optim import AdamState, StepLR, adam_step, steplr
from raregen.numerics.tape import Node, backward, constant, grad, variable

__all__ = [
    "AdamState",
    "Node",
    "StepLR",
    "adam_step",
    "backward",
    "constant",
    "grad",
    "lu_decompose",
    "lu_logdet",
    "psd_sqrt",
    "steplr",
    "variable",
]
