"""Reverse-mode differentiation, MLPs, parameter storage and AdamW."""
from . import tape
from .mlp import Mlp, Params, frequency_encode
from .params import (AdamWState, ParamStore, adamw_step, load_checkpoint, read_header,
                     save_checkpoint)
from .tape import Var, backward, grad, no_grad

__all__ = [
    "AdamWState", "Mlp", "ParamStore", "Params", "Var", "adamw_step", "backward",
    "frequency_encode", "grad", "load_checkpoint", "no_grad", "read_header",
    "save_checkpoint", "tape",
]
