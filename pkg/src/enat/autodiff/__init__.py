from . import ops
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import (Adam, OptimizerState, TrainingError, adam_step, clip_grad_norm,
                    load_checkpoint, save_checkpoint)
from .tensor import (NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward, get_tape,
                     grad_enabled, no_grad, use_tape)

__all__ = [
    "Adam", "NonFiniteError", "OptimizerState", "ShapeError", "Tape", "Tensor",
    "TrainingError", "adam_step", "as_tensor", "backward", "clip_grad_norm", "get_tape",
    "grad_enabled", "gradcheck", "load_checkpoint", "no_grad", "numerical_grad", "ops",
    "relative_error", "save_checkpoint", "use_tape",
]
