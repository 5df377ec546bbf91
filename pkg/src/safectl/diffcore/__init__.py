from .tape import Tape, TapeError
from .mlp import Mlp, init_mlp, forward_mlp, param_count, layer_shapes_from_sizes
from .optim import AdamState, adam_init, adam_step, NonFiniteGradient
from . import checkpoint

__all__ = [
    "Tape", "TapeError",
    "Mlp", "init_mlp", "forward_mlp", "param_count", "layer_shapes_from_sizes",
    "AdamState", "adam_init", "adam_step", "NonFiniteGradient",
    "checkpoint",
]
