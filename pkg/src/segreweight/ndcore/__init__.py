"""Dense-array numerical core: differentiation, primitives, optimizer, checkpoints."""
from .autodiff import Var, backward, grad, jvp, value_and_grad
from .optim import OptimState, sgd_step
from . import checkpoint, ops

__all__ = ["Var", "backward", "grad", "jvp", "value_and_grad", "OptimState", "sgd_step", "checkpoint", "ops"]
