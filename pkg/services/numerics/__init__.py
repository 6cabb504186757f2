"""最小張量引擎：Tensor、Graph 與可微分運算。"""
from services.numerics.tensor import (Tensor, Graph, as_tensor, backward,
                                      set_debug, debug_enabled)
from services.numerics import ops

__all__ = ["Tensor", "Graph", "as_tensor", "backward", "set_debug",
           "debug_enabled", "ops"]
