"""
Adam 最佳化器
標準 Adam（含偏差修正）；參數更新為單一寫入者，梯度以名稱對應參數。
"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from services.numerics.tensor import Tensor
from utils.errors import ContractError, DimensionError, NumericalError

DEFAULT_LR = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """每個參數的一階動差 m、二階動差 v，以及步數 t。"""
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if self.t < 0:
            raise ContractError(f"step counter must be >= 0, got {self.t}")

    @classmethod
    def for_parameters(cls, params: Dict[str, Tensor], lr: float = DEFAULT_LR,
                       **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, param in params.items():
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        return state


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """
    就地更新參數與狀態：
      m ← β1·m + (1−β1)·g；v ← β2·v + (1−β2)·g²；θ ← θ − lr·m̂ / (√v̂ + eps)

    Raises:
        NumericalError: 任一梯度含非有限值（訊息帶參數名稱），此時不更新任何參數。
        DimensionError: 梯度形狀與參數不符。
    """
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter '{name}'")
        if grad.shape != params[name].shape:
            raise DimensionError(
                f"gradient for '{name}' has shape {grad.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for parameter '{name}' "
                                 f"at step {state.t + 1}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, grad in grads.items():
        param = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
    return state
