"""
張量與計算圖模組
以 numpy 陣列為底層的最小張量引擎，前向運算時記錄節點，反向時做 reverse-mode 微分。

梯度不寫回張量本身，而是在 Graph.backward 的區域字典中累加，
因此同一組參數可在不同執行緒上同時做前向／反向計算。
"""
import os
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ContractError, NumericalError

# vjp: 給定輸出梯度，回傳每個父節點的梯度（不需要時為 None）
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DEBUG = os.getenv("ENHANCER_DEBUG", "").lower() in ("1", "true", "yes")


def set_debug(enabled: bool) -> None:
    """開關除錯模式：每個前向運算後檢查輸出是否全為有限值。"""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """
    稠密實數張量。
    requires_grad 為 True 的張量（參數或其下游結果）會保留父節點與 vjp，供反向傳播使用。
    """

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[VJP] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # 運算子多載委派給 ops 模組
    def __add__(self, other):
        from services.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from services.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from services.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from services.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from services.numerics import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from services.numerics import ops
        return ops.matmul(self, other)


def as_tensor(value, dtype=None) -> Tensor:
    """把 numpy 陣列或純量包成常數張量；已是 Tensor 則原樣回傳。"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data: np.ndarray, parents: Iterable[Tensor], vjp: VJP,
                op: str) -> Tensor:
    """
    建立運算結果張量；只有在任一父節點需要梯度時才記錄圖節點。
    """
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"Non-finite values produced by op '{op}'")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把廣播後的梯度加總回原本的形狀。"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def topological_order(root: Tensor) -> List[Tensor]:
    """
    以迭代式 DFS 取得從 root 可到達、需要梯度之節點的拓撲順序（父節點在前）。
    """
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Graph:
    """
    具名參數集合與反向傳播入口。
    parameters 為葉節點張量；backward 回傳每個參數的梯度，未在 loss 路徑上的參數得到零梯度。
    """

    def __init__(self, parameters: Dict[str, Tensor]):
        self.parameters: Dict[str, Tensor] = dict(parameters)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        對純量 loss 做 reverse-mode 微分。

        Args:
            loss (Tensor): 純量 loss。

        Returns:
            Dict[str, np.ndarray]: 參數名稱對應梯度，形狀與參數相同。
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.data)
            for node in reversed(topological_order(loss)):
                grad_out = grads.get(id(node))
                if grad_out is None or node._vjp is None:
                    continue
                parent_grads = node._vjp(grad_out)
                for parent, grad in zip(node._parents, parent_grads):
                    if grad is None or not parent.requires_grad:
                        continue
                    if grad.shape != parent.shape:
                        grad = unbroadcast(grad, parent.shape)
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + grad
                    else:
                        grads[key] = grad

        result: Dict[str, np.ndarray] = {}
        for name, param in self.parameters.items():
            grad = grads.get(id(param))
            if grad is None:
                grad = np.zeros_like(param.data)
            result[name] = np.asarray(grad, dtype=param.dtype).reshape(param.shape)
        return result


def backward(loss: Tensor, graph: Graph) -> Dict[str, np.ndarray]:
    """函式形式的反向傳播入口。"""
    return graph.backward(loss)
