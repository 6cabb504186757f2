"""
神經網路區塊模組
conformer 所需的五種可重用區塊：半步前饋、卷積模組、多頭自注意力、多頭交叉注意力、FiLM。
所有區塊保持 [.., T, d] 形狀；殘差連接由呼叫端（層級）負責。
"""
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from services.numerics import ops
from services.numerics.tensor import Tensor
from utils.errors import ContractError, DimensionError

FFN_EXPANSION = 4
CONV_EXPANSION = 2
GROUP_NORM_GROUPS = 1


class Initializer:
    """
    確定性的參數初始化器：權重矩陣採 ±sqrt(6 / (fan_in + fan_out)) 均勻分布，偏差為零。
    同一 seed、同一建構順序產生完全相同的參數。
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def weight(self, shape) -> Tensor:
        fan_in, fan_out = shape[0], shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        values = self.rng.uniform(-limit, limit, size=shape)
        return Tensor(values.astype(self.dtype), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


class Module:
    """參數容器基類：以屬性宣告順序遞迴收集具名參數。"""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                value.name = f"{prefix}{name}"
                params[value.name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{prefix}{name}.{index}."))
        return params

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def astype(self, dtype) -> "Module":
        """就地轉換所有參數的精度（梯度檢查時使用 64 位元）。"""
        for param in self.named_parameters().values():
            param.data = param.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, init: Initializer, bias: bool = True):
        self.weight = init.weight((d_in, d_out))
        self.bias = init.zeros((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, init: Initializer):
        self.gain = init.ones((d,))
        self.bias = init.zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    """半步前饋：layer_norm → d→4d → swish → 4d→d（½ 縮放由呼叫端套用）。"""

    def __init__(self, d: int, init: Initializer, expansion: int = FFN_EXPANSION):
        self.norm = LayerNorm(d, init)
        self.expand = Linear(d, expansion * d, init)
        self.project = Linear(expansion * d, d, init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(ops.swish(self.expand(self.norm(x))))


class ConvModule(Module):
    """
    卷積模組：layer_norm → pointwise d→2d → GLU → 因果 depthwise 卷積 → group_norm
    → swish → pointwise d→d。
    """

    def __init__(self, d: int, kernel: int, init: Initializer,
                 groups: int = GROUP_NORM_GROUPS):
        if kernel < 1:
            raise ContractError(f"conv kernel must be >= 1, got {kernel}")
        self.groups = groups
        self.norm = LayerNorm(d, init)
        self.pointwise_in = Linear(d, CONV_EXPANSION * d, init)
        self.depthwise = init.weight((kernel, d))
        self.group_gain = init.ones((d,))
        self.group_bias = init.zeros((d,))
        self.pointwise_out = Linear(d, d, init)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.glu(self.pointwise_in(self.norm(x)))
        h = ops.conv1d_depthwise_causal(h, self.depthwise)
        h = ops.group_norm(h, self.group_gain, self.group_bias, self.groups)
        return self.pointwise_out(ops.swish(h))


@dataclass(frozen=True)
class AttentionMask:
    """
    自注意力遮罩：第 t 幀只看 [t − lookback, t]；lookback=None 表示不限回看長度。
    causal=False 時也允許看未來幀（僅供 context 全量編碼的實驗使用）。
    """
    lookback: Optional[int] = 64
    causal: bool = True

    def __post_init__(self):
        if self.lookback is not None and self.lookback < 0:
            raise ContractError(f"lookback must be >= 0, got {self.lookback}")

    def allowed(self, frames: int) -> np.ndarray:
        t = np.arange(frames)[:, None]
        s = np.arange(frames)[None, :]
        ok = np.ones((frames, frames), dtype=bool)
        if self.causal:
            ok &= s <= t
        if self.lookback is not None:
            ok &= s >= t - self.lookback
            if not self.causal:
                ok &= s <= t + self.lookback
        return ok

    def additive(self, frames: int) -> np.ndarray:
        return np.where(self.allowed(frames), 0.0, ops.BLOCKED)


def _swap_last(x: Tensor) -> Tensor:
    n = x.ndim
    return ops.transpose(x, (*range(n - 2), n - 1, n - 2))


class _Attention(Module):
    """多頭縮放點積注意力的共用部分，縮放係數 1/sqrt(d/H)，不使用任何位置編碼。"""

    def __init__(self, d: int, heads: int, init: Initializer):
        if heads < 1 or d % heads != 0:
            raise DimensionError(f"model dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(d, d, init)
        # softmax 對 key 偏差不變，故 key 投影不帶偏差
        self.key = Linear(d, d, init, bias=False)
        self.value = Linear(d, d, init)
        self.output = Linear(d, d, init)

    def _weights(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        q = ops.split_heads(self.query(q_in), self.heads)
        k = ops.split_heads(self.key(kv_in), self.heads)
        head_dim = q.shape[-1]
        scores = ops.scale(ops.matmul(q, _swap_last(k)), 1.0 / math.sqrt(head_dim))
        return ops.softmax_masked(scores, mask)

    def _attend(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        probs = self._weights(q_in, kv_in, mask)
        v = ops.split_heads(self.value(kv_in), self.heads)
        return self.output(ops.merge_heads(ops.matmul(probs, v)))


class MultiHeadSelfAttention(_Attention):
    """多頭自注意力：layer_norm 後在回看視窗內做遮罩注意力。"""

    def __init__(self, d: int, heads: int, init: Initializer):
        self.norm = LayerNorm(d, init)
        super().__init__(d, heads, init)

    def __call__(self, x: Tensor, mask: AttentionMask) -> Tensor:
        h = self.norm(x)
        return self._attend(h, h, mask.additive(x.shape[-2]))

    def attention_weights(self, x: Tensor, mask: AttentionMask) -> np.ndarray:
        h = self.norm(x)
        return self._weights(h, h, mask.additive(x.shape[-2])).data


class MultiHeadCrossAttention(_Attention):
    """
    多頭交叉注意力：query 來自輸入流，key / value 來自另一個流。
    對 context 流做不遮罩的全量注意力；context_valid 標記批次補齊的 context 幀（False 表示封鎖）。
    key / value 與 query 來自同一時間軸時（第二個交叉注意力），傳入 aligned 遮罩以維持串流因果性。
    """

    def __init__(self, d: int, heads: int, init: Initializer):
        self.query_norm = LayerNorm(d, init)
        self.context_norm = LayerNorm(d, init)
        super().__init__(d, heads, init)

    def _mask(self, q_src: Tensor, kv_src: Tensor, context_valid: Optional[np.ndarray],
              aligned: Optional[AttentionMask]) -> np.ndarray:
        if kv_src.shape[-2] == 0:
            raise ContractError("cross-attention needs at least one context frame")
        if q_src.shape[-1] != kv_src.shape[-1]:
            raise DimensionError(
                f"cross-attention operands differ in model dim: {q_src.shape} vs {kv_src.shape}")
        if aligned is not None:
            if q_src.shape[-2] != kv_src.shape[-2]:
                raise DimensionError(
                    f"aligned cross-attention needs equal lengths: {q_src.shape} vs {kv_src.shape}")
            return aligned.additive(q_src.shape[-2])
        if context_valid is None:
            return np.zeros((1, kv_src.shape[-2]))
        valid = np.asarray(context_valid, dtype=bool)
        additive = np.where(valid, 0.0, ops.BLOCKED)
        # [B, S] → [B, 1, 1, S]，對所有 head 與 query 幀廣播
        return additive.reshape(valid.shape[:-1] + (1, 1, valid.shape[-1]))

    def __call__(self, q_src: Tensor, kv_src: Tensor,
                 context_valid: Optional[np.ndarray] = None,
                 aligned: Optional[AttentionMask] = None) -> Tensor:
        mask = self._mask(q_src, kv_src, context_valid, aligned)
        return self._attend(self.query_norm(q_src), self.context_norm(kv_src), mask)

    def attention_weights(self, q_src: Tensor, kv_src: Tensor,
                          context_valid: Optional[np.ndarray] = None,
                          aligned: Optional[AttentionMask] = None) -> np.ndarray:
        mask = self._mask(q_src, kv_src, context_valid, aligned)
        return self._weights(self.query_norm(q_src), self.context_norm(kv_src), mask).data


class FiLM(Module):
    """FiLM(x, y) = r(y) ⊙ x + h(y)，r、h 為逐幀獨立的仿射轉換。"""

    def __init__(self, d: int, init: Initializer):
        self.scale = Linear(d, d, init)
        self.shift = Linear(d, d, init)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        if x.shape != y.shape:
            raise DimensionError(f"FiLM operands differ in shape: {x.shape} vs {y.shape}")
        return ops.add(ops.mul(self.scale(y), x), self.shift(y))

