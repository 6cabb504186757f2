"""
可微分運算模組
模型所需的全部運算：矩陣乘法、逐元素運算、正規化、遮罩 softmax、因果 depthwise 卷積。
每個運算回傳新的 Tensor，並附上對應的 vjp（向量-雅可比乘積）。
"""
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from services.numerics.tensor import Tensor, as_tensor, make_result, unbroadcast
from utils.errors import ContractError, DimensionError

ArrayLike = Union[Tensor, np.ndarray, float]

# 加法遮罩中「封鎖」的代表值；大於 BLOCKED / 2 的項目視為允許
BLOCKED = -1e30
LAYER_NORM_EPS = 1e-6


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    """把兩個運算元轉為 Tensor，常數沿用另一方的 dtype。"""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


# --- 逐元素運算 ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), vjp, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard 乘積（支援廣播）。"""
    a, b = _pair(a, b)

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), vjp, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)

    def vjp(g):
        return (g * factor,)

    return make_result(a.data * factor, (a,), vjp, "scale")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), vjp, "sigmoid")


def swish(x: Tensor) -> Tensor:
    """swish(x) = x · sigmoid(x)。"""
    s = expit(x.data)

    def vjp(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return make_result(x.data * s, (x,), vjp, "swish")


def glu(x: Tensor) -> Tensor:
    """最後一軸切成兩半：前半 ⊙ sigmoid(後半)。"""
    extent = x.shape[-1]
    if extent % 2 != 0:
        raise DimensionError(f"glu needs an even last extent, got shape {x.shape}")
    half = extent // 2
    first, second = x.data[..., :half], x.data[..., half:]
    s = expit(second)

    def vjp(g):
        return (np.concatenate([g * s, g * first * s * (1.0 - s)], axis=-1),)

    return make_result(first * s, (x,), vjp, "glu")


def abs_(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * np.sign(x.data),)

    return make_result(np.abs(x.data), (x,), vjp, "abs")


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * 2.0 * x.data,)

    return make_result(x.data * x.data, (x,), vjp, "square")


def sum_(x: Tensor) -> Tensor:
    """加總所有元素，回傳純量張量。"""
    def vjp(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), vjp, "sum")


# --- 形狀運算 ---

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return make_result(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), vjp, "transpose")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, d] → [..., H, T, d/H]。"""
    *lead, frames, dim = x.shape
    if dim % heads != 0:
        raise DimensionError(f"model dim {dim} is not divisible by {heads} heads")
    y = reshape(x, (*lead, frames, heads, dim // heads))
    n = len(lead)
    return transpose(y, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, d/H] → [..., T, d]。"""
    *lead, heads, frames, head_dim = x.shape
    n = len(lead)
    y = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(y, (*lead, frames, heads * head_dim))


# --- 線性代數 ---

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    矩陣乘法 [..., M, K] · [..., K, N] → [..., M, N]，前導軸可廣播。
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} and {b.shape}")

    def vjp(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x · W + b，W 為 [d_in, d_out]。"""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# --- 正規化 ---

def standardize(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """最後一軸零平均、單位變異數（不含仿射），eps 加在根號內。"""
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def vjp(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return make_result(xhat, (x,), vjp, "standardize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """逐列正規化後套用 gain / bias。"""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm parameter shapes {gain.shape}/{bias.shape} "
            f"do not match input {x.shape}")
    return add(mul(standardize(x, eps), gain), bias)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int = 1,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """
    逐幀的 group normalization：最後一軸切成 groups 組，各組獨立正規化，再做逐通道仿射。
    groups=1 等同逐幀的 layer normalization。
    """
    dim = x.shape[-1]
    if dim % groups != 0:
        raise DimensionError(f"group_norm: {dim} channels not divisible by {groups} groups")
    if groups == 1:
        normalized = standardize(x, eps)
    else:
        grouped = reshape(x, (*x.shape[:-1], groups, dim // groups))
        normalized = reshape(standardize(grouped, eps), x.shape)
    return add(mul(normalized, gain), bias)


# --- 注意力 ---

def softmax_masked(logits: Tensor, mask: Union[np.ndarray, Tensor]) -> Tensor:
    """
    加法遮罩 softmax：mask 為 0（允許）或 BLOCKED（封鎖）。
    封鎖位置輸出恰為 0；每列至少要有一個允許位置。
    """
    mask_data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    mask_data = np.broadcast_to(mask_data, logits.shape)
    allowed = mask_data > BLOCKED / 2
    row_ok = allowed.any(axis=-1)
    if not np.all(row_ok):
        row = tuple(int(i) for i in np.argwhere(~row_ok)[0])
        raise ContractError(f"softmax_masked: fully-masked row at index {row}")

    scores = logits.data + np.where(allowed, mask_data, 0.0).astype(logits.dtype)
    peak = np.max(np.where(allowed, scores, -np.inf), axis=-1, keepdims=True)
    exps = np.where(allowed, np.exp(np.where(allowed, scores - peak, 0.0)), 0.0)
    probs = (exps / exps.sum(axis=-1, keepdims=True)).astype(logits.dtype)

    def vjp(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return make_result(probs, (logits,), vjp, "softmax_masked")


# --- 卷積 ---

def conv1d_depthwise_causal(x: Tensor, kernel: Tensor) -> Tensor:
    """
    因果 depthwise 卷積：y[t, d] = Σ_k kernel[k, d] · x[t − K + 1 + k, d]，
    輸入左側補 K−1 個零幀，輸出第 t 幀只依賴第 ≤ t 幀。
    """
    taps, channels = kernel.shape
    if x.shape[-1] != channels:
        raise DimensionError(
            f"conv1d_depthwise_causal: input {x.shape} vs kernel {kernel.shape}")
    frames = x.shape[-2]
    pad_width = [(0, 0)] * (x.ndim - 2) + [(taps - 1, 0), (0, 0)]
    padded = np.pad(x.data, pad_width)
    out = np.zeros_like(x.data)
    for k in range(taps):
        out = out + kernel.data[k] * padded[..., k:k + frames, :]

    def vjp(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        lead_axes = tuple(range(g.ndim - 1))
        for k in range(taps):
            grad_padded[..., k:k + frames, :] += g * kernel.data[k]
            grad_kernel[k] = (g * padded[..., k:k + frames, :]).sum(axis=lead_axes)
        return grad_padded[..., taps - 1:, :], grad_kernel

    return make_result(out, (x, kernel), vjp, "conv1d_depthwise_causal")
