"""
Conformer 層模組
由 nn 區塊組成 conformer 層與交叉注意力 conformer 層，並提供 E1 / E2 / E3 消融變體。
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from services.model.blocks import (AttentionMask, ConvModule, FeedForward, FiLM,
                                   Initializer, LayerNorm, Module,
                                   MultiHeadCrossAttention, MultiHeadSelfAttention)
from services.numerics import ops
from services.numerics.tensor import Tensor
from utils.errors import ConfigurationError, ContractError


class CrossVariant(str, Enum):
    """交叉注意力層的消融變體。"""
    FULL = "E3"
    NO_FILM = "E2"
    NO_FILM_NO_SECOND_MHCA = "E1"

    @property
    def uses_film(self) -> bool:
        return self is CrossVariant.FULL

    @property
    def uses_second_attention(self) -> bool:
        return self is not CrossVariant.NO_FILM_NO_SECOND_MHCA


@dataclass(frozen=True)
class LayerConfig:
    d: int
    heads: int = 8
    conv_kernel: int = 15
    lookback: Optional[int] = 64
    variant: CrossVariant = CrossVariant.FULL

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigurationError(
                f"model dim {self.d} must be a positive multiple of heads={self.heads}")
        if self.conv_kernel < 1:
            raise ConfigurationError(f"conv_kernel must be >= 1, got {self.conv_kernel}")

    @property
    def mask(self) -> AttentionMask:
        return AttentionMask(lookback=self.lookback, causal=True)


def _half_residual(x: Tensor, update: Tensor) -> Tensor:
    return ops.add(x, ops.scale(update, 0.5))


class ConformerLayer(Module):
    """
    Conformer 層：半步前饋 → 卷積 → 自注意力 → 半步前饋 → layer_norm。
    卷積模組位於自注意力之前。
    """

    def __init__(self, cfg: LayerConfig, init: Initializer):
        self.cfg = cfg
        self.ffn_in = FeedForward(cfg.d, init)
        self.conv = ConvModule(cfg.d, cfg.conv_kernel, init)
        self.self_attention = MultiHeadSelfAttention(cfg.d, cfg.heads, init)
        self.ffn_out = FeedForward(cfg.d, init)
        self.final_norm = LayerNorm(cfg.d, init)

    def __call__(self, x: Tensor) -> Tensor:
        x = _half_residual(x, self.ffn_in(x))
        x = ops.add(x, self.conv(x))
        x = ops.add(x, self.self_attention(x, self.cfg.mask))
        return self.final_norm(_half_residual(x, self.ffn_out(x)))


def conformer_forward(layer: ConformerLayer, x: Tensor) -> Tensor:
    return layer(x)


class CrossAttentionConformerLayer(Module):
    """
    交叉注意力 conformer 層。
    輸入流與 context 流各自經過半步前饋與卷積，接著第一個交叉注意力彙整 context，
    FiLM 合併後再以第二個交叉注意力處理，最後半步前饋與 layer_norm。

    每一層都持有完整參數；E1 / E2 不使用的 FiLM 與第二個交叉注意力參數仍存在，
    但不在前向路徑上（梯度恆為零）。context 分支的輸出 n′ 只在層內使用。
    """

    def __init__(self, cfg: LayerConfig, init: Initializer):
        self.cfg = cfg
        self.ffn_in = FeedForward(cfg.d, init)
        self.context_ffn = FeedForward(cfg.d, init)
        self.conv = ConvModule(cfg.d, cfg.conv_kernel, init)
        self.context_conv = ConvModule(cfg.d, cfg.conv_kernel, init)
        self.cross_attention = MultiHeadCrossAttention(cfg.d, cfg.heads, init)
        self.film = FiLM(cfg.d, init)
        self.second_attention = MultiHeadCrossAttention(cfg.d, cfg.heads, init)
        self.ffn_out = FeedForward(cfg.d, init)
        self.final_norm = LayerNorm(cfg.d, init)

    def inactive_prefixes(self, variant: Optional[CrossVariant] = None) -> List[str]:
        """該變體前向時不會讀取的子模組名稱。"""
        variant = CrossVariant(variant or self.cfg.variant)
        inactive = []
        if not variant.uses_film:
            inactive.append("film.")
        if not variant.uses_second_attention:
            inactive.append("second_attention.")
        return inactive

    def active_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        skip = [prefix + p for p in self.inactive_prefixes()]
        return {name: p for name, p in self.named_parameters(prefix).items()
                if not any(name.startswith(s) for s in skip)}

    def __call__(self, x: Tensor, n: Tensor,
                 context_valid: Optional[np.ndarray] = None,
                 variant: Optional[CrossVariant] = None,
                 trace: Optional[Dict[str, Tensor]] = None) -> Tensor:
        variant = CrossVariant(variant or self.cfg.variant)
        if n.shape[-2] == 0:
            raise ContractError("cross-attention layer needs at least one context frame")

        x_tilde = _half_residual(x, self.ffn_in(x))
        n_tilde = _half_residual(n, self.context_ffn(n))
        x_prime = ops.add(x_tilde, self.conv(x_tilde))
        n_prime = ops.add(n_tilde, self.context_conv(n_tilde))
        x_second = ops.add(x_prime, self.cross_attention(x_prime, n_prime, context_valid))

        if variant is CrossVariant.NO_FILM_NO_SECOND_MHCA:
            merged = x_second
            x_third = None
        else:
            # E3：x‴ = x′ ⊙ r(x″) + h(x″)，不另加殘差；E2 直接以 x″ 作為 key / value
            x_third = self.film(x_prime, x_second) if variant.uses_film else x_second
            merged = ops.add(x_prime, self.second_attention(
                x_prime, x_third, aligned=self.cfg.mask))

        y = self.final_norm(_half_residual(merged, self.ffn_out(merged)))
        if trace is not None:
            trace.update({"x_tilde": x_tilde, "n_tilde": n_tilde, "x_prime": x_prime,
                          "n_prime": n_prime, "x_second": x_second, "merged": merged,
                          "y": y})
            if x_third is not None:
                trace["x_third"] = x_third
        return y


def cross_attention_conformer_forward(layer: CrossAttentionConformerLayer, x: Tensor,
                                      n: Tensor, variant=None) -> Tensor:
    return layer(x, n, variant=CrossVariant(variant) if variant else None)
