"""
增強前端模組
端對端的特徵域增強模型：語音編碼器、噪音編碼器、交叉注意力編碼器與 sigmoid 遮罩輸出；
另含 IRM 目標、訓練 loss、推論時的縮放／下限遮罩，以及參數量計算。
"""
import json
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Union

import numpy as np

from services.audio.features import MEL_FLOOR, N_MELS, FeatureSequence, log_compress
from services.model.blocks import CONV_EXPANSION, FFN_EXPANSION, Initializer, Linear, Module
from services.model.layers import (ConformerLayer, CrossAttentionConformerLayer,
                                   CrossVariant, LayerConfig)
from services.numerics import ops
from services.numerics.tensor import Tensor
from utils.errors import ConfigurationError, DimensionError
from utils.logger import get_logger

logger = get_logger(__name__)

IRM_SILENCE = 1e-8
IRM_SILENCE_VALUE = 0.5
CONTEXT_VARIANTS = ("E1", "E2", "E3")

FeatureInput = Union[FeatureSequence, Tensor, np.ndarray]


@dataclass(frozen=True)
class FrontendConfig:
    """
    增強前端超參數。
    E0：僅語音編碼器（speech_layers 層 conformer）；E1–E3：語音編碼器 + 噪音編碼器 + 交叉注意力編碼器。
    """
    variant: str = "E3"
    d: int = 256
    speech_layers: int = 2
    noise_layers: int = 2
    cross_layers: int = 2
    heads: int = 8
    kernel: int = 15
    lookback: Optional[int] = 64
    feature_dim: int = N_MELS
    alpha: float = 0.5
    beta: float = 0.01
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("E0",) + CONTEXT_VARIANTS:
            raise ConfigurationError(f"unknown variant '{self.variant}'")
        if self.feature_dim != N_MELS:
            raise ConfigurationError(
                f"feature_dim must be {N_MELS} to match the feature pipeline, got {self.feature_dim}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must be in (0, 1), got {self.beta}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigurationError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        for name in ("speech_layers", "noise_layers", "cross_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @property
    def uses_context(self) -> bool:
        return self.variant in CONTEXT_VARIANTS

    def layer_config(self) -> LayerConfig:
        variant = CrossVariant(self.variant) if self.uses_context else CrossVariant.FULL
        return LayerConfig(d=self.d, heads=self.heads, conv_kernel=self.kernel,
                           lookback=self.lookback, variant=variant)

    @classmethod
    def full_size(cls, variant: str = "E3") -> "FrontendConfig":
        """完整尺寸設定：E0 為 4 層 × 512；E1–E3 為 2+2+2 層 × 256。"""
        if variant == "E0":
            return cls(variant="E0", d=512, speech_layers=4)
        return cls(variant=variant, d=256, speech_layers=2, noise_layers=2, cross_layers=2)

    @classmethod
    def tiny(cls, variant: str = "E3", d: int = 8, layers: int = 1, heads: int = 2,
             kernel: int = 3, dtype: str = "float64", seed: int = 0) -> "FrontendConfig":
        """梯度檢查與單元測試用的小模型。"""
        return cls(variant=variant, d=d, speech_layers=layers, noise_layers=layers,
                   cross_layers=layers, heads=heads, kernel=kernel, dtype=dtype, seed=seed)

    @classmethod
    def from_run_config(cls, run) -> "FrontendConfig":
        """由 RunConfig 推導；d / layers 未指定時沿用完整尺寸的預設值。"""
        base = cls.full_size(run.variant)
        changes: Dict[str, Any] = dict(heads=run.heads, kernel=run.kernel,
                                       lookback=run.lookback, alpha=run.alpha,
                                       beta=run.beta, dtype=run.dtype, seed=run.seed)
        if run.d is not None:
            changes["d"] = run.d
        if run.layers is not None:
            changes.update(speech_layers=run.layers, noise_layers=run.layers,
                           cross_layers=run.layers)
        return replace(base, **changes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FrontendConfig":
        return cls(**json.loads(text))


def _as_array(value: FeatureInput) -> np.ndarray:
    if isinstance(value, FeatureSequence):
        return np.asarray(value.frames)
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value)


class EnhancementFrontend(Module):
    """
    增強前端模型。
    輸入 [T × 128]（或批次 [B × T × 128]）的 log-Mel 特徵，輸出同形狀、值域 (0, 1) 的遮罩估計。
    """

    def __init__(self, cfg: FrontendConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        init = Initializer(cfg.seed, self.dtype)
        layer_cfg = cfg.layer_config()
        self.input_proj = Linear(cfg.feature_dim, cfg.d, init)
        self.speech_encoder = [ConformerLayer(layer_cfg, init)
                               for _ in range(cfg.speech_layers)]
        if cfg.uses_context:
            self.context_proj = Linear(cfg.feature_dim, cfg.d, init)
            self.noise_encoder = [ConformerLayer(layer_cfg, init)
                                  for _ in range(cfg.noise_layers)]
            self.cross_encoder = [CrossAttentionConformerLayer(layer_cfg, init)
                                  for _ in range(cfg.cross_layers)]
        self.output_proj = Linear(cfg.d, cfg.feature_dim, init)
        logger.debug(f"Built {cfg.variant} frontend with "
                     f"{self.num_active_parameters()} active parameters")

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def active_parameters(self) -> Dict[str, Tensor]:
        """前向路徑實際讀取的參數（E1 / E2 的 FiLM 與第二個交叉注意力除外）。"""
        params = self.named_parameters()
        if not self.cfg.uses_context:
            return params
        inactive: List[str] = []
        for index, layer in enumerate(self.cross_encoder):
            inactive += [f"cross_encoder.{index}.{p}" for p in layer.inactive_prefixes()]
        return {name: p for name, p in params.items()
                if not any(name.startswith(prefix) for prefix in inactive)}

    def num_active_parameters(self) -> int:
        return sum(p.size for p in self.active_parameters().values())

    def astype(self, dtype) -> "EnhancementFrontend":
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def _tensor(self, value: FeatureInput) -> Tensor:
        array = _as_array(value)
        if array.shape[-1] != self.cfg.feature_dim:
            raise DimensionError(
                f"expected {self.cfg.feature_dim}-dim features, got shape {array.shape}")
        return Tensor(array.astype(self.dtype, copy=False))

    def encode_context(self, context_feats: FeatureInput) -> Tensor:
        """噪音編碼器：context 特徵 → 編碼後的 context（所有交叉注意力層共用）。"""
        n = self.context_proj(self._tensor(context_feats))
        for layer in self.noise_encoder:
            n = layer(n)
        return n

    def forward(self, noisy_feats: FeatureInput,
                context_feats: Optional[FeatureInput] = None,
                context_valid: Optional[np.ndarray] = None) -> Tensor:
        """
        估計遮罩。

        Args:
            noisy_feats: 帶噪 log-Mel 特徵 [T × 128] 或 [B × T × 128]。
            context_feats: 噪音 context 特徵 [S × 128] 或 [B × S × 128]；E0 會忽略。
            context_valid: 批次補齊時的 context 有效幀標記 [B × S]。

        Returns:
            Tensor: 遮罩估計，值域 (0, 1)。
        """
        x = self.input_proj(self._tensor(noisy_feats))
        for layer in self.speech_encoder:
            x = layer(x)
        if self.cfg.uses_context:
            if context_feats is None:
                raise ConfigurationError(
                    f"variant {self.cfg.variant} requires noise context features")
            n = self.encode_context(context_feats)
            for layer in self.cross_encoder:
                x = layer(x, n, context_valid)
        return ops.sigmoid(self.output_proj(x))

    __call__ = forward

    def compute_loss(self, example) -> Tensor:
        """單一訓練樣本的 loss（梯度檢查用）。"""
        est = self.forward(example.noisy_feats,
                           example.context_feats if self.cfg.uses_context else None)
        return loss(example.irm, est)

    def loss_terms(self, example) -> np.ndarray:
        """逐頻格的 loss 項（總和即 compute_loss），供有限差分逐項相減。"""
        est = self.forward(example.noisy_feats,
                           example.context_feats if self.cfg.uses_context else None).data
        diff = np.asarray(example.irm, dtype=est.dtype) - est
        return np.abs(diff) + diff * diff


def compute_irm(clean_mel: np.ndarray, noise_mel: np.ndarray) -> np.ndarray:
    """
    IRM(t, c) = X / (X + N)；X + N < 1e-8 的雙靜音頻格定義為 0.5。
    """
    clean_mel = np.asarray(clean_mel, dtype=np.float64)
    noise_mel = np.asarray(noise_mel, dtype=np.float64)
    if clean_mel.shape != noise_mel.shape:
        raise DimensionError(
            f"IRM needs equal shapes, got {clean_mel.shape} and {noise_mel.shape}")
    total = clean_mel + noise_mel
    silent = total < IRM_SILENCE
    ratio = clean_mel / np.where(silent, 1.0, total)
    return np.clip(np.where(silent, IRM_SILENCE_VALUE, ratio), 0.0, 1.0)


def loss(irm: Union[np.ndarray, Tensor], est: Tensor,
         weights: Optional[np.ndarray] = None) -> Tensor:
    """
    L = Σ_{t,c} |IRM − M̂| + (IRM − M̂)²（總和，不取平均）。
    weights 為批次補齊時的幀有效遮罩（可廣播到 est）。
    """
    target = irm.data if isinstance(irm, Tensor) else np.asarray(irm)
    if target.shape != est.shape:
        raise DimensionError(f"loss shape mismatch: {target.shape} vs {est.shape}")
    diff = ops.sub(target.astype(est.dtype, copy=False), est)
    per_bin = ops.add(ops.abs_(diff), ops.square(diff))
    if weights is not None:
        per_bin = ops.mul(per_bin, np.asarray(weights, dtype=est.dtype))
    return ops.sum_(per_bin)


def mask_factor(est: Union[np.ndarray, Tensor], alpha: float = 0.5,
                beta: float = 0.01) -> np.ndarray:
    """推論遮罩係數 max(M̂, β)^α。"""
    values = est.data if isinstance(est, Tensor) else np.asarray(est)
    return np.power(np.maximum(values, beta), alpha)


def apply_mask(noisy_mel: np.ndarray, est: Union[np.ndarray, Tensor],
               alpha: float = 0.5, beta: float = 0.01,
               mel_floor: float = MEL_FLOOR) -> FeatureSequence:
    """
    X̂ = noisy_mel ⊙ max(M̂, β)^α，再做 log 壓縮。
    """
    noisy_mel = np.asarray(noisy_mel)
    factor = mask_factor(est, alpha, beta)
    if factor.shape != noisy_mel.shape:
        raise DimensionError(
            f"apply_mask shape mismatch: {noisy_mel.shape} vs {factor.shape}")
    return log_compress(noisy_mel * factor, mel_floor)


# --- 參數量（解析式，無需建立模型） ---

def _layer_norm_count(d: int) -> int:
    return 2 * d


def _linear_count(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _ffn_count(d: int) -> int:
    return _layer_norm_count(d) + _linear_count(d, FFN_EXPANSION * d) + _linear_count(FFN_EXPANSION * d, d)


def _conv_count(d: int, kernel: int) -> int:
    return (_layer_norm_count(d) + _linear_count(d, CONV_EXPANSION * d) + kernel * d
            + 2 * d + _linear_count(d, d))


def _attention_count(d: int) -> int:
    # key 投影不帶偏差
    return 4 * _linear_count(d, d) - d


def _mhsa_count(d: int) -> int:
    return _layer_norm_count(d) + _attention_count(d)


def _mhca_count(d: int) -> int:
    return 2 * _layer_norm_count(d) + _attention_count(d)


def conformer_layer_count(d: int, kernel: int) -> int:
    return 2 * _ffn_count(d) + _conv_count(d, kernel) + _mhsa_count(d) + _layer_norm_count(d)


def cross_layer_count(d: int, kernel: int, variant: str) -> int:
    variant = CrossVariant(variant)
    total = (3 * _ffn_count(d) + 2 * _conv_count(d, kernel) + _mhca_count(d)
             + _layer_norm_count(d))
    if variant.uses_film:
        total += 2 * _linear_count(d, d)
    if variant.uses_second_attention:
        total += _mhca_count(d)
    return total


def count_parameters(cfg: FrontendConfig) -> int:
    """可訓練純量總數（只計前向路徑上的參數），由設定決定。"""
    d, k, f = cfg.d, cfg.kernel, cfg.feature_dim
    total = _linear_count(f, d) + _linear_count(d, f)
    total += cfg.speech_layers * conformer_layer_count(d, k)
    if cfg.uses_context:
        total += _linear_count(f, d)
        total += cfg.noise_layers * conformer_layer_count(d, k)
        total += cfg.cross_layers * cross_layer_count(d, k, cfg.variant)
    return total
