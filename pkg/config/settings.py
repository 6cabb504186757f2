"""
執行設定模組
負責載入 key=value 設定檔與命令列覆寫值，型別安全、在任何工作開始前完成驗證。
優先順序：命令列旗標 > 設定檔 > 預設值。
"""
import math
from dataclasses import dataclass, fields, MISSING, asdict
from typing import (Optional, Type, TypeVar, Any, Dict, List, Mapping, Union,
                    get_args, get_origin)

from dotenv import dotenv_values

from utils.errors import ConfigurationError
from utils.logger import get_logger

logger = get_logger(__name__)

T = TypeVar("T")

VARIANTS = ("E0", "E1", "E2", "E3")
DTYPES = ("float32", "float64")
TASKS = ("mixed", "identity")
SPEECH_KINDS = ("harmonic_tone", "chirp", "wav_file")
NOISE_KINDS = ("white", "pink", "am_tone", "alternating_tone",
               "competing_speech", "wav_file")


def _convert_value(key: str, value: Optional[str], target_type: Type[T],
                   default: Optional[T] = None) -> Optional[T]:
    """
    將字串設定值轉為欄位型別，處理 Optional 與布林值。
    """
    if value is None:
        return default

    origin_type = get_origin(target_type)
    # 處理 Optional[T] (即 Union[T, None])
    if origin_type is Union and type(None) in get_args(target_type):
        actual_type = next(
            (t for t in get_args(target_type) if t is not type(None)), str)
        if value.strip().lower() in ("", "none", "null"):
            return None
    else:
        actual_type = target_type

    try:
        if actual_type is bool:
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if actual_type is str:
            return value.strip()
        return actual_type(value.strip())
    except (ValueError, TypeError):
        raise ConfigurationError(
            f"Setting '{key}' has an invalid value '{value}' "
            f"for type {actual_type.__name__}.")


@dataclass
class RunConfig:
    """
    執行設定類別。
    涵蓋模型超參數、訓練、資料生成與梯度檢查的所有設定值。
    d / layers 為 None 時使用各變體的完整尺寸預設值。
    """
    # --- 模型 ---
    variant: str = "E3"
    d: Optional[int] = None
    layers: Optional[int] = None
    heads: int = 8
    lookback: int = 64
    kernel: int = 15
    alpha: float = 0.5
    beta: float = 0.01
    dtype: str = "float32"
    # --- 訓練 ---
    lr: float = 1e-3
    batch: int = 4
    epochs: int = 10
    seed: int = 1
    val_fraction: float = 0.25
    # --- 資料生成 ---
    task: str = "mixed"
    n_examples: int = 16
    snrs: str = "-5,0,5"
    snr_min: float = -10.0
    snr_max: float = 30.0
    speech_kinds: str = "harmonic_tone,chirp"
    noise_kinds: str = "white,pink,am_tone,alternating_tone,competing_speech"
    speech_wav: Optional[str] = None
    noise_wav: Optional[str] = None
    context_seconds: float = 6.0
    utterance_seconds: float = 1.5
    workers: int = 1
    # --- 梯度檢查 ---
    grad_tolerance: float = 1e-4
    grad_samples: int = 20
    grad_frames: int = 5
    grad_context_frames: int = 7
    # --- 路徑 ---
    manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "runs"

    def snr_conditions(self) -> List[str]:
        """解析 snrs 為條件標籤列表，例如 ['-5', '0', '5'] 或 ['random']。"""
        return [s.strip() for s in self.snrs.split(",") if s.strip()]

    def speech_kind_list(self) -> List[str]:
        return [s.strip() for s in self.speech_kinds.split(",") if s.strip()]

    def noise_kind_list(self) -> List[str]:
        return [s.strip() for s in self.noise_kinds.split(",") if s.strip()]

    def validate(self) -> "RunConfig":
        """
        驗證所有受限制的設定值，失敗時拋出 ConfigurationError。
        """
        problems: List[str] = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.d is not None and self.d < 1:
            problems.append(f"d must be >= 1, got {self.d}")
        if self.layers is not None and self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            problems.append(f"heads must be >= 1, got {self.heads}")
        elif self.d is not None and self.d % self.heads != 0:
            problems.append(f"d={self.d} is not divisible by heads={self.heads}")
        if self.lookback < 0:
            problems.append(f"lookback must be >= 0, got {self.lookback}")
        if self.kernel < 1:
            problems.append(f"kernel must be >= 1, got {self.kernel}")
        if not 0.0 < self.alpha <= 1.0:
            problems.append(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            problems.append(f"beta must be in (0, 1), got {self.beta}")
        if self.dtype not in DTYPES:
            problems.append(f"dtype must be one of {DTYPES}, got '{self.dtype}'")
        if not (self.lr >= 0.0 and math.isfinite(self.lr)):
            problems.append(f"lr must be a finite value >= 0, got {self.lr}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            problems.append(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}, got '{self.task}'")
        if self.n_examples < 1:
            problems.append(f"n_examples must be >= 1, got {self.n_examples}")
        if self.snr_min > self.snr_max:
            problems.append(f"snr_min={self.snr_min} exceeds snr_max={self.snr_max}")
        for label in self.snr_conditions():
            if label in ("random", "clean"):
                continue
            try:
                if not math.isfinite(float(label)):
                    raise ValueError(label)
            except ValueError:
                problems.append(f"snrs entry '{label}' is not a number, 'clean' or 'random'")
        if not self.snr_conditions():
            problems.append("snrs must name at least one condition")
        for kind in self.speech_kind_list():
            if kind not in SPEECH_KINDS:
                problems.append(f"unknown speech kind '{kind}'")
        for kind in self.noise_kind_list():
            if kind not in NOISE_KINDS:
                problems.append(f"unknown noise kind '{kind}'")
        if not self.speech_kind_list() or not self.noise_kind_list():
            problems.append("speech_kinds and noise_kinds must be non-empty")
        if "wav_file" in self.speech_kind_list() and not self.speech_wav:
            problems.append("speech kind 'wav_file' requires speech_wav")
        if "wav_file" in self.noise_kind_list() and not self.noise_wav:
            problems.append("noise kind 'wav_file' requires noise_wav")
        if self.context_seconds <= 0 or self.utterance_seconds <= 0:
            problems.append("context_seconds and utterance_seconds must be > 0")
        if self.workers < 1:
            problems.append(f"workers must be >= 1, got {self.workers}")
        if self.grad_tolerance <= 0:
            problems.append(f"grad_tolerance must be > 0, got {self.grad_tolerance}")
        if self.grad_samples < 1 or self.grad_frames < 1 or self.grad_context_frames < 1:
            problems.append("grad_samples, grad_frames and grad_context_frames must be >= 1")

        if problems:
            raise ConfigurationError("Invalid configuration: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _field_map() -> Dict[str, Any]:
    return {f.name.lower(): f for f in fields(RunConfig)}


def load_config(path: Optional[str] = None,
                overrides: Optional[Mapping[str, Optional[str]]] = None) -> RunConfig:
    """
    載入執行設定：讀取 key=value 設定檔，再套用命令列覆寫值，最後驗證。

    Args:
        path (Optional[str]): 設定檔路徑，None 表示只用預設值。
        overrides (Optional[Mapping]): 命令列覆寫值（字串），值為 None 的項目略過。

    Returns:
        RunConfig: 已驗證的設定。
    """
    logger.debug("--- Loading run configuration ---")
    raw: Dict[str, Optional[str]] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                file_values = dotenv_values(stream=f)
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file '{path}': {e}") from e
        raw.update({k.lower(): v for k, v in file_values.items()})
        logger.debug(f"Read {len(file_values)} settings from {path}")
    if overrides:
        raw.update({k.lower(): v for k, v in overrides.items() if v is not None})

    known = _field_map()
    unknown = sorted(k for k in raw if k not in known)
    if unknown:
        raise ConfigurationError(f"Unknown setting(s): {', '.join(unknown)}")

    kwargs: Dict[str, Any] = {}
    for name, field in known.items():
        has_default = field.default is not MISSING
        default = field.default if has_default else None
        value = _convert_value(name, raw.get(name), field.type, default)
        kwargs[field.name] = value
        if name in raw:
            logger.debug(f"  - Loaded '{field.name}': {value}")

    config = RunConfig(**kwargs).validate()
    logger.debug("--- Configuration loading complete ---")
    return config


def parse_assignments(items: Optional[List[str]]) -> Dict[str, str]:
    """解析 ['key=value', ...] 形式的命令列覆寫值。"""
    result: Dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigurationError(f"Override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        result[key.strip().lower()] = value.strip()
    return result
