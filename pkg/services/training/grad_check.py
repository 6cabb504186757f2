"""
梯度檢查模組
以中央差分驗證反向傳播：每個參數張量隨機抽取若干純量，比較解析梯度與數值梯度。
"""
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional

import numpy as np

from services.model.blocks import Module
from services.numerics.tensor import Graph, Tensor
from utils.errors import ContractError, NumericalError
from utils.logger import get_logger

logger = get_logger(__name__)

STEP = 1e-5
MIN_SCALE = 1e-8


@dataclass
class GradCheckExample:
    """梯度檢查用的小樣本；IRM 取 0 / 1，避開 L1 項的不可微點。"""
    noisy_feats: np.ndarray
    context_feats: np.ndarray
    irm: np.ndarray


def make_grad_check_example(frames: int = 5, context_frames: int = 7, feature_dim: int = 128,
                            seed: int = 0) -> GradCheckExample:
    rng = np.random.default_rng(seed)
    return GradCheckExample(
        noisy_feats=rng.normal(-2.0, 1.5, size=(frames, feature_dim)),
        context_feats=rng.normal(-2.0, 1.5, size=(context_frames, feature_dim)),
        irm=rng.integers(0, 2, size=(frames, feature_dim)).astype(np.float64))


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), MIN_SCALE)


@dataclass
class GradCheckReport:
    """每個參數張量的最大相對誤差。"""
    tolerance: float
    max_errors: Dict[str, float] = field(default_factory=dict)
    samples: Dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [name for name, err in self.max_errors.items() if not err < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.max_errors.values(), default=0.0)

    def raise_for_failures(self) -> None:
        if self.failures:
            worst = ", ".join(f"{n} ({self.max_errors[n]:.2e})" for n in self.failures[:10])
            raise NumericalError(
                f"gradient check failed for {len(self.failures)} parameter tensor(s): {worst}")


def grad_check(model: Module, example=None, tolerance: float = 1e-4, samples: int = 20,
               seed: int = 0, loss_fn: Optional[Callable[[], Tensor]] = None,
               terms_fn: Optional[Callable[[], np.ndarray]] = None,
               parameters: Optional[Dict[str, Tensor]] = None) -> GradCheckReport:
    """
    比較解析梯度與中央差分（h = 1e-5）。

    Args:
        model: 參數全部為 64 位元的模型。
        example: 傳給 model.compute_loss / model.loss_terms 的樣本。
        loss_fn: 自訂 loss（未提供時使用 model.compute_loss(example)）。
        terms_fn: 數值梯度使用的逐項 loss（總和等於 loss）；逐項相減可降低相消誤差。
        parameters: 要檢查的參數，預設為 model.active_parameters()（若有）或全部參數。

    Returns:
        GradCheckReport: 每個參數張量的最大相對誤差 |a−n| / max(|a|, |n|, 1e-8)。
    """
    if loss_fn is None:
        if example is None:
            raise ContractError("grad_check needs an example or a loss_fn")
        loss_fn = partial(model.compute_loss, example)
        if terms_fn is None and hasattr(model, "loss_terms"):
            terms_fn = partial(model.loss_terms, example)
    if terms_fn is None:
        scalar_loss = loss_fn

        def terms_fn() -> np.ndarray:
            return scalar_loss().data

    if parameters is None:
        parameters = (model.active_parameters() if hasattr(model, "active_parameters")
                      else model.named_parameters())
    for name, param in parameters.items():
        if param.dtype != np.float64:
            raise ContractError(f"grad_check needs 64-bit parameters, '{name}' is {param.dtype}")

    analytic = Graph(parameters).backward(loss_fn())
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, param in parameters.items():
        count = min(samples, param.size)
        picks = rng.choice(param.size, size=count, replace=False)
        worst = 0.0
        for flat in picks:
            index = np.unravel_index(int(flat), param.shape)
            original = param.data[index]
            param.data[index] = original + STEP
            plus = terms_fn()
            param.data[index] = original - STEP
            minus = terms_fn()
            param.data[index] = original
            numeric = float(np.sum(plus - minus)) / (2.0 * STEP)
            worst = max(worst, relative_error(float(analytic[name][index]), numeric))
        report.max_errors[name] = worst
        report.samples[name] = count

    logger.info(f"Gradient check over {len(parameters)} tensors: max relative error "
                f"{report.max_error:.3e} (tolerance {tolerance:g})")
    return report
