"""共用的測試夾具：固定 seed 的亂數產生器、小模型設定與 64 位元有限差分工具。"""
import numpy as np
import pytest

from services.model.frontend import EnhancementFrontend, FrontendConfig
from services.numerics.tensor import Tensor

FD_STEP = 1e-5


def numeric_gradient(fn, array: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """對 fn(array) 的每個元素做中央差分；fn 回傳純量或陣列（陣列會加總）。"""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = np.asarray(fn(array))
        array[index] = original - step
        minus = np.asarray(fn(array))
        array[index] = original
        grad[index] = float(np.sum(plus - minus)) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """|a − n| / max(|a|, |n|, floor)；floor 讓接近零的梯度改以絕對誤差判定。"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def param(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["E0", "E1", "E2", "E3"])
def variant(request):
    return request.param


@pytest.fixture
def tiny_model(variant):
    return EnhancementFrontend(FrontendConfig.tiny(variant))


@pytest.fixture
def tiny_e3():
    return EnhancementFrontend(FrontendConfig.tiny("E3"))
