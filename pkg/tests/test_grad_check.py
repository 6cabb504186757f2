import numpy as np
import pytest

from services.model.blocks import FiLM, Initializer, Linear
from services.model.frontend import EnhancementFrontend, FrontendConfig
from services.numerics import ops
from services.numerics.tensor import Tensor, make_result
from services.training.grad_check import (GradCheckReport, grad_check, make_grad_check_example,
                                          relative_error)
from utils.errors import ContractError, NumericalError


def test_linear_toy_is_exact():
    layer = Linear(3, 2, Initializer(0, np.float64))
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    weights = np.random.default_rng(1).normal(size=(4, 2))
    report = grad_check(layer, loss_fn=lambda: ops.sum_(ops.mul(layer(x), weights)),
                        tolerance=1e-9)
    assert report.passed
    assert set(report.max_errors) == {"weight", "bias"}
    assert report.samples == {"weight": 6, "bias": 2}


def test_tiny_models_pass(tiny_model):
    example = make_grad_check_example(frames=5, context_frames=7)
    report = grad_check(tiny_model, example, tolerance=1e-4, samples=20)
    assert report.passed, report.failures
    assert report.max_error < 1e-4
    assert set(report.max_errors) == set(tiny_model.active_parameters())


def test_broken_film_backward_is_caught(monkeypatch):
    def shifted_with_wrong_sign(self, x, y):
        shift = self.shift(y)
        flipped = make_result(shift.data, (shift,), lambda g: (-g,), "flipped")
        return ops.add(ops.mul(self.scale(y), x), flipped)

    monkeypatch.setattr(FiLM, "__call__", shifted_with_wrong_sign)
    model = EnhancementFrontend(FrontendConfig.tiny("E3"))
    report = grad_check(model, make_grad_check_example(frames=4, context_frames=5), samples=5)
    assert not report.passed
    assert any(".film.shift." in name for name in report.failures)
    with pytest.raises(NumericalError, match="gradient check failed"):
        report.raise_for_failures()


def test_requires_double_precision():
    model = EnhancementFrontend(FrontendConfig.tiny("E0", dtype="float32"))
    with pytest.raises(ContractError, match="64-bit"):
        grad_check(model, make_grad_check_example())


def test_requires_example_or_loss():
    with pytest.raises(ContractError):
        grad_check(Linear(2, 2, Initializer(0, np.float64)))


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5


def test_report_tolerance_is_strict():
    report = GradCheckReport(tolerance=1e-4, max_errors={"a": 1e-5, "b": 1e-4})
    assert report.failures == ["b"]
    assert report.max_error == 1e-4


def test_example_targets_are_binary():
    example = make_grad_check_example(frames=3, context_frames=2, seed=4)
    assert set(np.unique(example.irm)) <= {0.0, 1.0}
    assert example.noisy_feats.shape == (3, 128)
    assert example.context_feats.shape == (2, 128)
