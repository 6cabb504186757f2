import pytest

from scripts.run_context_benchmark import SeedResult, benchmark_configs, main
from services.model.frontend import count_parameters


def test_pass_rule_needs_both_margins():
    assert SeedResult(1, 0.5, 1.0, 6.0, 2.0).passed
    assert not SeedResult(1, 0.9, 1.0, 6.0, 2.0).passed
    assert not SeedResult(1, 0.5, 1.0, 4.0, 2.0).passed


def test_compared_models_have_matching_depth():
    context_cfg, no_context_cfg = benchmark_configs(32, seed=1)
    assert context_cfg.d == no_context_cfg.d == 32
    assert (context_cfg.speech_layers + context_cfg.cross_layers
            == no_context_cfg.speech_layers)
    assert count_parameters(context_cfg) > count_parameters(no_context_cfg)


@pytest.mark.slow
def test_context_helps_on_identity_task(capsys):
    assert main(["--seeds", "1,2,3"]) == 0
    assert "result=PASS" in capsys.readouterr().out
