import pytest

from config.settings import RunConfig, load_config, parse_assignments
from services.model.frontend import FrontendConfig
from utils.errors import ConfigurationError


def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config()
        assert (cfg.variant, cfg.heads, cfg.lookback, cfg.kernel) == ("E3", 8, 64, 15)
        assert (cfg.alpha, cfg.beta, cfg.lr, cfg.seed) == (0.5, 0.01, 1e-3, 1)
        assert cfg.d is None and cfg.layers is None
        assert cfg.snr_conditions() == ["-5", "0", "5"]

    def test_file_values(self, tmp_path):
        path = write_config(tmp_path, "# comment\nVARIANT=E1\nd=32\nlayers=1\nheads=4\n"
                                      "noise_wav=\n")
        cfg = load_config(path)
        assert (cfg.variant, cfg.d, cfg.layers, cfg.heads) == ("E1", 32, 1, 4)
        assert cfg.noise_wav is None

    def test_overrides_win_over_file(self, tmp_path):
        path = write_config(tmp_path, "lr=0.1\nepochs=3\n")
        cfg = load_config(path, {"lr": "0.002", "epochs": None, "batch": "8"})
        assert (cfg.lr, cfg.epochs, cfg.batch) == (0.002, 3, 8)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            load_config(write_config(tmp_path, "learning_rate=0.1\n"))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / "absent.cfg"))

    @pytest.mark.parametrize("key, value", [
        ("variant", "E7"), ("d", "30"), ("heads", "0"), ("alpha", "0"), ("beta", "1.5"),
        ("dtype", "float16"), ("lr", "-1"), ("lr", "nan"), ("epochs", "-1"), ("batch", "zero"),
        ("snrs", "-5,loud"), ("snrs", ""), ("noise_kinds", "rain"), ("task", "speaker"),
        ("speech_kinds", "wav_file"), ("val_fraction", "1.0"), ("workers", "0")])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigurationError):
            load_config(overrides={key: value})

    def test_problems_are_collected(self):
        with pytest.raises(ConfigurationError) as info:
            load_config(overrides={"variant": "E9", "batch": "0"})
        assert "variant" in str(info.value) and "batch" in str(info.value)

    def test_zero_learning_rate_allowed(self):
        assert load_config(overrides={"lr": "0"}).lr == 0.0

    def test_special_snr_labels(self):
        cfg = load_config(overrides={"snrs": "clean,random,10"})
        assert cfg.snr_conditions() == ["clean", "random", "10"]


class TestParseAssignments:
    def test_pairs(self):
        assert parse_assignments(["D=16", "snrs = -5,0 ", "out_dir=a=b"]) == {
            "d": "16", "snrs": "-5,0", "out_dir": "a=b"}

    def test_missing_equals(self):
        with pytest.raises(ConfigurationError):
            parse_assignments(["d16"])

    def test_none(self):
        assert parse_assignments(None) == {}


class TestFrontendFromRunConfig:
    def test_full_sizes_by_default(self):
        assert FrontendConfig.from_run_config(RunConfig(variant="E0")).d == 512
        cfg = FrontendConfig.from_run_config(RunConfig(variant="E2"))
        assert (cfg.d, cfg.cross_layers, cfg.variant) == (256, 2, "E2")

    def test_explicit_sizes(self):
        run = RunConfig(variant="E3", d=16, layers=1, heads=4, kernel=5, dtype="float64", seed=9)
        cfg = FrontendConfig.from_run_config(run)
        assert (cfg.d, cfg.speech_layers, cfg.noise_layers, cfg.cross_layers) == (16, 1, 1, 1)
        assert (cfg.heads, cfg.kernel, cfg.dtype, cfg.seed) == (4, 5, "float64", 9)
