import math

import numpy as np
import pytest

from services.model.frontend import EnhancementFrontend, FrontendConfig
from services.numerics import ops
from services.numerics.tensor import Graph
from services.storage_service import (NO_CONTEXT, CheckpointArchive, ManifestRecord,
                                      StorageService)
from services.training.optimizer import AdamState, adam_step
from utils.errors import DataError


@pytest.fixture
def storage():
    return StorageService()


def trained_pair(rng, variant="E3"):
    model = EnhancementFrontend(FrontendConfig.tiny(variant, seed=2))
    params = model.named_parameters()
    state = AdamState.for_parameters(params, lr=0.01)
    out = model(rng.normal(size=(3, 128)), rng.normal(size=(4, 128)))
    adam_step(params, Graph(params).backward(ops.sum_(out)), state)
    return model, state


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, storage, rng, tmp_path):
        model, state = trained_pair(rng)
        path = str(tmp_path / "model.ckpt")
        storage.save_checkpoint(path, model, state)
        loaded, loaded_state = storage.load_checkpoint(path)

        assert loaded.cfg == model.cfg
        for name, param in model.named_parameters().items():
            restored = loaded.named_parameters()[name]
            assert restored.dtype == param.dtype
            assert restored.data.tobytes() == param.data.tobytes()
        assert loaded_state.t == state.t == 1
        assert (loaded_state.lr, loaded_state.beta1, loaded_state.beta2, loaded_state.eps) == \
            (state.lr, state.beta1, state.beta2, state.eps)
        for name in state.m:
            assert loaded_state.m[name].tobytes() == state.m[name].tobytes()
            assert loaded_state.v[name].tobytes() == state.v[name].tobytes()

    def test_resaving_gives_identical_bytes(self, storage, rng, tmp_path):
        model, state = trained_pair(rng, "E1")
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        storage.save_checkpoint(str(first), model, state)
        storage.save_checkpoint(str(second), *storage.load_checkpoint(str(first)))
        assert first.read_bytes() == second.read_bytes()

    def test_model_only_checkpoint(self, storage, tmp_path):
        model = EnhancementFrontend(FrontendConfig.tiny("E0"))
        path = str(tmp_path / "init.ckpt")
        storage.save_checkpoint(path, model)
        loaded, state = storage.load_checkpoint(path)
        assert state is None
        assert loaded.variant == "E0"

    def test_restored_model_predicts_identically(self, storage, rng, tmp_path):
        model, state = trained_pair(rng)
        path = str(tmp_path / "m.ckpt")
        storage.save_checkpoint(path, model, state)
        loaded, _ = storage.load_checkpoint(path)
        noisy, context = rng.normal(size=(5, 128)), rng.normal(size=(6, 128))
        np.testing.assert_array_equal(loaded(noisy, context).data, model(noisy, context).data)

    def test_bad_magic(self):
        with pytest.raises(DataError, match="not a checkpoint"):
            CheckpointArchive.from_bytes(b"NOPE" + bytes(8))

    def test_truncated(self, storage, tmp_path):
        blob = storage.build_checkpoint(EnhancementFrontend(FrontendConfig.tiny("E0"))).to_bytes()
        with pytest.raises(DataError, match="truncated"):
            CheckpointArchive.from_bytes(blob[:-3])

    def test_trailing_bytes(self, storage):
        blob = storage.build_checkpoint(EnhancementFrontend(FrontendConfig.tiny("E0"))).to_bytes()
        with pytest.raises(DataError, match="trailing"):
            CheckpointArchive.from_bytes(blob + b"\x00")

    def test_missing_file(self, storage, tmp_path):
        with pytest.raises(DataError):
            storage.load_checkpoint(str(tmp_path / "nothing.ckpt"))

    def test_archive_preserves_dtypes(self):
        archive = CheckpointArchive({"f4": np.arange(3, dtype=np.float32),
                                     "i8": np.array(7, dtype=np.int64),
                                     "grid": np.ones((2, 0, 3))})
        back = CheckpointArchive.from_bytes(archive.to_bytes())
        assert back.names() == ["f4", "i8", "grid"]
        assert back["f4"].dtype == np.float32
        assert back["i8"].shape == () and int(back["i8"]) == 7
        assert back["grid"].shape == (2, 0, 3)

    def test_missing_entry(self):
        with pytest.raises(DataError, match="no entry"):
            CheckpointArchive()["param/x"]


class TestManifest:
    def _records(self):
        return [ManifestRecord("a", "snrp0/a_context.wav", "snrp0/a_noisy.wav",
                               "snrp0/a_clean.mel", "snrp0/a_noise.mel", 0.0, "snrp0"),
                ManifestRecord("b", NO_CONTEXT, "clean/b_noisy.wav", "clean/b_clean.mel",
                               "clean/b_noise.mel", math.inf, "clean"),
                ManifestRecord("c", "mixed/c_context.wav", "mixed/c_noisy.wav",
                               "mixed/c_clean.mel", "mixed/c_noise.mel", -3.25, "mixed")]

    def test_round_trip(self, storage, tmp_path):
        path = str(tmp_path / "manifest.tsv")
        storage.write_manifest(path, self._records())
        assert storage.read_manifest(path, resolve=False) == self._records()

    def test_resolves_relative_paths(self, storage, tmp_path):
        path = str(tmp_path / "manifest.tsv")
        storage.write_manifest(path, self._records())
        first, second, _ = storage.read_manifest(path)
        assert first.noisy_wav == str(tmp_path / "snrp0/a_noisy.wav")
        assert second.context_wav == NO_CONTEXT
        assert not second.has_context and first.has_context

    def test_header_line(self, storage, tmp_path):
        path = tmp_path / "manifest.tsv"
        storage.write_manifest(str(path), self._records())
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("#example_id\tcontext_wav")
        assert lines[2].split("\t")[5] == "inf"

    def test_empty_manifest(self, storage, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("#header only\n", encoding="utf-8")
        with pytest.raises(DataError, match="no examples"):
            storage.read_manifest(str(path))

    def test_wrong_field_count(self, storage, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("a\tb\tc\n", encoding="utf-8")
        with pytest.raises(DataError, match="line 1"):
            storage.read_manifest(str(path))

    def test_bad_snr(self, storage, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("a\tc.wav\tn.wav\tx.mel\ty.mel\tloud\tsnrp0\n", encoding="utf-8")
        with pytest.raises(DataError, match="bad snr_db"):
            storage.read_manifest(str(path))
