"""
音訊檔案模組
讀寫 16-bit PCM 單聲道 WAV，以及 log-Mel 特徵傾印格式：
  header  = magic 'LMEL' | T (uint32) | F (uint32) | hop 秒 (float32) | window 秒 (float32)
  payload = 列優先 float32，小端序
"""
import struct

import numpy as np
import soundfile as sf

from services.audio.features import (FeatureSequence, Waveform, SAMPLE_RATE,
                                     HOP_SECONDS, WINDOW_SECONDS)
from utils.errors import ContractError, DataError
from utils.logger import get_logger

logger = get_logger(__name__)

FEATURE_MAGIC = b"LMEL"
_HEADER = struct.Struct("<4sIIff")


def read_wav(path: str, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """讀取單聲道 16-bit PCM WAV。"""
    try:
        info = sf.info(path)
        samples, rate = sf.read(path, dtype="float64", always_2d=True)
    except (RuntimeError, OSError) as e:
        raise DataError(f"Cannot read WAV file '{path}': {e}") from e
    if info.subtype != "PCM_16":
        raise DataError(f"'{path}' is {info.subtype}, expected 16-bit PCM")
    if samples.shape[1] != 1:
        raise DataError(f"'{path}' has {samples.shape[1]} channels, expected mono")
    if rate != expected_rate:
        raise DataError(f"'{path}' is sampled at {rate} Hz, expected {expected_rate} Hz")
    return Waveform(samples[:, 0], rate)


def write_wav(path: str, w: Waveform) -> None:
    """寫出單聲道 16-bit PCM WAV；取樣值超出 [−1, 1] 時拒絕寫入，不做截斷。"""
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if peak > 1.0:
        raise ContractError(f"refusing to write '{path}': peak {peak:.4f} is outside [-1, 1]")
    try:
        sf.write(path, w.samples, w.sample_rate, subtype="PCM_16")
    except (RuntimeError, OSError) as e:
        raise DataError(f"Cannot write WAV file '{path}': {e}") from e
    logger.debug(f"Wrote {len(w)} samples to {path}")


def write_feature_dump(path: str, features: FeatureSequence) -> None:
    """寫出特徵傾印檔。"""
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    if frames.ndim != 2:
        raise DataError(f"feature dump needs a 2-D matrix, got shape {frames.shape}")
    header = _HEADER.pack(FEATURE_MAGIC, frames.shape[0], frames.shape[1],
                          features.hop, features.window)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(frames.tobytes(order="C"))
    except OSError as e:
        raise DataError(f"Cannot write feature dump '{path}': {e}") from e


def read_feature_dump(path: str) -> FeatureSequence:
    """讀取特徵傾印檔。"""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"Cannot read feature dump '{path}': {e}") from e
    if len(blob) < _HEADER.size:
        raise DataError(f"'{path}' is too short to hold a feature header")
    magic, frames, dim, hop, window = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise DataError(f"'{path}' has bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != frames * dim * 4:
        raise DataError(
            f"'{path}' payload holds {len(payload)} bytes, expected {frames * dim * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, dim)
    return FeatureSequence(values.astype(np.float32), float(hop), float(window))


def mel_dump(frames: np.ndarray) -> FeatureSequence:
    """把 Mel 功率矩陣包成可傾印的 FeatureSequence（沿用相同標頭）。"""
    return FeatureSequence(np.asarray(frames), HOP_SECONDS, WINDOW_SECONDS)
