"""
特徵擷取模組
波形 → 128 維 log-Mel 頻譜：Hann 視窗 32 ms、位移 10 ms、HTK Mel 刻度 125–7500 Hz。
輸入語音與噪音 context 使用同一個 FeatureExtractor（同一組濾波器）。
"""
from dataclasses import dataclass
from typing import Optional

import librosa
import numpy as np

from utils.errors import ContractError, DimensionError

SAMPLE_RATE = 16000
WINDOW_SECONDS = 0.032
HOP_SECONDS = 0.010
N_MELS = 128
MEL_FMIN = 125.0
MEL_FMAX = 7500.0
MEL_FLOOR = 1e-3


@dataclass
class Waveform:
    """單聲道波形，取樣值位於 [−1, 1]。"""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FeatureSequence:
    """[T × 128] log-Mel 特徵與幀率資訊。"""
    frames: np.ndarray
    hop: float = HOP_SECONDS
    window: float = WINDOW_SECONDS

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def window_length(sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(WINDOW_SECONDS * sample_rate))


def hop_length(sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(HOP_SECONDS * sample_rate))


def fft_size(sample_rate: int = SAMPLE_RATE) -> int:
    """視窗長度向上取到 2 的次方（16 kHz 時為 512）。"""
    return 1 << (window_length(sample_rate) - 1).bit_length()


def frame_count(num_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
    """T = 1 + floor((N − win) / hop)。"""
    win, hop = window_length(sample_rate), hop_length(sample_rate)
    if num_samples < win:
        return 0
    return 1 + (num_samples - win) // hop


def stft_power(w: Waveform) -> np.ndarray:
    """
    Hann 視窗分幀後做 FFT，回傳功率頻譜 [T × (Nfft/2 + 1)]。
    不做中心補零，幀數為 1 + floor((N − win) / hop)。
    """
    win = window_length(w.sample_rate)
    hop = hop_length(w.sample_rate)
    n_fft = fft_size(w.sample_rate)
    if len(w.samples) < win:
        raise ContractError(
            f"waveform of {len(w.samples)} samples is shorter than one "
            f"window ({win} samples)")
    spectrum = librosa.stft(w.samples, n_fft=n_fft, hop_length=hop, win_length=win,
                            window="hann", center=False)
    return np.abs(spectrum.T) ** 2


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: Optional[int] = None,
                   n_mels: int = N_MELS, fmin: float = MEL_FMIN,
                   fmax: float = MEL_FMAX) -> np.ndarray:
    """
    HTK 刻度的三角形 Mel 濾波器組 [F × n_mels]，峰值為 1、不做面積正規化。
    """
    n_fft = n_fft or fft_size(sample_rate)
    fb = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin,
                             fmax=fmax, htk=True, norm=None, dtype=np.float64)
    return fb.T


def mel_centers(n_mels: int = N_MELS, fmin: float = MEL_FMIN,
                fmax: float = MEL_FMAX) -> np.ndarray:
    """每個濾波器的中心頻率 (Hz)。"""
    return librosa.mel_frequencies(n_mels=n_mels + 2, fmin=fmin, fmax=fmax, htk=True)[1:-1]


def mel_project(power: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """功率頻譜投影到 Mel 頻帶，輸出非負。"""
    if power.shape[-1] != fb.shape[0]:
        raise DimensionError(
            f"mel_project shape mismatch: power {power.shape} vs filterbank {fb.shape}")
    return np.maximum(power @ fb, 0.0)


def log_compress(mel: np.ndarray, mel_floor: float = MEL_FLOOR) -> FeatureSequence:
    """log(max(mel, mel_floor))。"""
    return FeatureSequence(np.log(np.maximum(mel, mel_floor)))


class FeatureExtractor:
    """
    特徵擷取器，持有唯一一組 Mel 濾波器，保證輸入與 context 特徵使用相同參數。
    """

    def __init__(self, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS,
                 fmin: float = MEL_FMIN, fmax: float = MEL_FMAX,
                 mel_floor: float = MEL_FLOOR):
        self.sample_rate = sample_rate
        self.mel_floor = mel_floor
        self.filterbank = mel_filterbank(sample_rate, fft_size(sample_rate),
                                         n_mels, fmin, fmax)

    def _check_rate(self, w: Waveform) -> None:
        if w.sample_rate != self.sample_rate:
            raise ContractError(
                f"expected {self.sample_rate} Hz audio, got {w.sample_rate} Hz "
                "(resampling is not supported)")

    def mel_power(self, w: Waveform) -> np.ndarray:
        """波形 → Mel 功率 [T × 128]（log 之前）。"""
        self._check_rate(w)
        return mel_project(stft_power(w), self.filterbank)

    def log_mel(self, w: Waveform) -> FeatureSequence:
        """波形 → log-Mel 特徵。"""
        return log_compress(self.mel_power(w), self.mel_floor)
