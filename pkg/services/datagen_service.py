"""
資料生成服務模組
合成訓練／評估樣本：乾淨訊號、噪音、6 秒純噪音 context、依 SNR 混音，以及對齊的 Mel 功率與 IRM 目標。
每個樣本由自己的 seed 決定，可平行生成。
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import signal

from config.settings import RunConfig
from services.audio.features import SAMPLE_RATE, FeatureExtractor, Waveform
from services.audio.wav_io import mel_dump, read_feature_dump, read_wav, write_feature_dump, write_wav
from services.model.frontend import compute_irm
from services.storage_service import ManifestRecord, StorageService
from utils.errors import ContractError, DataError, DimensionError
from utils.logger import get_logger

logger = get_logger(__name__)

SOURCE_RMS = 0.1
SILENCE_POWER = 1e-12
CLIP_TARGET = 0.99
CLEAN_LABEL = "clean"
RANDOM_LABEL = "random"
MIXED_CONDITION = "mixed"

# 身分任務的兩個噪音頻帶（Hz），彼此在 Mel 濾波器上不重疊
IDENTITY_BANDS = {"low": (250.0, 900.0), "high": (2500.0, 6000.0)}
IDENTITY_SNR_RANGE = (-5.0, 5.0)


@dataclass(frozen=True)
class SourceSpec:
    """訊號來源描述；同一 seed 產生逐位元相同的波形。"""
    kind: str
    seed: int
    path: Optional[str] = None
    band: Optional[str] = None
    rms: float = SOURCE_RMS


@dataclass
class MixResult:
    noisy: Waveform
    gain: float
    rescale: float
    speech: np.ndarray
    noise: np.ndarray


@dataclass
class MixtureExample:
    """
    一筆混音樣本。
    context_wave 為 utterance 之前的純噪音；context 與 utterance 內的噪音來自同一段連續實現，
    並套用相同的增益與防削波縮放。
    """
    example_id: str
    condition: str
    context_wave: Waveform
    noisy_wave: Waveform
    clean_wave: Waveform
    noise_wave: Waveform
    clean_mel: np.ndarray
    noise_mel: np.ndarray
    irm: np.ndarray
    snr_db: float
    gain: float = 1.0
    rescale: float = 1.0
    utterance_offset: int = 0


@dataclass
class TrainingExample:
    """模型可直接使用的特徵形式。"""
    example_id: str
    condition: str
    noisy_feats: np.ndarray
    context_feats: np.ndarray
    noisy_mel: np.ndarray
    clean_mel: np.ndarray
    noise_mel: np.ndarray
    irm: np.ndarray
    snr_db: float

    @property
    def num_frames(self) -> int:
        return int(self.noisy_feats.shape[0])


@dataclass
class ExampleSpec:
    example_id: str
    condition: str
    speech: SourceSpec
    noise: SourceSpec
    snr_db: float
    noise_class: Optional[int] = None


# --- 訊號來源 ---

def _time(n: int) -> np.ndarray:
    return np.arange(n) / SAMPLE_RATE


def _syllable_envelope(rng: np.random.Generator, n: int) -> np.ndarray:
    """平滑的音節包絡：150–300 ms 的發聲段與 40–120 ms 的停頓交替。"""
    envelope = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.05) * SAMPLE_RATE)
    while pos < n:
        length = int(rng.uniform(0.15, 0.30) * SAMPLE_RATE)
        end = min(n, pos + length)
        envelope[pos:end] = signal.windows.tukey(length, alpha=0.5)[:end - pos]
        pos = end + int(rng.uniform(0.04, 0.12) * SAMPLE_RATE)
    return envelope


def _harmonic(rng: np.random.Generator, n: int, f0_range=(100.0, 200.0),
              max_freq: float = 7000.0) -> np.ndarray:
    t = _time(n)
    f0 = rng.uniform(*f0_range)
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / SAMPLE_RATE
    wave = np.zeros(n)
    for k in range(1, int(max_freq // (f0 * 1.03)) + 1):
        wave += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    return wave * _syllable_envelope(rng, n)


def _chirp(rng: np.random.Generator, n: int) -> np.ndarray:
    t = _time(n)
    f_start, f_end = rng.uniform(150.0, 400.0), rng.uniform(2000.0, 4000.0)
    wave = signal.chirp(t, f0=f_start, t1=max(t[-1], 1e-3), f1=f_end, method="logarithmic")
    return wave * _syllable_envelope(rng, n)


def _white(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.standard_normal(n)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    shaping = np.ones_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    shaping[0] = 0.0
    return np.fft.irfft(spectrum * shaping, n)


def _am_tone(rng: np.random.Generator, n: int) -> np.ndarray:
    t = _time(n)
    wave = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(300.0, 3000.0)
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        wave += am * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return wave


def _alternating_tone(rng: np.random.Generator, n: int) -> np.ndarray:
    """兩個音調以 0.5–1.0 秒週期交替，交界處以 raised-cosine 平滑交叉淡化。"""
    t = _time(n)
    f_a, f_b = rng.uniform(300.0, 1200.0), rng.uniform(1500.0, 4000.0)
    period = rng.uniform(0.5, 1.0)
    weight = 0.5 + 0.5 * np.cos(np.pi * t / period)
    return (weight * np.sin(2 * np.pi * f_a * t)
            + (1.0 - weight) * np.sin(2 * np.pi * f_b * t))


def _competing_speech(rng: np.random.Generator, n: int) -> np.ndarray:
    return _harmonic(rng, n, f0_range=(180.0, 300.0))


def _band_tones(rng: np.random.Generator, n: int, band: str) -> np.ndarray:
    if band not in IDENTITY_BANDS:
        raise ContractError(f"unknown tone band '{band}'")
    low, high = IDENTITY_BANDS[band]
    t = _time(n)
    wave = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(low, high)
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
        wave += am * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return wave


_GENERATORS: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "harmonic_tone": _harmonic,
    "chirp": _chirp,
    "white": _white,
    "pink": _pink,
    "am_tone": _am_tone,
    "alternating_tone": _alternating_tone,
    "competing_speech": _competing_speech,
}


def synthesize(spec: SourceSpec, num_samples: Optional[int] = None) -> Waveform:
    """
    依 SourceSpec 產生波形，RMS 正規化到 spec.rms。
    wav_file 來源讀取整個檔案；指定 num_samples 時截斷，檔案不夠長則拋出 ContractError。
    """
    if spec.kind == "wav_file":
        if not spec.path:
            raise ContractError("wav_file source needs a path")
        samples = read_wav(spec.path).samples
        if num_samples is not None:
            if len(samples) < num_samples:
                raise ContractError(
                    f"'{spec.path}' holds {len(samples)} samples, {num_samples} needed")
            samples = samples[:num_samples]
        return Waveform(samples)

    if num_samples is None:
        raise ContractError(f"source '{spec.kind}' needs an explicit length")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "band_tones":
        wave = _band_tones(rng, num_samples, spec.band or "low")
    elif spec.kind in _GENERATORS:
        wave = _GENERATORS[spec.kind](rng, num_samples)
    else:
        raise ContractError(f"unknown source kind '{spec.kind}'")
    rms = math.sqrt(float(np.mean(wave ** 2)))
    if rms > 0:
        wave = wave * (spec.rms / rms)
    return Waveform(wave)


# --- 混音 ---

def signal_power(samples: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(samples, dtype=np.float64))))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float,
               context: Optional[Waveform] = None) -> MixResult:
    """
    以增益 g 縮放噪音使 10·log10(P_speech / P_(g·noise)) = snr_db（功率為整段均方值），
    noisy = speech + g·noise。峰值超過 0.99 時兩個分量一起縮小，SNR 不變。
    snr_db = +inf 表示不加噪音（g = 0）。

    Args:
        context: 與噪音同一段實現、位於語音之前的噪音；會以同一個 g 縮放，
            峰值判斷同時涵蓋 g·context，讓 context 與 noisy 維持相同位準且都不超出 [−1, 1]。
    """
    if len(speech) != len(noise):
        raise DimensionError(
            f"speech and noise lengths differ: {len(speech)} vs {len(noise)}")
    p_speech = signal_power(speech.samples)
    if p_speech < SILENCE_POWER:
        raise ContractError("speech segment is silent; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        gain = 0.0
    else:
        p_noise = signal_power(noise.samples)
        if p_noise < SILENCE_POWER:
            raise ContractError("noise segment is silent; SNR is undefined")
        gain = math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))

    scaled_noise = gain * noise.samples
    noisy = speech.samples + scaled_noise
    peak = float(np.max(np.abs(noisy))) if len(noisy) else 0.0
    if context is not None and len(context):
        peak = max(peak, gain * float(np.max(np.abs(context.samples))))
    rescale = CLIP_TARGET / peak if peak > CLIP_TARGET else 1.0
    return MixResult(noisy=Waveform(noisy * rescale, speech.sample_rate), gain=gain,
                     rescale=rescale, speech=speech.samples * rescale,
                     noise=scaled_noise * rescale)


def measure_snr(speech: np.ndarray, noise: np.ndarray) -> float:
    """獨立的功率量測：10·log10(Σs² / Σn²)。"""
    return 10.0 * math.log10(float(np.sum(np.square(speech))) / float(np.sum(np.square(noise))))


def make_example(speech_spec: SourceSpec, noise_spec: SourceSpec, snr_db: float,
                 context_seconds: float = 6.0, utterance_seconds: float = 1.5,
                 extractor: Optional[FeatureExtractor] = None, example_id: str = "",
                 condition: str = "") -> MixtureExample:
    """
    產生一筆樣本：一段連續噪音，前 context_seconds 作為 context，其餘與語音依 snr_db 混音。
    """
    extractor = extractor or FeatureExtractor()
    speech_len = None if speech_spec.kind == "wav_file" else int(round(utterance_seconds * SAMPLE_RATE))
    speech = synthesize(speech_spec, speech_len)
    context_len = int(round(context_seconds * SAMPLE_RATE))
    total = context_len + len(speech)
    if noise_spec.kind == "wav_file":
        available = len(read_wav(noise_spec.path).samples) if noise_spec.path else 0
        if available < total:
            raise ContractError(f"noise realization holds {available} samples, "
                                f"{total} needed for context + utterance")
    noise = synthesize(noise_spec, total).samples

    mix = mix_at_snr(speech, Waveform(noise[context_len:]), snr_db,
                     context=Waveform(noise[:context_len]))
    level = mix.gain * mix.rescale
    context_wave = Waveform(noise[:context_len] * level)
    clean_wave = Waveform(mix.speech)
    noise_wave = Waveform(mix.noise)
    clean_mel = extractor.mel_power(clean_wave)
    noise_mel = extractor.mel_power(noise_wave)
    return MixtureExample(
        example_id=example_id, condition=condition, context_wave=context_wave,
        noisy_wave=mix.noisy, clean_wave=clean_wave, noise_wave=noise_wave,
        clean_mel=clean_mel, noise_mel=noise_mel, irm=compute_irm(clean_mel, noise_mel),
        snr_db=float(snr_db), gain=mix.gain, rescale=mix.rescale,
        utterance_offset=context_len)


def to_training_example(example: MixtureExample,
                        extractor: Optional[FeatureExtractor] = None) -> TrainingExample:
    extractor = extractor or FeatureExtractor()
    noisy_mel = extractor.mel_power(example.noisy_wave)
    return TrainingExample(
        example_id=example.example_id, condition=example.condition,
        noisy_feats=extractor.log_mel(example.noisy_wave).frames,
        context_feats=extractor.log_mel(example.context_wave).frames,
        noisy_mel=noisy_mel, clean_mel=example.clean_mel, noise_mel=example.noise_mel,
        irm=example.irm, snr_db=example.snr_db)


def load_training_example(record: ManifestRecord,
                          extractor: Optional[FeatureExtractor] = None) -> TrainingExample:
    """由 manifest 記錄讀回 WAV 與 Mel 傾印，重新計算特徵與 IRM。"""
    extractor = extractor or FeatureExtractor()
    noisy = read_wav(record.noisy_wav)
    if record.has_context:
        context_feats = extractor.log_mel(read_wav(record.context_wav)).frames
    else:
        context_feats = np.zeros((0, extractor.filterbank.shape[1]))
    clean_mel = read_feature_dump(record.clean_mel).frames.astype(np.float64)
    noise_mel = read_feature_dump(record.noise_mel).frames.astype(np.float64)
    noisy_mel = extractor.mel_power(noisy)
    if clean_mel.shape != noisy_mel.shape or noise_mel.shape != noisy_mel.shape:
        raise DataError(f"example '{record.example_id}': Mel dumps {clean_mel.shape} / "
                        f"{noise_mel.shape} do not match noisy audio {noisy_mel.shape}")
    return TrainingExample(
        example_id=record.example_id, condition=record.condition,
        noisy_feats=extractor.log_mel(noisy).frames,
        context_feats=context_feats,
        noisy_mel=noisy_mel, clean_mel=clean_mel, noise_mel=noise_mel,
        irm=compute_irm(clean_mel, noise_mel), snr_db=record.snr_db)


# --- 資料集規劃 ---

def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def context_reveals_identity_task(seed: int, n_examples: int = 1) -> List[ExampleSpec]:
    """
    身分辨識任務：每筆樣本的噪音隨機取自兩個頻帶互不重疊的音調噪音之一，
    只有 context 揭露是哪一類。
    """
    specs = []
    for index in range(n_examples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        noise_class = int(rng.integers(2))
        band = "low" if noise_class == 0 else "high"
        snr_db = float(rng.uniform(*IDENTITY_SNR_RANGE))
        specs.append(ExampleSpec(
            example_id=f"id{index:05d}", condition=f"class{noise_class}",
            speech=SourceSpec("harmonic_tone", _seed(seed, index, 1)),
            noise=SourceSpec("band_tones", _seed(seed, index, 2), band=band),
            snr_db=snr_db, noise_class=noise_class))
    return specs


def _parse_condition(label: str) -> Optional[float]:
    if label == CLEAN_LABEL:
        return math.inf
    if label == RANDOM_LABEL:
        return None
    return float(label)


def _condition_dir(label: str) -> str:
    if label == RANDOM_LABEL:
        return MIXED_CONDITION
    if label == CLEAN_LABEL:
        return CLEAN_LABEL
    return f"snr{float(label):+g}".replace("+", "p").replace("-", "m")


def plan_examples(cfg: RunConfig) -> List[ExampleSpec]:
    """依設定列出所有樣本規格（順序固定，與平行度無關）。"""
    if cfg.task == "identity":
        return context_reveals_identity_task(cfg.seed, cfg.n_examples)

    speech_kinds = cfg.speech_kind_list()
    noise_kinds = cfg.noise_kind_list()
    specs = []
    for cond_index, label in enumerate(cfg.snr_conditions()):
        fixed = _parse_condition(label)
        condition = _condition_dir(label)
        for index in range(cfg.n_examples):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cond_index, index]))
            speech_kind = speech_kinds[index % len(speech_kinds)]
            noise_kind = noise_kinds[index % len(noise_kinds)]
            snr_db = fixed if fixed is not None else float(rng.uniform(cfg.snr_min, cfg.snr_max))
            specs.append(ExampleSpec(
                example_id=f"{condition}_{index:05d}", condition=condition,
                speech=SourceSpec(speech_kind, _seed(cfg.seed, cond_index, index, 1),
                                  path=cfg.speech_wav if speech_kind == "wav_file" else None),
                noise=SourceSpec(noise_kind, _seed(cfg.seed, cond_index, index, 2),
                                 path=cfg.noise_wav if noise_kind == "wav_file" else None),
                snr_db=snr_db))
    return specs


@dataclass
class DatasetWriter:
    """把樣本寫成 WAV 與 Mel 傾印檔，並產生 manifest。"""
    out_dir: str
    context_seconds: float = 6.0
    utterance_seconds: float = 1.5
    workers: int = 1
    storage: StorageService = field(default_factory=StorageService)

    def _write_one(self, spec: ExampleSpec) -> ManifestRecord:
        example = make_example(spec.speech, spec.noise, spec.snr_db, self.context_seconds,
                               self.utterance_seconds, example_id=spec.example_id,
                               condition=spec.condition)
        rel_dir = spec.condition
        os.makedirs(os.path.join(self.out_dir, rel_dir), exist_ok=True)
        names = {suffix: os.path.join(rel_dir, f"{spec.example_id}_{suffix}")
                 for suffix in ("context.wav", "noisy.wav", "clean.mel", "noise.mel")}
        write_wav(os.path.join(self.out_dir, names["context.wav"]), example.context_wave)
        write_wav(os.path.join(self.out_dir, names["noisy.wav"]), example.noisy_wave)
        write_feature_dump(os.path.join(self.out_dir, names["clean.mel"]), mel_dump(example.clean_mel))
        write_feature_dump(os.path.join(self.out_dir, names["noise.mel"]), mel_dump(example.noise_mel))
        return ManifestRecord(spec.example_id, names["context.wav"], names["noisy.wav"],
                              names["clean.mel"], names["noise.mel"], example.snr_db,
                              spec.condition)

    def write(self, specs: Sequence[ExampleSpec]) -> str:
        """
        生成全部樣本並寫出 manifest。

        Returns:
            str: manifest 檔案路徑。
        """
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create output directory '{self.out_dir}': {e}") from e
        logger.info(f"Generating {len(specs)} examples into {self.out_dir} "
                    f"with {self.workers} worker(s)")
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                records = list(pool.map(self._write_one, specs))
        else:
            records = [self._write_one(spec) for spec in specs]
        manifest = os.path.join(self.out_dir, "manifest.tsv")
        self.storage.write_manifest(manifest, records)
        logger.info(f"Manifest written: {manifest}")
        return manifest


def generate_dataset(cfg: RunConfig, out_dir: str) -> str:
    writer = DatasetWriter(out_dir, cfg.context_seconds, cfg.utterance_seconds, cfg.workers)
    return writer.write(plan_examples(cfg))


def generate_in_memory(specs: Sequence[ExampleSpec], context_seconds: float = 6.0,
                       utterance_seconds: float = 1.5,
                       extractor: Optional[FeatureExtractor] = None) -> List[TrainingExample]:
    """不經檔案直接生成訓練樣本（測試與 benchmark 使用）。"""
    extractor = extractor or FeatureExtractor()
    return [to_training_example(make_example(s.speech, s.noise, s.snr_db, context_seconds,
                                             utterance_seconds, extractor, s.example_id,
                                             s.condition), extractor)
            for s in specs]
