"""
儲存服務模組
負責模型 checkpoint 與資料集 manifest 的讀寫。

checkpoint 檔案格式（小端序）：
  magic 'XACK' | 版本 (uint32) | 項目數 (uint32)
  每個項目：名稱長度 (uint32) | UTF-8 名稱 | rank (uint32) | 各維長度 (uint64 × rank)
            | dtype 標記 (uint8) | 原始數值
"""
import io
import math
import os
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from services.model.frontend import EnhancementFrontend, FrontendConfig
from services.training.optimizer import AdamState
from utils.errors import DataError
from utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"XACK"
CHECKPOINT_VERSION = 1

# dtype 標記
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_FOR_KIND = {np.dtype(v).str: k for k, v in _DTYPE_TAGS.items()}

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam/m/"
ADAM_V_PREFIX = "adam/v/"
ADAM_STEP = "adam/t"
ADAM_HPARAMS = "adam/hparams"
CONFIG_ENTRY = "meta/frontend_config"

MANIFEST_FIELDS = ("example_id", "context_wav", "noisy_wav", "clean_mel",
                   "noise_mel", "snr_db", "condition")
# context_wav 欄位為 "-" 表示該樣本沒有 context
NO_CONTEXT = "-"


class CheckpointArchive:
    """具名張量集合；save / load 來回保證逐位元相同。"""

    def __init__(self, entries: Optional[Dict[str, np.ndarray]] = None):
        self.entries: Dict[str, np.ndarray] = dict(entries or {})

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise DataError(f"checkpoint has no entry '{name}'") from None

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.entries[name] = np.asarray(value)

    def names(self) -> List[str]:
        return list(self.entries)

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        buffer.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                 len(self.entries)))
        for name, value in self.entries.items():
            array = np.asarray(value)
            little = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
            tag = _TAG_FOR_KIND.get(np.dtype(little).str)
            if tag is None:
                raise DataError(f"checkpoint entry '{name}' has unsupported dtype {array.dtype}")
            encoded = name.encode("utf-8")
            buffer.write(struct.pack("<I", len(encoded)))
            buffer.write(encoded)
            buffer.write(struct.pack("<I", array.ndim))
            buffer.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            buffer.write(struct.pack("<B", tag))
            buffer.write(np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag]).tobytes())
        return buffer.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "CheckpointArchive":
        reader = _Reader(blob, source)
        magic, version, count = reader.unpack("<4sII")
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"'{source}' is not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise DataError(f"'{source}' has unsupported checkpoint version {version}")
        entries: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<I")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<I")
            shape = reader.unpack(f"<{rank}Q") if rank else ()
            (tag,) = reader.unpack("<B")
            if tag not in _DTYPE_TAGS:
                raise DataError(f"'{source}' entry '{name}' has unknown dtype tag {tag}")
            dtype = _DTYPE_TAGS[tag]
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = reader.take(size * dtype.itemsize)
            entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if reader.remaining:
            raise DataError(f"'{source}' has {reader.remaining} trailing bytes")
        return cls(entries)

    def save(self, path: str) -> None:
        try:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "wb") as f:
                f.write(self.to_bytes())
        except OSError as e:
            raise DataError(f"Cannot write checkpoint '{path}': {e}") from e
        logger.debug(f"Saved checkpoint with {len(self.entries)} entries to {path}")

    @classmethod
    def load(cls, path: str) -> "CheckpointArchive":
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise DataError(f"Cannot read checkpoint '{path}': {e}") from e
        return cls.from_bytes(blob, path)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.source = source
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise DataError(f"'{self.source}' is truncated at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class ManifestRecord:
    """manifest 的一筆資料；路徑相對於 manifest 所在目錄。"""
    example_id: str
    context_wav: str
    noisy_wav: str
    clean_mel: str
    noise_mel: str
    snr_db: float
    condition: str

    @property
    def has_context(self) -> bool:
        return self.context_wav != NO_CONTEXT

    def resolve(self, root: str) -> "ManifestRecord":
        def join(p: str) -> str:
            return p if p == NO_CONTEXT or os.path.isabs(p) else os.path.join(root, p)
        return ManifestRecord(self.example_id, join(self.context_wav), join(self.noisy_wav),
                              join(self.clean_mel), join(self.noise_mel), self.snr_db,
                              self.condition)


def _format_snr(snr_db: float) -> str:
    return "inf" if math.isinf(snr_db) else repr(float(snr_db))


class StorageService:
    """
    儲存服務，封裝 checkpoint 與 manifest 的檔案操作。
    """

    # --- checkpoint ---

    def build_checkpoint(self, model: EnhancementFrontend,
                         state: Optional[AdamState] = None) -> CheckpointArchive:
        archive = CheckpointArchive()
        for name, param in model.named_parameters().items():
            archive[PARAM_PREFIX + name] = param.data
        if state is not None:
            for name, value in state.m.items():
                archive[ADAM_M_PREFIX + name] = value
            for name, value in state.v.items():
                archive[ADAM_V_PREFIX + name] = value
            archive[ADAM_STEP] = np.array(state.t, dtype=np.int64)
            archive[ADAM_HPARAMS] = np.array([state.lr, state.beta1, state.beta2, state.eps],
                                             dtype=np.float64)
        archive[CONFIG_ENTRY] = np.frombuffer(model.cfg.to_json().encode("utf-8"), dtype=np.uint8)
        return archive

    def save_checkpoint(self, path: str, model: EnhancementFrontend,
                        state: Optional[AdamState] = None) -> None:
        self.build_checkpoint(model, state).save(path)
        logger.info(f"Checkpoint written: {path}")

    def restore(self, archive: CheckpointArchive,
                source: str = "<archive>") -> Tuple[EnhancementFrontend, Optional[AdamState]]:
        """由 archive 重建模型（與可選的 Adam 狀態）。"""
        cfg = FrontendConfig.from_json(bytes(archive[CONFIG_ENTRY]).decode("utf-8"))
        model = EnhancementFrontend(cfg)
        params = model.named_parameters()
        for name, param in params.items():
            value = archive[PARAM_PREFIX + name]
            if value.shape != param.shape:
                raise DataError(f"'{source}' entry '{name}' has shape {value.shape}, "
                                f"model expects {param.shape}")
            param.data = value.astype(model.dtype, copy=True)
        extra = [n for n in archive.names()
                 if n.startswith(PARAM_PREFIX) and n[len(PARAM_PREFIX):] not in params]
        if extra:
            raise DataError(f"'{source}' holds parameters the model does not have: {extra[:3]}")

        state = None
        if ADAM_STEP in archive:
            lr, beta1, beta2, eps = (float(x) for x in archive[ADAM_HPARAMS])
            state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                              t=int(archive[ADAM_STEP]))
            for name in params:
                if ADAM_M_PREFIX + name in archive:
                    state.m[name] = archive[ADAM_M_PREFIX + name].copy()
                    state.v[name] = archive[ADAM_V_PREFIX + name].copy()
        return model, state

    def load_checkpoint(self, path: str) -> Tuple[EnhancementFrontend, Optional[AdamState]]:
        model, state = self.restore(CheckpointArchive.load(path), path)
        logger.info(f"Loaded {model.variant} checkpoint from {path}")
        return model, state

    # --- manifest ---

    def write_manifest(self, path: str, records: Iterable[ManifestRecord]) -> None:
        lines = ["#" + "\t".join(MANIFEST_FIELDS)]
        for r in records:
            lines.append("\t".join([r.example_id, r.context_wav, r.noisy_wav, r.clean_mel,
                                    r.noise_mel, _format_snr(r.snr_db), r.condition]))
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write("\n".join(lines) + "\n")
        except OSError as e:
            raise DataError(f"Cannot write manifest '{path}': {e}") from e

    def read_manifest(self, path: str, resolve: bool = True) -> List[ManifestRecord]:
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise DataError(f"Cannot read manifest '{path}': {e}") from e
        root = os.path.dirname(os.path.abspath(path))
        records = []
        for number, line in enumerate(lines, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != len(MANIFEST_FIELDS):
                raise DataError(f"'{path}' line {number}: expected {len(MANIFEST_FIELDS)} "
                                f"fields, got {len(fields)}")
            try:
                snr_db = float(fields[5])
            except ValueError:
                raise DataError(f"'{path}' line {number}: bad snr_db '{fields[5]}'") from None
            record = ManifestRecord(*fields[:5], snr_db=snr_db, condition=fields[6])
            records.append(record.resolve(root) if resolve else record)
        if not records:
            raise DataError(f"manifest '{path}' holds no examples")
        return records
