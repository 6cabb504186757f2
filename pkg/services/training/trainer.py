"""
訓練模組
mini-batch 訓練迴圈、批次補齊、驗證指標（正規化 loss 與 SNR 改善量）。
"""
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from monitoring.health_check import ResourceMonitor
from services.datagen_service import TrainingExample
from services.model.frontend import EnhancementFrontend, loss, mask_factor
from services.numerics.tensor import Graph
from services.storage_service import StorageService
from services.training.optimizer import AdamState, adam_step
from utils.errors import ContractError, NumericalError
from utils.logger import close_report_logger, get_logger, get_report_logger

logger = get_logger(__name__)

ALL_CONDITIONS = "all"
REPORT_FILE = "train_report.log"
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


@dataclass
class Batch:
    """尾端補齊後的批次；frame_valid / context_valid 標記真實幀。"""
    noisy_feats: np.ndarray
    context_feats: np.ndarray
    irm: np.ndarray
    frame_valid: np.ndarray
    context_valid: np.ndarray

    @property
    def valid_bins(self) -> int:
        return int(self.frame_valid.sum()) * self.irm.shape[-1]


def _pad(arrays: Sequence[np.ndarray], dtype) -> Tuple[np.ndarray, np.ndarray]:
    longest = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), longest) + arrays[0].shape[1:], dtype=dtype)
    valid = np.zeros((len(arrays), longest), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
        valid[i, :a.shape[0]] = True
    return out, valid


def collate(examples: Sequence[TrainingExample], dtype=np.float32) -> Batch:
    """把不同長度的樣本在尾端補零組成批次。"""
    if not examples:
        raise ContractError("cannot collate an empty batch")
    noisy, frame_valid = _pad([e.noisy_feats for e in examples], dtype)
    context, context_valid = _pad([e.context_feats for e in examples], dtype)
    irm, _ = _pad([e.irm for e in examples], dtype)
    return Batch(noisy, context, irm, frame_valid, context_valid)


def batch_loss(model: EnhancementFrontend, batch: Batch):
    """批次 loss：補齊的幀不計入。"""
    context_valid = None if batch.context_valid.all() else batch.context_valid
    context = batch.context_feats if model.cfg.uses_context else None
    est = model.forward(batch.noisy_feats, context, context_valid)
    weights = None if batch.frame_valid.all() else batch.frame_valid[..., None]
    return loss(batch.irm, est, weights)


# --- 驗證指標 ---

def snr_improvement(clean_mel: np.ndarray, noise_mel: np.ndarray,
                    factor: np.ndarray) -> float:
    """
    Mel 功率域的 SNR 改善量：遮罩後的 clean / noise 功率比減去原始比值（dB）。
    noise 功率為零時無定義，回傳 nan。
    """
    clean_power = float(np.sum(clean_mel))
    noise_power = float(np.sum(noise_mel))
    if clean_power <= 0.0 or noise_power <= 0.0:
        return math.nan
    out_snr = 10.0 * math.log10(float(np.sum(factor * clean_mel)) / float(np.sum(factor * noise_mel)))
    in_snr = 10.0 * math.log10(clean_power / noise_power)
    return out_snr - in_snr


@dataclass
class ConditionMetrics:
    loss: float = 0.0
    snri_db: float = math.nan
    count: int = 0


def eval_metrics(model: Optional[EnhancementFrontend], examples: Sequence[TrainingExample],
                 alpha: Optional[float] = None, beta: Optional[float] = None,
                 identity_mask: bool = False) -> Dict[str, ConditionMetrics]:
    """
    逐條件計算平均正規化 loss（除以 T·128）與平均 SNR 改善量；另含 'all' 彙總。
    identity_mask=True 時以 M̂ ≡ 1 評估（未處理的基準）。
    """
    if model is None and not identity_mask:
        raise ContractError("eval_metrics needs a model unless identity_mask is set")
    if model is not None:
        alpha = model.cfg.alpha if alpha is None else alpha
        beta = model.cfg.beta if beta is None else beta
    alpha = 0.5 if alpha is None else alpha
    beta = 0.01 if beta is None else beta

    losses: Dict[str, List[float]] = {}
    snris: Dict[str, List[float]] = {}
    for example in examples:
        if identity_mask:
            est = np.ones_like(example.irm)
            value = float(np.sum(np.abs(example.irm - est) + (example.irm - est) ** 2))
        else:
            context = example.context_feats if model.cfg.uses_context else None
            est_tensor = model.forward(example.noisy_feats, context)
            value = loss(example.irm, est_tensor).item()
            est = est_tensor.data
        normalized = value / example.irm.size
        snri = snr_improvement(example.clean_mel, example.noise_mel, mask_factor(est, alpha, beta))
        for key in (example.condition, ALL_CONDITIONS):
            losses.setdefault(key, []).append(normalized)
            if math.isfinite(snri):
                snris.setdefault(key, []).append(snri)

    metrics: Dict[str, ConditionMetrics] = {}
    for key, values in losses.items():
        finite = snris.get(key, [])
        metrics[key] = ConditionMetrics(loss=float(np.mean(values)),
                                        snri_db=float(np.mean(finite)) if finite else math.nan,
                                        count=len(values))
    return metrics


# --- 訓練迴圈 ---

@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    val_loss: float
    val_snri_db: float

    def line(self) -> str:
        return (f"epoch={self.epoch} step={self.step} loss={self.loss:.6f} "
                f"val_loss={self.val_loss:.6f} val_snri_db={self.val_snri_db:.4f}")


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None

    def lines(self) -> List[str]:
        return [record.line() for record in self.epochs]

    def best(self) -> Optional[EpochRecord]:
        return min(self.epochs, key=lambda r: r.val_loss) if self.epochs else None


def split_examples(examples: Sequence, val_fraction: float, seed: int):
    """以 seed 決定的順序切出驗證集；至少保留一筆訓練樣本。"""
    order = np.random.default_rng(seed).permutation(len(examples))
    n_val = min(len(examples) - 1, int(round(len(examples) * val_fraction)))
    val = [examples[i] for i in sorted(order[:n_val])]
    train_set = [examples[i] for i in sorted(order[n_val:])]
    return train_set, val


def train(model: EnhancementFrontend, examples: Sequence[TrainingExample], epochs: int,
          batch_size: int, seed: int, lr: float = 1e-3, out_dir: Optional[str] = None,
          val_examples: Optional[Sequence[TrainingExample]] = None,
          state: Optional[AdamState] = None,
          storage: Optional[StorageService] = None) -> TrainReport:
    """
    以 Adam 訓練模型；同一 seed（固定的洗牌順序與初始化）產生相同報告。

    out_dir 不為 None 時：每個 epoch 寫出 epoch_NNN.ckpt、維持最佳驗證 loss 的 best.ckpt，
    結束時寫出 last.ckpt（epochs=0 時即為初始化參數），報告寫入 train_report.log。

    Raises:
        ContractError: 訓練集為空。
        NumericalError: loss 或梯度出現非有限值（訊息含步數）。
    """
    if not examples:
        raise ContractError("training set is empty")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    val_set = list(val_examples) if val_examples else list(examples)
    params = model.named_parameters()
    graph = Graph(params)
    state = state or AdamState.for_parameters(params, lr=lr)
    storage = storage or StorageService()
    rng = np.random.default_rng(seed)
    monitor = ResourceMonitor()
    report = TrainReport()

    report_logger = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report_logger = get_report_logger(os.path.join(out_dir, REPORT_FILE))

    best_val = math.inf
    step = state.t
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(examples))
            total, bins = 0.0, 0
            for start in range(0, len(order), batch_size):
                batch = collate([examples[i] for i in order[start:start + batch_size]], model.dtype)
                value = batch_loss(model, batch)
                step += 1
                if not math.isfinite(value.item()):
                    raise NumericalError(f"training diverged at step {step}: loss={value.item()}")
                grads = graph.backward(value)
                adam_step(params, grads, state)
                total += value.item()
                bins += batch.valid_bins

            metrics = eval_metrics(model, val_set)[ALL_CONDITIONS]
            record = EpochRecord(epoch, step, total / bins, metrics.loss, metrics.snri_db)
            report.epochs.append(record)
            logger.info(f"Epoch {epoch}/{epochs}: {record.line()}")
            monitor.log(f"epoch {epoch}")
            if report_logger is not None:
                report_logger.info(record.line())
                epoch_path = os.path.join(out_dir, f"epoch_{epoch:03d}.ckpt")
                storage.save_checkpoint(epoch_path, model, state)
                if record.val_loss < best_val:
                    best_val = record.val_loss
                    report.best_checkpoint = os.path.join(out_dir, BEST_CHECKPOINT)
                    storage.save_checkpoint(report.best_checkpoint, model, state)

        if out_dir is not None:
            report.checkpoint = os.path.join(out_dir, LAST_CHECKPOINT)
            storage.save_checkpoint(report.checkpoint, model, state)
    finally:
        if report_logger is not None:
            close_report_logger(report_logger)
    return report
