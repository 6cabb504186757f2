"""
指令處理器模組
每個 CLI 子指令對應一個處理器；處理器只負責串接服務，錯誤往上拋給路由器轉成結束代碼。
"""
import os
from typing import Dict, List, Optional, Sequence

from config.settings import RunConfig
from services.audio.features import FeatureExtractor
from services.audio.wav_io import read_wav, write_feature_dump
from services.datagen_service import TrainingExample, generate_dataset, load_training_example
from services.model.frontend import (EnhancementFrontend, FrontendConfig, apply_mask,
                                     count_parameters)
from services.storage_service import StorageService
from services.training.grad_check import grad_check, make_grad_check_example
from services.training.trainer import (ALL_CONDITIONS, ConditionMetrics, eval_metrics,
                                       split_examples, train)
from utils.errors import ConfigurationError
from utils.logger import get_logger

logger = get_logger(__name__)

ALL_VARIANTS = ("E0", "E1", "E2", "E3")


def _emit(line: str) -> None:
    """指令結果輸出到 stdout（日誌另走 logger）。"""
    print(line, flush=True)


class DatasetLoader:
    """由 manifest 讀取樣本，特徵擷取器在所有樣本間共用。"""

    def __init__(self, storage: StorageService, extractor: FeatureExtractor):
        self.storage = storage
        self.extractor = extractor

    def load(self, manifest: Optional[str]) -> List[TrainingExample]:
        if not manifest:
            raise ConfigurationError("a dataset manifest is required (--manifest)")
        records = self.storage.read_manifest(manifest)
        logger.info(f"Loading {len(records)} examples from {manifest}")
        return [load_training_example(record, self.extractor) for record in records]


class GenDataHandler:
    def handle(self, cfg: RunConfig, out_dir: str) -> str:
        manifest = generate_dataset(cfg, out_dir)
        _emit(f"manifest={manifest}")
        return manifest


class TrainHandler:
    def __init__(self, storage: StorageService, loader: DatasetLoader):
        self.storage = storage
        self.loader = loader

    def handle(self, cfg: RunConfig) -> str:
        examples = self.loader.load(cfg.manifest)
        frontend_cfg = FrontendConfig.from_run_config(cfg)
        if frontend_cfg.uses_context:
            missing = [e.example_id for e in examples if e.context_feats.shape[0] == 0]
            if missing:
                raise ConfigurationError(
                    f"variant {cfg.variant} needs noise context, but {len(missing)} example(s) "
                    f"have none (first: {missing[0]})")
        elif any(e.context_feats.shape[0] for e in examples):
            logger.info("Variant E0 trains without context; dataset context is ignored")

        model = EnhancementFrontend(frontend_cfg)
        train_set, val_set = split_examples(examples, cfg.val_fraction, cfg.seed)
        report = train(model, train_set, cfg.epochs, cfg.batch, cfg.seed, lr=cfg.lr,
                       out_dir=cfg.out_dir, val_examples=val_set, storage=self.storage)
        for line in report.lines():
            _emit(line)
        _emit(f"checkpoint={report.checkpoint}")
        if report.best_checkpoint:
            _emit(f"best_checkpoint={report.best_checkpoint}")
        return report.checkpoint


class EnhanceHandler:
    def __init__(self, storage: StorageService, extractor: FeatureExtractor):
        self.storage = storage
        self.extractor = extractor

    def handle(self, checkpoint: str, noisy_wav: str, out: str,
               context_wav: Optional[str] = None) -> str:
        model, _ = self.storage.load_checkpoint(checkpoint)
        context_feats = None
        if model.cfg.uses_context:
            if not context_wav:
                raise ConfigurationError(
                    f"checkpoint variant {model.variant} needs a noise context (--context)")
            context_feats = self.extractor.log_mel(read_wav(context_wav))
        elif context_wav:
            logger.warning("Variant E0 ignores the supplied noise context")

        noisy = read_wav(noisy_wav)
        noisy_mel = self.extractor.mel_power(noisy)
        est = model.forward(self.extractor.log_mel(noisy), context_feats)
        enhanced = apply_mask(noisy_mel, est, model.cfg.alpha, model.cfg.beta,
                              self.extractor.mel_floor)
        out_dir = os.path.dirname(os.path.abspath(out))
        os.makedirs(out_dir, exist_ok=True)
        write_feature_dump(out, enhanced)
        _emit(f"enhanced={out} frames={enhanced.num_frames}")
        return out


def _format_metrics(label: str, metrics: Dict[str, ConditionMetrics]) -> List[str]:
    lines = []
    for condition in sorted(metrics, key=lambda c: (c == ALL_CONDITIONS, c)):
        m = metrics[condition]
        lines.append(f"model={label} condition={condition} n={m.count} "
                     f"loss={m.loss:.6f} snri_db={m.snri_db:.4f}")
    return lines


class EvalHandler:
    def __init__(self, storage: StorageService, loader: DatasetLoader):
        self.storage = storage
        self.loader = loader

    def handle(self, cfg: RunConfig, checkpoint: Optional[str], identity_mask: bool = False,
               reference: Optional[str] = None) -> Dict[str, Dict[str, ConditionMetrics]]:
        examples = self.loader.load(cfg.manifest)
        results: Dict[str, Dict[str, ConditionMetrics]] = {
            "baseline": eval_metrics(None, examples, cfg.alpha, cfg.beta, identity_mask=True)}
        if not identity_mask:
            if not checkpoint:
                raise ConfigurationError("eval needs --checkpoint unless --identity-mask is set")
            model, _ = self.storage.load_checkpoint(checkpoint)
            self._check_context(model, examples)
            results[model.variant] = eval_metrics(model, examples)
            if reference:
                ref_model, _ = self.storage.load_checkpoint(reference)
                self._check_context(ref_model, examples)
                results[f"reference:{ref_model.variant}"] = eval_metrics(ref_model, examples)

        for label, metrics in results.items():
            for line in _format_metrics(label, metrics):
                _emit(line)
        if reference and not identity_mask:
            model_label = next(k for k in results if k not in ("baseline",)
                               and not k.startswith("reference:"))
            ref_label = next(k for k in results if k.startswith("reference:"))
            for condition, m in sorted(results[model_label].items()):
                delta = m.snri_db - results[ref_label][condition].snri_db
                _emit(f"delta={model_label}-{ref_label[len('reference:'):]} "
                      f"condition={condition} snri_db={delta:.4f}")
        return results

    @staticmethod
    def _check_context(model: EnhancementFrontend, examples: Sequence[TrainingExample]) -> None:
        if model.cfg.uses_context and any(e.context_feats.shape[0] == 0 for e in examples):
            raise ConfigurationError(
                f"variant {model.variant} needs noise context, but the dataset has none")


class GradCheckHandler:
    def handle(self, cfg: RunConfig, variants: Sequence[str]) -> bool:
        example = make_grad_check_example(cfg.grad_frames, cfg.grad_context_frames,
                                          seed=cfg.seed)
        reports = {}
        for variant in variants:
            tiny = FrontendConfig.tiny(variant, d=cfg.d or 8, layers=cfg.layers or 1,
                                       seed=cfg.seed)
            report = grad_check(EnhancementFrontend(tiny), example, cfg.grad_tolerance,
                                cfg.grad_samples, seed=cfg.seed)
            reports[variant] = report
            status = "ok" if report.passed else "FAILED"
            _emit(f"variant={variant} tensors={len(report.max_errors)} "
                  f"max_rel_error={report.max_error:.3e} status={status}")
        for report in reports.values():
            report.raise_for_failures()
        return True


class ParamCountHandler:
    def handle(self, cfg: RunConfig, variants: Sequence[str]) -> Dict[str, int]:
        counts = {}
        for variant in variants:
            run = RunConfig(**{**cfg.to_dict(), "variant": variant})
            frontend_cfg = FrontendConfig.from_run_config(run)
            counts[variant] = count_parameters(frontend_cfg)
            _emit(f"variant={variant} d={frontend_cfg.d} parameters={counts[variant]} "
                  f"({counts[variant] / 1e6:.2f}M)")
        return counts

