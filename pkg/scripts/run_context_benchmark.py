#!/usr/bin/env python3
"""
context 效益基準測試
在身分辨識任務上訓練小型 E3 與同尺寸的無 context 模型（E0），比較驗證 loss 與 SNR 改善量。
每個 seed 需要 E3 的驗證 loss 至少低 20%，且 SNR 改善量至少高 3 dB；多數 seed 通過即為通過。
"""
import argparse
import sys
from dataclasses import dataclass
from typing import List, Optional

from services.audio.features import FeatureExtractor
from services.datagen_service import context_reveals_identity_task, generate_in_memory
from services.model.frontend import EnhancementFrontend, FrontendConfig
from services.training.trainer import ALL_CONDITIONS, eval_metrics, train
from utils.errors import EXIT_NUMERICAL, EXIT_OK
from utils.logger import get_logger, setup_root_logger

logger = get_logger(__name__)

LOSS_MARGIN = 0.8
SNRI_MARGIN_DB = 3.0


@dataclass
class SeedResult:
    seed: int
    context_loss: float
    no_context_loss: float
    context_snri_db: float
    no_context_snri_db: float

    @property
    def passed(self) -> bool:
        return (self.context_loss <= LOSS_MARGIN * self.no_context_loss
                and self.context_snri_db >= self.no_context_snri_db + SNRI_MARGIN_DB)

    def line(self) -> str:
        return (f"seed={self.seed} e3_val_loss={self.context_loss:.6f} "
                f"e0_val_loss={self.no_context_loss:.6f} e3_snri_db={self.context_snri_db:.3f} "
                f"e0_snri_db={self.no_context_snri_db:.3f} passed={self.passed}")


def benchmark_configs(d: int, seed: int):
    context_cfg = FrontendConfig(variant="E3", d=d, speech_layers=2, noise_layers=2,
                                 cross_layers=2, heads=4, seed=seed)
    no_context_cfg = FrontendConfig(variant="E0", d=d, speech_layers=4, heads=4, seed=seed)
    return context_cfg, no_context_cfg


def run_seed(seed: int, n_train: int = 32, n_val: int = 8, epochs: int = 15, d: int = 32,
             batch: int = 4, lr: float = 1e-3, context_seconds: float = 6.0,
             utterance_seconds: float = 1.0) -> SeedResult:
    """以單一 seed 執行一次比較。"""
    specs = context_reveals_identity_task(seed, n_train + n_val)
    examples = generate_in_memory(specs, context_seconds, utterance_seconds, FeatureExtractor())
    train_set, val_set = examples[:n_train], examples[n_train:]
    results = {}
    for cfg in benchmark_configs(d, seed):
        model = EnhancementFrontend(cfg)
        train(model, train_set, epochs, batch, seed, lr=lr, val_examples=val_set)
        results[cfg.variant] = eval_metrics(model, val_set)[ALL_CONDITIONS]
        logger.info(f"seed {seed} {cfg.variant}: val_loss={results[cfg.variant].loss:.6f} "
                    f"snri={results[cfg.variant].snri_db:.3f} dB")
    return SeedResult(seed, results["E3"].loss, results["E0"].loss,
                      results["E3"].snri_db, results["E0"].snri_db)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--seeds", default="1,2,3")
    parser.add_argument("--n-train", type=int, default=32)
    parser.add_argument("--n-val", type=int, default=8)
    parser.add_argument("--epochs", type=int, default=15)
    parser.add_argument("--d", type=int, default=32)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--utterance-seconds", type=float, default=1.0)
    args = parser.parse_args(argv)
    setup_root_logger()

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    outcomes = []
    for seed in seeds:
        result = run_seed(seed, args.n_train, args.n_val, args.epochs, args.d, args.batch,
                          args.lr, utterance_seconds=args.utterance_seconds)
        print(result.line(), flush=True)
        outcomes.append(result.passed)
    needed = len(seeds) // 2 + 1
    passed = sum(outcomes) >= needed
    print(f"passed_seeds={sum(outcomes)}/{len(seeds)} required={needed} "
          f"result={'PASS' if passed else 'FAIL'}", flush=True)
    return EXIT_OK if passed else EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
