"""
指令路由器模組
解析命令列、載入並驗證設定，再將子指令分派給對應的處理器；例外在這裡轉成結束代碼。
"""
import argparse
from typing import Dict, List, Optional

from config.settings import VARIANTS, load_config, parse_assignments
from handlers.command_handlers import (ALL_VARIANTS, DatasetLoader, EnhanceHandler,
                                       EvalHandler, GenDataHandler, GradCheckHandler,
                                       ParamCountHandler, TrainHandler)
from utils.errors import EXIT_OK, ConfigurationError, EnhancerError, exit_code_for
from utils.logger import get_logger

logger = get_logger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """用法錯誤改為拋出 ConfigurationError，讓結束代碼統一為 1。"""

    def error(self, message: str):
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="enhancer",
        description="Noise-context speech enhancement frontend (feature domain).")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", help="random seed")
    common.add_argument("--variant", choices=VARIANTS, help="model variant")
    common.add_argument("--set", dest="assignments", action="append", default=[],
                        metavar="KEY=VALUE", help="override any setting (repeatable)")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    sub.required = True

    gen = sub.add_parser("gen-data", parents=[common], help="synthesize a dataset")
    gen.add_argument("--out-dir", dest="out_dir")
    gen.add_argument("--n", dest="n_examples", help="examples per condition")
    gen.add_argument("--snrs", help="comma list of SNRs in dB, 'clean' or 'random'")
    gen.add_argument("--task", help="mixed or identity")
    gen.add_argument("--workers")

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--manifest")
    tr.add_argument("--out-dir", dest="out_dir")
    tr.add_argument("--epochs")
    tr.add_argument("--lr")
    tr.add_argument("--batch")

    en = sub.add_parser("enhance", parents=[common], help="enhance one utterance")
    en.add_argument("--checkpoint", required=True)
    en.add_argument("--noisy", required=True, help="noisy utterance WAV")
    en.add_argument("--context", help="noise-only context WAV")
    en.add_argument("--out", required=True, help="enhanced log-Mel dump path")

    ev = sub.add_parser("eval", parents=[common], help="evaluate per condition")
    ev.add_argument("--checkpoint")
    ev.add_argument("--manifest")
    ev.add_argument("--identity-mask", action="store_true",
                    help="evaluate only the unprocessed baseline (mask = 1)")
    ev.add_argument("--reference", help="second checkpoint to compare against")

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference check")
    gc.add_argument("--all-variants", action="store_true")

    pc = sub.add_parser("param-count", parents=[common], help="count trainable parameters")
    pc.add_argument("--all-variants", action="store_true")
    return parser


# 命令列旗標與 RunConfig 欄位的對應
_FLAG_FIELDS = ("seed", "variant", "out_dir", "n_examples", "snrs", "task", "workers",
                "manifest", "epochs", "lr", "batch", "checkpoint")


class Router:
    """
    一個路由器，根據子指令將工作分派給不同的處理器。
    """

    def __init__(self, services: Dict):
        storage = services["storage"]
        extractor = services["extractor"]
        loader = DatasetLoader(storage, extractor)
        self.gen_data_handler = GenDataHandler()
        self.train_handler = TrainHandler(storage, loader)
        self.enhance_handler = EnhanceHandler(storage, extractor)
        self.eval_handler = EvalHandler(storage, loader)
        self.grad_check_handler = GradCheckHandler()
        self.param_count_handler = ParamCountHandler()
        self.parser = build_parser()

    def _config(self, args: argparse.Namespace):
        overrides = parse_assignments(args.assignments)
        for name in _FLAG_FIELDS:
            value = getattr(args, name, None)
            if value is not None:
                overrides[name] = str(value)
        return load_config(args.config, overrides)

    def dispatch(self, args: argparse.Namespace) -> None:
        cfg = self._config(args)
        command = args.command
        logger.info(f"Running '{command}' (variant={cfg.variant}, seed={cfg.seed})")
        if command == "gen-data":
            self.gen_data_handler.handle(cfg, cfg.out_dir)
        elif command == "train":
            self.train_handler.handle(cfg)
        elif command == "enhance":
            self.enhance_handler.handle(args.checkpoint, args.noisy, args.out, args.context)
        elif command == "eval":
            self.eval_handler.handle(cfg, cfg.checkpoint, args.identity_mask, args.reference)
        elif command == "grad-check":
            variants = ALL_VARIANTS if args.all_variants else (cfg.variant,)
            self.grad_check_handler.handle(cfg, variants)
        elif command == "param-count":
            variants = ALL_VARIANTS if args.all_variants else (cfg.variant,)
            self.param_count_handler.handle(cfg, variants)
        else:
            raise ConfigurationError(f"unknown command '{command}'")

    def route(self, argv: Optional[List[str]] = None) -> int:
        """
        執行一個子指令並回傳結束代碼：0 成功、1 用法／設定錯誤、2 數值檢查失敗、3 I/O 錯誤。
        """
        try:
            args = self.parser.parse_args(argv)
            self.dispatch(args)
            return EXIT_OK
        except (EnhancerError, OSError, ArithmeticError) as e:
            code = exit_code_for(e)
            logger.error(f"{type(e).__name__}: {e}")
            logger.debug("Command failed", exc_info=True)
            return code
