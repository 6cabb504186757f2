# app.py

"""
主應用程式模組
整合所有服務和處理器，並作為命令列的統一入口點：

    python app.py gen-data --config run.env --seed 1
    python app.py train --manifest data/manifest.tsv --variant E3
    python app.py enhance --checkpoint runs/best.ckpt --context ctx.wav --noisy in.wav --out out.lmel
    python app.py eval --checkpoint runs/best.ckpt --manifest data/manifest.tsv
    python app.py grad-check --all-variants
    python app.py param-count --variant E0

日誌等級由環境變數 ENHANCER_LOG_LEVEL 控制。
"""

import sys
from typing import List, Optional

from handlers.router import Router
from services.audio.features import FeatureExtractor
from services.storage_service import StorageService
from utils.logger import get_logger, setup_root_logger

logger = get_logger(__name__)


class EnhancerApp:
    """命令列應用程式類別"""

    def __init__(self):
        services = self._initialize_services()
        logger.debug("All services initialized.")
        self.router = Router(services)

    def _initialize_services(self) -> dict:
        return {
            "storage": StorageService(),
            "extractor": FeatureExtractor(),
        }

    def run(self, argv: Optional[List[str]] = None) -> int:
        return self.router.route(argv)


def main(argv: Optional[List[str]] = None) -> int:
    setup_root_logger()
    return EnhancerApp().run(argv)


if __name__ == "__main__":
    sys.exit(main())
