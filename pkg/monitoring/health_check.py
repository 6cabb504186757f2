"""
資源監控模組
訓練期間記錄行程的記憶體與 CPU 使用量。
"""
import time
from typing import Any, Dict

import psutil

from utils.logger import get_logger

logger = get_logger(__name__)


class ResourceMonitor:
    """
    行程資源監控器。
    snapshot() 回傳 RSS、CPU 使用率與經過時間；log() 以 debug 以上層級寫入日誌。
    """

    def __init__(self) -> None:
        self.start_time: float = time.time()
        self.process = psutil.Process()
        # 第一次呼叫 cpu_percent 只建立基準點
        self.process.cpu_percent(interval=None)

    def snapshot(self) -> Dict[str, Any]:
        """
        取得目前資源使用狀況。
        Returns:
            Dict[str, Any]: rss_mb、cpu_percent、elapsed_s；失敗時為 error。
        """
        try:
            rss_mb: float = self.process.memory_info().rss / (1024 * 1024)
            cpu: float = self.process.cpu_percent(interval=None)
            return {
                "rss_mb": rss_mb,
                "cpu_percent": cpu,
                "elapsed_s": time.time() - self.start_time,
            }
        except psutil.Error as e:
            logger.exception("[ResourceMonitor] Error reading process info.")
            return {"error": f"Unable to read process info: {e}"}

    def log(self, label: str) -> Dict[str, Any]:
        info = self.snapshot()
        if "error" in info:
            return info
        logger.info("[ResourceMonitor] %s: rss=%.1fMB cpu=%.1f%% elapsed=%.1fs",
                    label, info["rss_mb"], info["cpu_percent"], info["elapsed_s"])
        return info
