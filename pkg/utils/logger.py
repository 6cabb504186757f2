"""
日誌工具模組
提供統一的日誌記錄功能：模組記錄器、根記錄器，以及訓練報告專用的檔案記錄器。
"""

import logging
import os
import sys
from typing import Optional

# 詳細的日誌格式
DETAILED_LOG_FORMAT = (
    '%(asctime)s - %(name)s - [%(levelname)s] - '
    '[%(filename)s:%(lineno)d (%(funcName)s)] - %(message)s'
)
DEFAULT_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
# 訓練報告只有訊息本身，沒有時間戳記，確保同一 seed 的報告逐位元相同
REPORT_LOG_FORMAT = '%(message)s'
LOG_LEVEL_ENV = 'ENHANCER_LOG_LEVEL'


def resolve_level(level: Optional[str] = None) -> int:
    """將等級字串（或環境變數 ENHANCER_LOG_LEVEL）轉為 logging 等級。"""
    name = level or os.getenv(LOG_LEVEL_ENV) or 'INFO'
    return getattr(logging, name.upper(), logging.INFO)


def get_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """
    取得日誌記錄器，避免重複 handler，支援自訂等級。

    Args:
        name (str): 記錄器名稱。
        level (Optional[str]): 日誌等級 (DEBUG, INFO, WARNING, ERROR,
                                       CRITICAL)，預設讀取 ENHANCER_LOG_LEVEL。

    Returns:
        logging.Logger: 配置好的日誌記錄器。
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    log_level = resolve_level(level)
    logger.setLevel(log_level)
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    formatter = logging.Formatter(
        DETAILED_LOG_FORMAT,
        datefmt=DEFAULT_DATE_FORMAT)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)
    logger.propagate = False
    return logger


def setup_root_logger(level: Optional[str] = None) -> None:
    """
    設定根日誌記錄器，於 CLI 啟動時呼叫一次。
    已建立的模組記錄器也會同步調整等級。

    Args:
        level (Optional[str]): 日誌等級，預設讀取 ENHANCER_LOG_LEVEL。
    """
    log_level = resolve_level(level)
    logging.basicConfig(
        level=log_level,
        format=DETAILED_LOG_FORMAT,
        datefmt=DEFAULT_DATE_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)])
    for existing in logging.Logger.manager.loggerDict.values():
        if isinstance(existing, logging.Logger) and existing.handlers:
            existing.setLevel(log_level)
            for handler in existing.handlers:
                handler.setLevel(log_level)


def get_report_logger(path: str) -> logging.Logger:
    """
    取得寫入訓練報告檔的記錄器，每行一筆 key=value 紀錄。
    同一路徑重複呼叫時會先關閉舊 handler 並以覆寫模式重新開檔。

    Args:
        path (str): 報告檔路徑。

    Returns:
        logging.Logger: 僅輸出訊息本身的檔案記錄器。
    """
    logger = logging.getLogger(f"report:{os.path.abspath(path)}")
    close_report_logger(logger)
    logger.setLevel(logging.INFO)
    file_handler = logging.FileHandler(path, mode='w', encoding='utf-8')
    file_handler.setFormatter(logging.Formatter(REPORT_LOG_FORMAT))
    logger.addHandler(file_handler)
    logger.propagate = False
    return logger


def close_report_logger(logger: logging.Logger) -> None:
    """關閉並移除報告記錄器上的所有 handler。"""
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
