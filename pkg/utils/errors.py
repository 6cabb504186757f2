"""
錯誤定義模組
集中定義專案例外類別與 CLI 結束代碼。
每個例外同時繼承對應的內建例外，呼叫端以 ValueError / OSError 捕捉仍然有效。
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class EnhancerError(Exception):
    """所有專案例外的基類。"""

    exit_code = EXIT_USAGE


class DimensionError(EnhancerError, ValueError):
    """張量形狀不相容。"""


class ContractError(EnhancerError, ValueError):
    """違反前置條件，例如非純量的 loss 或空的 context。"""


class ConfigurationError(EnhancerError, ValueError):
    """設定值無效，或模型變體與資料不相符。"""


class NumericalError(EnhancerError, ArithmeticError):
    """出現非有限值、訓練發散或梯度檢查失敗。"""

    exit_code = EXIT_NUMERICAL


class DataError(EnhancerError, OSError):
    """檔案讀寫失敗或檔案格式錯誤。"""

    exit_code = EXIT_IO


def exit_code_for(error: BaseException) -> int:
    """將例外對應到 CLI 結束代碼。"""
    if isinstance(error, EnhancerError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    if isinstance(error, ArithmeticError):
        return EXIT_NUMERICAL
    return EXIT_USAGE
