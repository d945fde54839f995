"""例外類別定義"""


class PtnnError(Exception):
    """所有 ptnn_toolkit 例外的基底類別"""


class VolumeMismatch(PtnnError):
    """reshape 前後的體積 (元素總數) 不一致"""


class ShapeMismatch(PtnnError):
    """輸入的形狀與預期不符"""


class RankTooLow(PtnnError):
    """張量的維度數不足 (d < 2)"""


class ConvergenceFailure(PtnnError):
    """SVD 求解器無法收斂"""


class UnfactorableVolume(PtnnError):
    """權重矩陣的體積為質數，無法張量化"""


class InconsistentTotals(PtnnError):
    """各層參數總和超過模型總參數量"""


class OracleFailure(PtnnError):
    """準確率評估失敗"""


class BadDimensions(PtnnError):
    """玩具模型的維度設定無效"""


class StoreError(PtnnError):
    """檔案格式相關錯誤的基底類別"""


class IoError(StoreError, OSError):
    """檔案讀寫失敗"""


class BadMagic(StoreError):
    """檔頭 magic bytes 不符"""


class UnsupportedVersion(StoreError):
    """不支援的檔案版本"""


class CorruptLength(StoreError):
    """檔案長度與內容描述不符 (截斷或多餘的位元組)"""
