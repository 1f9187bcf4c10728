"""hdivflow のエラー定義

CLI の終了コードとの対応:
    ConfigError -> 2, OSError -> 3, SolverError -> 4
"""

from typing import List, Optional, Sequence


class HdivflowError(Exception):
    """hdivflow の基底例外"""


class ConfigError(HdivflowError, ValueError):
    """ケース設定・コマンド引数の誤り"""


class MeshError(HdivflowError, ValueError):
    """メッシュの構築・検証エラー"""


class MeshFormatError(MeshError):
    """メッシュファイルの書式エラー（行番号付き）"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{line}行目: {message}"
        super().__init__(message)


class PeriodicIdentificationError(MeshError):
    """周期境界の対応付けに失敗した"""

    def __init__(self, message: str, midpoint: Optional[Sequence[float]] = None):
        self.midpoint = None if midpoint is None else tuple(float(x) for x in midpoint)
        if self.midpoint is not None:
            message = f"{message} (中点: ({self.midpoint[0]:.6g}, {self.midpoint[1]:.6g}))"
        super().__init__(message)


class SolverError(HdivflowError, RuntimeError):
    """線形・非線形ソルバーのエラー"""


class NewtonConvergenceError(SolverError):
    """Newton 反復が規定回数内に収束しなかった"""

    def __init__(self, message: str, history: Optional[List[float]] = None):
        self.history = list(history or [])
        super().__init__(message)


class EnergyStabilityError(SolverError):
    """外力なしの問題で運動エネルギーが許容幅を超えて増加した"""

    def __init__(self, message: str, previous: float, current: float):
        self.previous = float(previous)
        self.current = float(current)
        super().__init__(message)
