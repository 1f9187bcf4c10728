"""サービス共通ユーティリティ"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from hdivflow.config import Config

logger = logging.getLogger(__name__)


def calculate_observed_order(error_coarse: float, error_fine: float, h_coarse: float, h_fine: float) -> Optional[float]:
    """2 つのメッシュ間の観測収束次数を計算

    Args:
        error_coarse: 粗いメッシュでの誤差
        error_fine: 細かいメッシュでの誤差
        h_coarse: 粗いメッシュのメッシュ幅
        h_fine: 細かいメッシュのメッシュ幅

    Returns:
        log(e_c/e_f) / log(h_c/h_f)、メッシュ幅が同じか誤差が正でない場合は None
    """
    if h_coarse <= 0.0 or h_fine <= 0.0 or math.isclose(h_coarse, h_fine, rel_tol=1e-12):
        logger.warning(f"メッシュ幅が同じため収束次数を定義できません: h={h_coarse:.6g}, {h_fine:.6g}")
        return None
    if not (error_coarse > 0.0 and error_fine > 0.0):
        return None
    return math.log(error_coarse / error_fine) / math.log(h_coarse / h_fine)


def calculate_observed_orders(rows: Sequence[Dict[str, Any]], key: str, h_key: str = "h") -> List[Optional[float]]:
    """表の連続する行の間の観測次数（先頭行は None）"""
    orders: List[Optional[float]] = [None]
    for coarse, fine in zip(rows[:-1], rows[1:]):
        orders.append(calculate_observed_order(coarse[key], fine[key], coarse[h_key], fine[h_key]))
    return orders


def calculate_loglog_slope(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """log-log 平面での最小二乗傾き（点が 2 つ未満なら None）"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = (x > 0.0) & (y > 0.0)
    if np.count_nonzero(mask) < 2 or np.unique(x[mask]).size < 2:
        return None
    slope, _ = np.polyfit(np.log(x[mask]), np.log(y[mask]), 1)
    return float(slope)


def check_order(observed: Optional[float], expected: float, tolerance: float) -> bool:
    """観測次数が expected − tolerance 以上なら合格

    期待帯より高い次数は超収束としてログに残すだけで不合格にはしない。
    """
    if observed is None or math.isnan(observed):
        return False
    if observed > expected + tolerance:
        logger.warning(f"観測次数 {observed:.3f} が期待値 {expected:g}±{tolerance:g} を上回っています（超収束）")
    return observed >= expected - tolerance


def format_order(order: Optional[float]) -> str:
    """収束次数を表示用にフォーマット"""
    if order is None or math.isnan(order):
        return "n/a"
    return f"{order:.3f}"


def worker_count(tasks: int) -> int:
    """並列実行のワーカー数（HDIVFLOW_THREADS が 0 または未設定なら 1）"""
    if Config.THREADS <= 0:
        return 1
    return max(1, min(Config.THREADS, tasks))


def parse_float_list(text: str) -> List[float]:
    """カンマ区切りの数値列を解析"""
    return [float(item) for item in text.replace(";", ",").split(",") if item.strip()]


def parse_text_list(text: str) -> List[str]:
    """カンマ区切りの文字列列を解析"""
    return [item.strip() for item in text.replace(";", ",").split(",") if item.strip()]
