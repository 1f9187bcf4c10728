import os
from dotenv import load_dotenv

# 環境変数を読み込み
load_dotenv()

class Config:
    """アプリケーション設定クラス"""
    
    # ログ設定
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    LOG_FILE = os.getenv("LOG_FILE", "hdivflow.log")
    CONSOLE_LOG = os.getenv("CONSOLE_LOG", "false").lower() == "true"
    
    # 並列実行設定（0 または未設定でシリアル実行）
    THREADS = int(os.getenv("HDIVFLOW_THREADS", "0") or "0")
    
    # 離散化の既定値
    DEFAULT_GAMMA = float(os.getenv("HDIVFLOW_DEFAULT_GAMMA", "1.5"))
    MAX_DEGREE = 4
    INTERPOLATION_DEGREE = int(os.getenv("HDIVFLOW_INTERPOLATION_DEGREE", "20"))
    
    # ソルバー設定
    NEWTON_MAX_ITERATIONS = int(os.getenv("HDIVFLOW_NEWTON_MAX_ITERATIONS", "25"))
    NEWTON_TOLERANCE = float(os.getenv("HDIVFLOW_NEWTON_TOLERANCE", "1e-6"))
    SOLVER_TOLERANCE = float(os.getenv("HDIVFLOW_SOLVER_TOLERANCE", "1e-10"))
    DIVERGENCE_TOLERANCE = float(os.getenv("HDIVFLOW_DIVERGENCE_TOLERANCE", "1e-9"))
    # 速度がほぼ 0 の場の丸め誤差に対する絶対下限
    DIVERGENCE_FLOOR = float(os.getenv("HDIVFLOW_DIVERGENCE_FLOOR", "1e-12"))
    ENERGY_SLACK = float(os.getenv("HDIVFLOW_ENERGY_SLACK", "1e-10"))
    
    # 診断設定
    SPECTRUM_GRID = int(os.getenv("HDIVFLOW_SPECTRUM_GRID", "256"))
    VORTICITY_LINES = int(os.getenv("HDIVFLOW_VORTICITY_LINES", "64"))
    LINE_SAMPLES = int(os.getenv("HDIVFLOW_LINE_SAMPLES", "1024"))
    
    # 出力設定
    DEFAULT_OUT_DIR = os.getenv("HDIVFLOW_OUT_DIR", "output")
    
    # キャッシュ設定
    MAX_CACHED_TABLES = int(os.getenv("HDIVFLOW_MAX_CACHED_TABLES", "64"))
