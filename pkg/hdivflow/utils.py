"""アプリケーション共通ユーティリティ"""

import logging
from hdivflow.config import Config

def setup_logging(quiet: bool = False) -> None:
    """ログ設定を初期化

    Args:
        quiet: True の場合はターミナル出力を行わない
    """
    config = Config()
    
    handlers = [logging.FileHandler(config.LOG_FILE, encoding='utf-8')]
    
    # 環境変数でターミナル出力を制御
    if config.CONSOLE_LOG and not quiet:
        handlers.append(logging.StreamHandler())
    
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )
    
    # numpy/scipy の警告もログへ流す
    logging.captureWarnings(True)
    warnings_logger = logging.getLogger('py.warnings')
    warnings_logger.setLevel(logging.ERROR if quiet else logging.WARNING)

def get_logger(name: str) -> logging.Logger:
    """指定された名前のロガーを取得"""
    return logging.getLogger(name)

def cleanup_caches() -> None:
    """キャッシュのクリーンアップを実行"""
    from hdivflow.services.cache import reference_cache, table_cache
    
    # 上限を超えたエントリを削除
    reference_trimmed = reference_cache.cleanup()
    table_trimmed = table_cache.cleanup()
    
    logger = get_logger(__name__)
    if reference_trimmed > 0 or table_trimmed > 0:
        logger.info(f"キャッシュクリーンアップ完了: 参照要素{reference_trimmed}件, 評価テーブル{table_trimmed}件を削除")
