"""評価テーブルのキャッシュ機能モジュール"""

import logging
import threading
from collections import OrderedDict
from typing import Any, Callable, Hashable, Optional

from hdivflow.config import Config

logger = logging.getLogger(__name__)

class TableCache:
    """上限付きのメモリキャッシュクラス（古いものから破棄）"""
    
    def __init__(self, name: str, max_entries: int = 64):
        """
        キャッシュを初期化
        
        Args:
            name: ログ表示用の名前
            max_entries: 保持する最大エントリ数
        """
        self.name = name
        self.max_entries = max_entries
        self.cache: "OrderedDict[Hashable, Any]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self._lock = threading.RLock()
        logger.debug(f"キャッシュを初期化: {name} (上限: {max_entries}件)")
    
    def get(self, key: Hashable) -> Optional[Any]:
        """
        キャッシュから値を取得
        
        Args:
            key: キャッシュキー
            
        Returns:
            キャッシュされた値、または None
        """
        with self._lock:
            if key in self.cache:
                self.cache.move_to_end(key)
                self.hits += 1
                return self.cache[key]
            self.misses += 1
            return None
    
    def set(self, key: Hashable, value: Any) -> None:
        """キャッシュに値を保存"""
        with self._lock:
            self.cache[key] = value
            self.cache.move_to_end(key)
            if len(self.cache) > self.max_entries:
                self.cache.popitem(last=False)
    
    def get_or_build(self, key: Hashable, builder: Callable[[], Any]) -> Any:
        """
        キャッシュにあれば返し、なければ構築して保存する
        
        Args:
            key: キャッシュキー
            builder: 値を構築する関数
            
        Returns:
            キャッシュされた値
        """
        with self._lock:
            value = self.get(key)
            if value is None:
                logger.debug(f"{self.name}: キャッシュミス {key}")
                value = builder()
                self.set(key, value)
            return value
    
    def discard(self, predicate: Callable[[Hashable], bool]) -> int:
        """条件に合うキーのエントリを削除"""
        with self._lock:
            keys = [key for key in self.cache if predicate(key)]
            for key in keys:
                del self.cache[key]
            return len(keys)
    
    def clear(self) -> None:
        """キャッシュをクリア"""
        with self._lock:
            self.cache.clear()
        logger.debug(f"{self.name}: キャッシュをクリア")
    
    def size(self) -> int:
        """キャッシュサイズを取得"""
        return len(self.cache)
    
    def cleanup(self, keep: Optional[int] = None) -> int:
        """
        上限を超えた古いエントリを削除
        
        Args:
            keep: 残すエントリ数（省略時は上限の半分）
        
        Returns:
            削除されたエントリ数
        """
        keep = self.max_entries // 2 if keep is None else keep
        removed = 0
        with self._lock:
            while len(self.cache) > keep:
                self.cache.popitem(last=False)
                removed += 1
        if removed:
            logger.debug(f"{self.name}: 古いエントリを削除: {removed}個")
        return removed

# グローバルキャッシュインスタンス
reference_cache = TableCache("reference", max_entries=Config.MAX_CACHED_TABLES)  # 求積則・参照基底
table_cache = TableCache("tables", max_entries=Config.MAX_CACHED_TABLES)  # 空間ごとの評価テーブル

def clear_all_caches():
    """すべてのキャッシュをクリア"""
    reference_cache.clear()
    table_cache.clear()
    logger.info("すべてのキャッシュをクリアしました")
