"""
性能优化模块

提供阶段计时、统计监控、光流场缓存以及按片段并行的有界线程池
"""

import time
import threading
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Any, Optional, Callable, List, Iterable, Tuple, TypeVar
from collections import defaultdict, deque, OrderedDict
from functools import wraps

import numpy as np
import psutil

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


class PerformanceTimer:
    """阶段计时器，可选地把耗时记入监控器"""

    def __init__(self, name: str = "", slow_threshold: float = 5.0,
                 monitor: Optional['PerformanceMonitor'] = None):
        """
        Args:
            name: 计时项名称，如 "clip0003:mgp"
            slow_threshold: 超过该秒数记录警告
            monitor: 退出时记录耗时的监控器
        """
        self.name = name
        self.slow_threshold = slow_threshold
        self.monitor = monitor
        self._started: Optional[float] = None
        self._elapsed: Optional[float] = None

    def __enter__(self) -> 'PerformanceTimer':
        self._started = time.perf_counter()
        self._elapsed = None
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self._elapsed = time.perf_counter() - self._started
        elapsed = self._elapsed

        if exc_type is not None:
            logger.debug(f"{self.name} 在 {elapsed:.3f}秒 后异常退出")
        elif elapsed > self.slow_threshold:
            logger.warning(f"⚠️ {self.name} 较慢: {elapsed:.3f}秒 (阈值 {self.slow_threshold}秒)")
        elif elapsed > 0.1:
            logger.info(f"⏱️ {self.name}: {elapsed:.3f}秒")
        else:
            logger.debug(f"{self.name}: {elapsed:.3f}秒")

        if self.monitor is not None:
            self.monitor.record_metric(self.name, elapsed)

    def get_duration(self) -> float:
        """已完成计时的耗时（秒），未完成时为 0"""
        return self._elapsed if self._elapsed is not None else 0.0


class PerformanceCache:
    """LRU + TTL 缓存，线程安全；光流场按 (帧, 方向) 缓存"""

    def __init__(self, max_size: int = 64, ttl: float = 300):
        if max_size < 1:
            raise ValueError(f"缓存容量必须为正: {max_size}")
        self.max_size = max_size
        self.ttl = ttl
        # key -> (value, 最近访问时刻)
        self._entries: "OrderedDict[Any, Tuple[Any, float]]" = OrderedDict()
        self._hits = 0
        self._misses = 0
        self._lock = threading.RLock()

    def get(self, key: Any) -> Optional[Any]:
        """命中返回缓存值；不存在或已过期返回 None"""
        now = time.monotonic()
        with self._lock:
            entry = self._entries.get(key)
            if entry is None or now - entry[1] > self.ttl:
                self._entries.pop(key, None)
                self._misses += 1
                return None
            self._entries[key] = (entry[0], now)
            self._entries.move_to_end(key)
            self._hits += 1
            return entry[0]

    def set(self, key: Any, value: Any) -> None:
        with self._lock:
            self._entries.pop(key, None)
            while len(self._entries) >= self.max_size:
                evicted, _ = self._entries.popitem(last=False)
                logger.debug(f"缓存淘汰: {evicted!r}")
            self._entries[key] = (value, time.monotonic())

    def get_or_load(self, key: Any, loader: Callable[[], T]) -> T:
        """
        命中则返回缓存值，否则调用 loader 并缓存结果

        loader 返回 None 时不缓存
        """
        value = self.get(key)
        if value is None:
            value = loader()
            if value is not None:
                self.set(key, value)
        return value

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def get_stats(self) -> Dict[str, Any]:
        """命中率等统计"""
        with self._lock:
            lookups = self._hits + self._misses
            return {
                'size': len(self._entries),
                'max_size': self.max_size,
                'hits': self._hits,
                'misses': self._misses,
                'hit_rate': self._hits / lookups if lookups else 0.0,
                'ttl': self.ttl
            }


class PerformanceMonitor:
    """按名称汇总耗时样本，每个名称保留最近 max_samples 个"""

    def __init__(self, max_samples: int = 1000):
        self.max_samples = max_samples
        self._samples: Dict[str, deque] = defaultdict(lambda: deque(maxlen=self.max_samples))
        self._lock = threading.RLock()

    def record_metric(self, name: str, value: float) -> None:
        with self._lock:
            self._samples[name].append(float(value))

    def get_statistics(self, name: str) -> Dict[str, float]:
        """
        单个指标的统计量

        Returns:
            Dict[str, float]: count / total / mean / median / min / max / p95；无样本时为空
        """
        with self._lock:
            values = np.array(self._samples.get(name, ()), dtype=np.float64)
        if values.size == 0:
            return {}
        return {
            'count': int(values.size),
            'total': float(values.sum()),
            'mean': float(values.mean()),
            'median': float(np.median(values)),
            'min': float(values.min()),
            'max': float(values.max()),
            'p95': float(np.percentile(values, 95, method='higher')),
        }

    def get_all_metrics(self) -> Dict[str, Dict[str, float]]:
        """按记录顺序返回全部指标的统计量"""
        with self._lock:
            names = list(self._samples)
        return {name: self.get_statistics(name) for name in names}


def performance_monitor(metric_name: Optional[str] = None,
                        monitor: Optional[PerformanceMonitor] = None):
    """把函数调用包在 PerformanceTimer 中的装饰器"""
    def decorator(func: Callable) -> Callable:
        name = metric_name or f"{func.__module__}.{func.__qualname__}"

        @wraps(func)
        def timed(*args, **kwargs):
            with PerformanceTimer(name, monitor=monitor):
                return func(*args, **kwargs)
        return timed
    return decorator


class ParallelExecutor:
    """有界线程池，map 结果保持输入顺序"""

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError(f"工作线程数必须为正: {workers}")
        self.workers = workers

    def map(self, func: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """
        对每个输入调用 func

        Args:
            func: 纯函数
            items: 输入序列

        Returns:
            List[R]: 与输入顺序一致的结果；任一任务异常时原样抛出
        """
        items = list(items)
        if self.workers == 1 or len(items) <= 1:
            return [func(item) for item in items]

        with ThreadPoolExecutor(max_workers=min(self.workers, len(items)),
                                thread_name_prefix="tubekit") as pool:
            return list(pool.map(func, items))


def memory_usage_mb() -> Dict[str, float]:
    """当前进程内存占用 (MB)，峰值在支持的平台上读取"""
    info = psutil.Process().memory_info()
    usage = {'rss_mb': info.rss / (1024 * 1024)}
    peak = getattr(info, 'peak_wset', None)
    if peak is None:
        try:
            import resource
            # Linux 上 ru_maxrss 单位为 KB
            peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
        except (ImportError, AttributeError):
            peak = info.rss
    usage['peak_rss_mb'] = peak / (1024 * 1024)
    return usage
