"""
Process resource snapshots for long-running training commands
"""

import logging
from datetime import datetime
from typing import Dict, List

import psutil

logger = logging.getLogger(__name__)


class ResourceMonitor:
    def __init__(self):
        self.process = psutil.Process()
        self.history: List[Dict] = []
        # first call primes the counter and always reports 0.0
        self.process.cpu_percent()

    def snapshot(self, label: str = "") -> Dict:
        """Collect RSS, CPU and thread count of the current process"""
        memory = self.process.memory_info()
        metrics = {
            'timestamp': datetime.now().isoformat(),
            'label': label,
            'cpu_percent': self.process.cpu_percent(),
            'memory_mb': memory.rss / (1024 ** 2),
            'memory_percent': self.process.memory_percent(),
            'threads': self.process.num_threads(),
        }
        self.history.append(metrics)
        return metrics

    def log_snapshot(self, label: str = "") -> Dict:
        metrics = self.snapshot(label)
        logger.info(
            f"Resources [{label}]: rss={metrics['memory_mb']:.1f}MB "
            f"cpu={metrics['cpu_percent']:.1f}% threads={metrics['threads']}"
        )
        return metrics

    def peak_memory_mb(self) -> float:
        return max((m['memory_mb'] for m in self.history), default=0.0)
