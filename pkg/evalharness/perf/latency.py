"""
Wall-clock accounting for pipeline stages.
"""

import sys
import threading
import time
from contextlib import contextmanager
from typing import Dict


class StageTimer:
    """Accumulates wall-clock seconds per named stage; safe to share across threads."""

    def __init__(self):
        self._totals: Dict[str, float] = {}
        self._counts: Dict[str, int] = {}
        self._lock = threading.Lock()

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                self._totals[name] = self._totals.get(name, 0.0) + elapsed
                self._counts[name] = self._counts.get(name, 0) + 1

    def totals(self) -> Dict[str, float]:
        with self._lock:
            return dict(sorted(self._totals.items()))

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        """Stage -> {"seconds", "calls"}, seconds rounded to milliseconds."""
        with self._lock:
            return {
                name: {"seconds": round(self._totals[name], 3), "calls": self._counts[name]}
                for name in sorted(self._totals)
            }

    def print_summary(self, stream=None):
        out = stream or sys.stderr
        print("\n" + "=" * 50, file=out)
        print("Stage timings", file=out)
        print("=" * 50, file=out)
        for name, total in self.totals().items():
            print(f"  {name:<16} {total * 1000:>10.1f} ms  ({self._counts[name]} calls)", file=out)
        print("=" * 50, file=out)
