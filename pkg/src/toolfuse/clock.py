"""Wall and simulated clocks.

``RealClock`` reads ``time.perf_counter``; time passes on its own.
``SimClock`` only moves when told to, which makes seeded benchmark runs
bit-for-bit reproducible.
"""

from __future__ import annotations

import threading
import time


class RealClock:
    simulated = False

    def now(self) -> float:
        return time.perf_counter()

    def advance(self, seconds: float) -> None:
        """No-op: real time already elapsed while the work happened."""

    def set(self, t: float) -> None:
        pass


class SimClock:
    simulated = True

    def __init__(self, start: float = 0.0) -> None:
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._t

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._t += seconds

    def set(self, t: float) -> None:
        with self._lock:
            self._t = max(self._t, t)
