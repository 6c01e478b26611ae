"""Injectable time source.

Production code takes a ``Clock`` so tests and the bench harness can drive
liveness timeouts, key expiry, monitor schedules and retry loops with a fake
clock instead of real sleeps.
"""

from __future__ import annotations

import time


class Clock:
    """Real wall/monotonic time."""

    def now(self) -> float:
        """Seconds since the epoch."""
        return time.time()

    def now_ms(self) -> int:
        return int(self.now() * 1000)

    def monotonic_ms(self) -> float:
        return time.monotonic() * 1000.0

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def sleep_precise(self, seconds: float) -> None:
        """Sleep with microsecond-level accuracy (bulk sleep, then spin).

        Injected bench link delays can be fractions of a millisecond; plain
        ``time.sleep`` overshoots by the timer slack, which would distort
        sub-percent overhead targets.
        """
        if seconds <= 0:
            return
        deadline = time.perf_counter() + seconds
        bulk = seconds - 0.0008
        if bulk > 0:
            time.sleep(bulk)
        while time.perf_counter() < deadline:
            pass


class FakeClock(Clock):
    """Manually advanced clock; ``sleep`` consumes virtual time instantly."""

    def __init__(self, start: float = 1_700_000_000.0):
        self._t = start

    def now(self) -> float:
        return self._t

    def monotonic_ms(self) -> float:
        return self._t * 1000.0

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._t += seconds

    def sleep_precise(self, seconds: float) -> None:
        self.sleep(seconds)

    def advance(self, seconds: float) -> None:
        self._t += seconds


SYSTEM_CLOCK = Clock()
