import time


class SystemClock:
    """Wall clock in Unix epoch milliseconds."""

    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000


class ManualClock:
    """Clock advanced explicitly; used by the simulator and the tests."""

    def __init__(self, start_ms: int = 1_700_000_000_000):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot run backwards")
        self._now += ms
        return self._now

    def set(self, ms: int) -> None:
        self._now = ms


class SkewedClock:
    """View of another clock shifted by a fixed offset."""

    def __init__(self, base, skew_ms: int = 0):
        self.base = base
        self.skew_ms = skew_ms

    def now_ms(self) -> int:
        return self.base.now_ms() + self.skew_ms
