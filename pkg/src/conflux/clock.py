"""Time sources for operators, pipelines, and the load farm.

Every component that schedules work takes a clock so that correctness tests
run on virtual time (instantaneous and deterministic) while throughput tests
run on the wall clock.
"""

from __future__ import annotations

import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now_ms(self) -> int:
        """Current time in epoch milliseconds."""
        ...

    def sleep_ms(self, millis: float) -> None:
        """Block for the given duration (no-op on virtual clocks)."""
        ...


class SystemClock:
    """Wall clock reporting epoch milliseconds."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep_ms(self, millis: float) -> None:
        if millis > 0:
            time.sleep(millis / 1000.0)


class VirtualClock:
    """Manually advanced clock; time moves only when told to.

    Never moves backwards: ``set_ms`` to an earlier instant raises, which
    catches scheduling bugs in drivers early.
    """

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def sleep_ms(self, millis: float) -> None:
        # Virtual time does not pass while sleeping; drivers advance it.
        pass

    def advance_ms(self, millis: int) -> int:
        if millis < 0:
            raise ValueError("cannot advance a clock backwards")
        self._now += millis
        return self._now

    def set_ms(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"clock cannot move backwards: {t} < {self._now}")
        self._now = t
