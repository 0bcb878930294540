"""Windowed aggregation operators over fused historic and live data.

An operator fires on a processing-time schedule (every trigger period) and
aggregates by event time: window membership is decided by tuple timestamps,
never by arrival order. The watermark split divides each window into a
historic part, answered by one grouped store query, and a live part,
answered from the operator's in-memory buffer. Both parts reduce to
mergeable partials, so the fusion is a single merge + finalize.

Window strategies:

* sliding: [trigger - duration, trigger)
* landmark: [anchor - duration, trigger), anchor fixed at execution start

Tumbling windows are sliding windows with duration equal to the trigger
period; the planner normalizes them, so no third kind exists here.

Each operator instance is single-threaded: one loop drains its fetch
subscription, admits tuples to the buffer, fires due triggers and emits
results to its sink queue. Operators interact only through broker queues.
``step`` exposes one co-operative iteration of that loop for virtual-clock
drivers; ``run`` wraps it in a real-time wait loop.
"""

from __future__ import annotations

import json
import logging
import threading
from bisect import bisect_left, insort
from dataclasses import dataclass

from . import aggregates
from .broker import ClosedQueueError, Queue, Subscription
from .clock import Clock, SystemClock
from .model import Interval, StreamTuple, TimeUnit, is_numeric_value
from .query import AggregationFunction, Frequency, WindowKind, WindowSpec
from .store import Connection, HistoricQuery

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OperatorConfig:
    """Everything an operator needs beyond its wiring.

    ``allowed_lateness`` extends tuple admission below the next window's
    lower bound. ``live_retention`` declares how far back the live stream
    can answer when no historic source is attached; None means unbounded,
    so hybrid evaluation never reports an uncovered interval.
    """

    trigger: Frequency
    window: WindowSpec
    aggregation: AggregationFunction
    attribute: str
    allowed_lateness: int = 0
    live_retention: int | None = None

    def __post_init__(self) -> None:
        if not self.attribute:
            raise ValueError("attribute must be non-empty")
        if self.allowed_lateness < 0:
            raise ValueError(f"allowed_lateness must be >= 0, got {self.allowed_lateness}")
        if self.live_retention is not None and self.live_retention < 0:
            raise ValueError(f"live_retention must be >= 0, got {self.live_retention}")


class Watermark:
    """Boundary between history-served and live-served time; never moves back."""

    def __init__(self, split: int):
        self._split = split

    @property
    def split(self) -> int:
        return self._split

    def advance(self, split: int) -> None:
        if split < self._split:
            raise ValueError(f"watermark cannot move back from {self._split} to {split}")
        self._split = split

    def __repr__(self) -> str:
        return f"Watermark(split={self._split})"


@dataclass(frozen=True)
class WindowResult:
    trigger_time: int
    window: Interval
    count: int
    value: float | None
    history_count: int
    live_count: int

    def __post_init__(self) -> None:
        if self.count != self.history_count + self.live_count:
            raise ValueError("count must equal history_count + live_count")
        if (self.value is None) != (self.count == 0):
            raise ValueError("value must be absent exactly when count is zero")


class IncompleteWindowError(RuntimeError):
    """Raised when a window reaches further back than any attached source covers."""

    def __init__(self, uncovered: Interval):
        super().__init__(
            f"window part [{uncovered.start}, {uncovered.end}) is covered by no source"
        )
        self.uncovered = uncovered


def window_extent(spec: WindowSpec, trigger_time: int, anchor: int) -> Interval:
    """The event-time interval a trigger aggregates over."""
    if trigger_time < anchor:
        raise ValueError(f"trigger {trigger_time} precedes anchor {anchor}")
    if spec.kind is WindowKind.SLIDING:
        return Interval(trigger_time - spec.duration_ms, trigger_time)
    return Interval(anchor - spec.duration_ms, trigger_time)


def hybrid_evaluate(
    trigger_time: int,
    window: Interval,
    split: int,
    live_tuples: list[StreamTuple],
    historic: Connection | None,
    config: OperatorConfig,
) -> WindowResult:
    """Aggregate one window from historic rows plus buffered live tuples.

    With a historic connection, [window.start, split) is answered by a
    single-bucket store query and the buffer only serves [split, window.end).
    Without one the buffer serves the whole window, and a window reaching
    below split - live_retention raises IncompleteWindowError instead of
    silently undercounting. ``live_tuples`` must be sorted by timestamp.
    """
    partial = aggregates.empty(config.aggregation)
    history_count = 0
    if historic is not None and window.start < min(window.end, split):
        hist_end = min(window.end, split)
        span = hist_end - window.start
        group_by = max(1, -(-span // TimeUnit.SECONDS.millis))
        rows = historic.query_to_historic(
            HistoricQuery(
                function=config.aggregation,
                value=config.attribute,
                start=window.start,
                end=hist_end,
                group_by_number=group_by,
                group_by_unit=TimeUnit.SECONDS,
            )
        )
        for row in rows:
            partial = aggregates.merge(
                partial, aggregates.from_summary(config.aggregation, row.count, row.result)
            )
            history_count += int(row.count)
        live_start = max(window.start, split)
    else:
        if (
            historic is None
            and config.live_retention is not None
            and window.start < split - config.live_retention
        ):
            horizon = split - config.live_retention
            raise IncompleteWindowError(Interval(window.start, min(window.end, horizon)))
        live_start = window.start

    live_count = 0
    lo = bisect_left(live_tuples, live_start, key=lambda t: t.timestamp)
    hi = bisect_left(live_tuples, window.end, key=lambda t: t.timestamp)
    for i in range(lo, hi):
        v = live_tuples[i].attributes.get(config.attribute)
        if is_numeric_value(v):
            partial = aggregates.merge(partial, aggregates.single(config.aggregation, v))
            live_count += 1

    return WindowResult(
        trigger_time=trigger_time,
        window=window,
        count=history_count + live_count,
        value=partial.finalize(),
        history_count=history_count,
        live_count=live_count,
    )


# -- result wire formats ---------------------------------------------------

ERROR_KEY = "error"
INCOMPLETE_WINDOW = "incomplete_window"


def encode_result(r: WindowResult) -> str:
    """One NDJSON line per result; value is omitted for empty windows."""
    obj: dict[str, object] = {
        "trigger_ts": r.trigger_time,
        "win_start": r.window.start,
        "win_end": r.window.end,
        "count": r.count,
    }
    if r.value is not None:
        obj["value"] = r.value
    obj["hist_count"] = r.history_count
    obj["live_count"] = r.live_count
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def decode_result(line: str) -> WindowResult:
    obj = json.loads(line)
    return WindowResult(
        trigger_time=obj["trigger_ts"],
        window=Interval(obj["win_start"], obj["win_end"]),
        count=obj["count"],
        value=obj.get("value"),
        history_count=obj["hist_count"],
        live_count=obj["live_count"],
    )


def encode_error(trigger_time: int, uncovered: Interval) -> str:
    obj = {
        "trigger_ts": trigger_time,
        ERROR_KEY: INCOMPLETE_WINDOW,
        "uncovered_start": uncovered.start,
        "uncovered_end": uncovered.end,
    }
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def result_to_tuple(r: WindowResult, source_id: str) -> StreamTuple:
    """Results travel broker queues as ordinary tuples."""
    attrs: dict[str, object] = {
        "win_start": r.window.start,
        "win_end": r.window.end,
        "count": r.count,
        "hist_count": r.history_count,
        "live_count": r.live_count,
    }
    if r.value is not None:
        attrs["value"] = r.value
    return StreamTuple(timestamp=r.trigger_time, attributes=attrs, source_id=source_id)


def result_from_tuple(t: StreamTuple) -> WindowResult:
    return WindowResult(
        trigger_time=t.timestamp,
        window=Interval(t.attributes["win_start"], t.attributes["win_end"]),
        count=t.attributes["count"],
        value=t.attributes.get("value"),
        history_count=t.attributes["hist_count"],
        live_count=t.attributes["live_count"],
    )


def error_to_tuple(trigger_time: int, uncovered: Interval, source_id: str) -> StreamTuple:
    attrs = {
        ERROR_KEY: INCOMPLETE_WINDOW,
        "uncovered_start": uncovered.start,
        "uncovered_end": uncovered.end,
    }
    return StreamTuple(timestamp=trigger_time, attributes=attrs, source_id=source_id)


def is_error_tuple(t: StreamTuple) -> bool:
    return ERROR_KEY in t.attributes


# -- operator ---------------------------------------------------------------


@dataclass
class OperatorMetrics:
    tuples_in: int = 0
    results_emitted: int = 0
    late_dropped: int = 0
    non_numeric_skipped: int = 0
    incomplete_windows: int = 0
    max_trigger_lag_ms: int = 0
    buffered: int = 0


class Operator:
    """One scheduled aggregation stage between a fetch queue and a sink queue.

    ``split_ms`` fixes the watermark explicitly (e.g. at the end of the
    ingested history); by default it is the operator's start instant, so
    everything stored before launch is history and everything after is live.
    """

    def __init__(
        self,
        name: str,
        config: OperatorConfig,
        fetch: Subscription,
        sink: Queue,
        historic: Connection | None = None,
        clock: Clock | None = None,
        split_ms: int | None = None,
    ):
        self.name = name
        self.config = config
        self.fetch = fetch
        self.sink = sink
        self.historic = historic
        self.clock = clock if clock is not None else SystemClock()
        self._split_override = split_ms
        self.metrics = OperatorMetrics()
        self._buffer: list[StreamTuple] = []
        self._started = False
        self._stopped = False
        self.stop_reason: str | None = None
        self.anchor = 0
        self.watermark = Watermark(0)
        self._next_trigger = 0
        self._end: int | None = None

    # -- lifecycle --------------------------------------------------------

    def start(self, duration_ms: int | None = None) -> None:
        """Pin the anchor, watermark and first trigger to the current instant."""
        if self._started:
            raise RuntimeError(f"operator {self.name} already started")
        self._started = True
        self.anchor = self.clock.now_ms()
        split = self._split_override if self._split_override is not None else self.anchor
        self.watermark = Watermark(split)
        self._next_trigger = self.anchor + self.config.trigger.period_ms
        if duration_ms is not None:
            self._end = self.anchor + duration_ms
        logger.debug(
            "operator %s started at %d (split=%d, first trigger=%d)",
            self.name,
            self.anchor,
            split,
            self._next_trigger,
        )

    @property
    def started(self) -> bool:
        return self._started

    @property
    def next_trigger_ms(self) -> int:
        return self._next_trigger

    @property
    def end_ms(self) -> int | None:
        return self._end

    @property
    def finished(self) -> bool:
        """True once a bounded run has fired its last trigger or the operator stopped."""
        if self._stopped:
            return True
        return self._end is not None and self._started and self._next_trigger > self._end

    def stop(self, reason: str | None = None) -> None:
        self._stopped = True
        self.stop_reason = reason

    def close(self) -> None:
        """Release the fetch subscription and the historic connection."""
        self.stop(self.stop_reason)
        self.fetch.close()
        if self.historic is not None:
            self.historic.close()

    # -- buffer -----------------------------------------------------------

    def _admission_bound(self) -> int:
        """Lower timestamp bound for admission: next window's start minus lateness."""
        next_window = window_extent(self.config.window, self._next_trigger, self.anchor)
        return next_window.start - self.config.allowed_lateness

    def admit(self, t: StreamTuple) -> bool:
        """Buffer a tuple unless no reachable window can still use it."""
        self.metrics.tuples_in += 1
        if t.timestamp < self._admission_bound():
            self.metrics.late_dropped += 1
            return False
        v = t.attributes.get(self.config.attribute)
        if not is_numeric_value(v):
            self.metrics.non_numeric_skipped += 1
        insort(self._buffer, t, key=lambda x: x.timestamp)
        self.metrics.buffered = len(self._buffer)
        return True

    def _evict(self) -> None:
        bound = self._admission_bound()
        cut = bisect_left(self._buffer, bound, key=lambda t: t.timestamp)
        if cut:
            del self._buffer[:cut]
            self.metrics.buffered = len(self._buffer)

    # -- firing -----------------------------------------------------------

    def _fire(self, trigger_time: int) -> None:
        window = window_extent(self.config.window, trigger_time, self.anchor)
        try:
            result = hybrid_evaluate(
                trigger_time,
                window,
                self.watermark.split,
                self._buffer,
                self.historic,
                self.config,
            )
            out = result_to_tuple(result, self.name)
        except IncompleteWindowError as exc:
            self.metrics.incomplete_windows += 1
            out = error_to_tuple(trigger_time, exc.uncovered, self.name)
        try:
            self.sink.publish(out)
        except ClosedQueueError:
            self.stop(f"sink queue {self.sink.name!r} closed")
            logger.warning("operator %s stopped: %s", self.name, self.stop_reason)
            return
        self.metrics.results_emitted += 1
        lag = self.clock.now_ms() - trigger_time
        if lag > self.metrics.max_trigger_lag_ms:
            self.metrics.max_trigger_lag_ms = lag

    def step(self) -> int:
        """One co-operative iteration: drain, admit, fire everything due.

        Returns the number of tuples drained plus results emitted, so a
        driver can pump a stage chain until nothing moves.
        """
        if not self._started:
            raise RuntimeError(f"operator {self.name} not started")
        moved = 0
        if not self._stopped:
            for t in self.fetch.drain():
                self.admit(t)
                moved += 1
        now = self.clock.now_ms()
        while (
            not self._stopped
            and self._next_trigger <= now
            and (self._end is None or self._next_trigger <= self._end)
        ):
            self._fire(self._next_trigger)
            self._next_trigger += self.config.trigger.period_ms
            self._evict()
            moved += 1
        return moved

    def run(
        self,
        duration_ms: int | None = None,
        stop_event: threading.Event | None = None,
    ) -> None:
        """Real-time loop: wait for tuples or the next trigger, whichever is first."""
        if not self._started:
            self.start(duration_ms)
        while not self._stopped:
            if self._end is not None and self._next_trigger > self._end:
                break
            if stop_event is not None and stop_event.is_set():
                break
            now = self.clock.now_ms()
            wait_ms = self._next_trigger - now
            if wait_ms > 0:
                # Cap the wait so stop_event stays responsive.
                t = self.fetch.receive(timeout=min(wait_ms / 1000.0, 0.2))
                if t is not None:
                    self.admit(t)
                    for extra in self.fetch.drain():
                        self.admit(extra)
                continue
            self.step()
