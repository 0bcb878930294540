"""Tuple-oriented stream data model shared by every other module.

A stream is an unbounded sequence of tuples; each tuple is a timestamped set
of attribute-value pairs produced by some source (a "thing", a replayed log,
or an upstream operator). Timestamps are integer milliseconds since the UTC
Unix epoch. Time buckets and window extents are half-open intervals
[start, end), which makes equal-width buckets an exact partition of the
timeline.

All types in this module are immutable after construction and safe to hand
between threads.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Union

# Epoch-millisecond timestamps are kept within signed 64-bit range so they
# stay interoperable with stores and wire formats that use a long.
MAX_MILLIS = 2**63 - 1

Value = Union[int, float, str]

# Reserved keys of the NDJSON wire encoding; every other key is an attribute.
RESERVED_KEYS = frozenset({"ts", "src"})


class TimeUnit(enum.Enum):
    """Time units accepted by the query language and the store."""

    SECONDS = "seconds"
    MINUTES = "minutes"
    HOURS = "hours"
    DAYS = "days"

    @property
    def millis(self) -> int:
        return _UNIT_MILLIS[self]


_UNIT_MILLIS = {
    TimeUnit.SECONDS: 1_000,
    TimeUnit.MINUTES: 60_000,
    TimeUnit.HOURS: 3_600_000,
    TimeUnit.DAYS: 86_400_000,
}


def to_millis(n: int, unit: TimeUnit) -> int:
    """Convert ``n`` units to milliseconds.

    Raises OverflowError if the product exceeds the representable timestamp
    range instead of silently wrapping.
    """
    if n < 0:
        raise ValueError(f"duration must be non-negative, got {n}")
    result = n * unit.millis
    if result > MAX_MILLIS:
        raise OverflowError(f"{n} {unit.value} exceeds the representable range")
    return result


def is_numeric_value(v: Value) -> bool:
    """True for values aggregation functions accept (int/float, not bool)."""
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Interval:
    """Half-open time interval [start, end) in epoch milliseconds."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError(f"interval start {self.start} exceeds end {self.end}")

    def contains(self, t: int) -> bool:
        return self.start <= t < self.end

    @property
    def length(self) -> int:
        return self.end - self.start

    def shifted(self, delta: int) -> "Interval":
        return Interval(self.start + delta, self.end + delta)


def bucket_of(t: int, bucket_width: int, origin: int) -> Interval:
    """Return the unique bucket [origin + k*w, origin + (k+1)*w) containing ``t``.

    Buckets of equal width and origin partition the timeline; a timestamp on
    a boundary belongs to the bucket it starts.
    """
    if bucket_width <= 0:
        raise ValueError(f"bucket width must be positive, got {bucket_width}")
    if t < origin:
        raise ValueError(f"timestamp {t} precedes bucket origin {origin}")
    k = (t - origin) // bucket_width
    start = origin + k * bucket_width
    return Interval(start, start + bucket_width)


@dataclass(frozen=True)
class StreamTuple:
    """One timestamped observation: source id plus attribute-value pairs.

    Attribute values are atomic (int, float, or str); attribute names are
    unique by construction (dict keys) and at least one attribute must be
    present. Attribute order is preserved and round-trips through the wire
    encoding.
    """

    timestamp: int
    attributes: dict[str, Value]
    source_id: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.timestamp, int) or isinstance(self.timestamp, bool):
            raise ValueError(f"timestamp must be an integer, got {self.timestamp!r}")
        if self.timestamp < 0 or self.timestamp > MAX_MILLIS:
            raise ValueError(f"timestamp out of range: {self.timestamp}")
        if not self.attributes:
            raise ValueError("tuple must carry at least one attribute")

    def value(self, attribute: str) -> Value | None:
        return self.attributes.get(attribute)


@dataclass(frozen=True)
class AggregateRow:
    """One group-by bucket of an aggregation: (bucket start, count, result).

    ``count`` is carried as a float on the wire contract; internally counts
    are integral. ``result`` is absent exactly when the bucket is empty.
    """

    bucket_start: int
    count: float
    result: float | None

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError(f"count must be non-negative, got {self.count}")
        if (self.result is None) != (self.count == 0):
            raise ValueError("result must be absent exactly when count is zero")


class TupleDecodeError(ValueError):
    """Raised for a line that is not a well-formed tuple encoding."""


def encode_tuple(t: StreamTuple) -> str:
    """Encode a tuple as one compact JSON object (no trailing newline).

    Reserved keys are exactly ``ts`` and ``src``; attribute order is
    preserved, so encoding is deterministic and round-trips byte-identically.
    """
    obj: dict[str, object] = {"ts": t.timestamp, "src": t.source_id}
    for name, v in t.attributes.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"non-finite value for attribute {name!r}")
        obj[name] = v
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def decode_tuple(line: str) -> StreamTuple:
    """Decode one NDJSON line into a StreamTuple.

    Raises TupleDecodeError for malformed JSON, missing/ill-typed reserved
    keys, non-atomic attribute values, or a tuple with no attributes.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TupleDecodeError(f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise TupleDecodeError("tuple line must be a JSON object")
    if "ts" not in obj:
        raise TupleDecodeError("missing reserved key 'ts'")
    ts = obj.pop("ts")
    src = obj.pop("src", "")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise TupleDecodeError(f"'ts' must be integer milliseconds, got {ts!r}")
    if not isinstance(src, str):
        raise TupleDecodeError(f"'src' must be a string, got {src!r}")
    attributes: dict[str, Value] = {}
    for name, v in obj.items():
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise TupleDecodeError(f"attribute {name!r} has non-atomic value {v!r}")
        if isinstance(v, float) and not math.isfinite(v):
            raise TupleDecodeError(f"attribute {name!r} is non-finite")
        attributes[name] = v
    if not attributes:
        raise TupleDecodeError("tuple carries no attributes")
    try:
        return StreamTuple(timestamp=ts, attributes=attributes, source_id=src)
    except ValueError as exc:
        raise TupleDecodeError(str(exc)) from None


def iter_tuple_lines(lines: Iterable[str]) -> Iterator[StreamTuple]:
    """Decode an iterable of NDJSON lines, skipping blank lines.

    Malformed lines raise; callers that want skip-with-diagnostics semantics
    (the log replayer) catch TupleDecodeError per line.
    """
    for line in lines:
        line = line.strip()
        if line:
            yield decode_tuple(line)
