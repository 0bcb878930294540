"""Hybrid stream/history aggregation over an in-process broker.

Continuous queries fire on a schedule, aggregate sliding or landmark
windows by event time, and answer each window by fusing pre-stored series
history with the live tuple stream through mergeable partial aggregates.
"""

from .model import AggregateRow, Interval, StreamTuple, TimeUnit
from .query import (
    AggregationFunction,
    Catalog,
    Frequency,
    QueryError,
    QuerySpec,
    WindowKind,
    WindowSpec,
    parse_query,
    render_query,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateRow",
    "AggregationFunction",
    "Catalog",
    "Frequency",
    "Interval",
    "QueryError",
    "QuerySpec",
    "StreamTuple",
    "TimeUnit",
    "WindowKind",
    "WindowSpec",
    "parse_query",
    "render_query",
    "validate",
    "__version__",
]
