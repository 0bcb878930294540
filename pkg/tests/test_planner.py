import json
import random

import pytest

from conflux.broker import QueueConfig
from conflux.clock import VirtualClock
from conflux.model import StreamTuple
from conflux.planner import (
    FetchStage,
    OperatorStage,
    PipelineState,
    PlanError,
    launch,
    plan,
    plan_many,
    result_queue_name,
    run_virtual,
)
from conflux.query import AggregationFunction, Catalog, WindowKind, parse_query, render_query
from conflux.runtime import result_from_tuple
from conflux.store import HistoricStore, SeriesRef

from oracle import close, single_pass_window
from test_query import FASTEST_DOWNLOAD, NEUBOT_SPEED_MEAN

MIN = 60_000
STREAM_MAX = FASTEST_DOWNLOAD + " from streaming rabbitmq queue neubotspeed"
ATTRS = frozenset({"download_speed", "upload_speed"})


@pytest.fixture
def catalog():
    return Catalog(
        stream_queues=frozenset({"neubotspeed"}),
        series_attributes={
            ("influxdb", "neubot", "speedtest"): ATTRS,
            ("cassandra", "neubot", "speedtests"): ATTRS,
        },
    )


def _feed(n, period_ms, start=0, seed=0, attr="download_speed"):
    rng = random.Random(seed)
    return [
        StreamTuple(
            timestamp=start + k * period_ms,
            attributes={attr: rng.uniform(1, 99)},
            source_id=f"t{k}",
        )
        for k in range(n)
    ]


def test_plan_shape_for_hybrid_query(catalog):
    spec = parse_query(NEUBOT_SPEED_MEAN)
    p = plan(spec, catalog)
    fetch, op = p.stages
    assert isinstance(fetch, FetchStage)
    assert fetch.source_queue == "neubotspeed"
    assert fetch.output_queues == (f"in.{p.id}.0",)
    assert isinstance(op, OperatorStage)
    assert op.input_queue == f"in.{p.id}.0"
    assert op.sink_queue == result_queue_name(spec)
    assert op.config.aggregation is AggregationFunction.MEAN
    assert op.config.attribute == "download_speed"
    assert op.config.trigger.period_ms == 20_000
    assert op.config.window.duration_ms == 10 * MIN
    assert op.historic == SeriesRef("influxdb", "neubot", "speedtest")
    assert {q.name for q in p.queues} == {op.input_queue, op.sink_queue}


def test_plan_id_and_result_queue_stable(catalog):
    spec = parse_query(NEUBOT_SPEED_MEAN)
    a, b = plan(spec, catalog), plan(spec, catalog)
    assert a.id == b.id and len(a.id) == 12
    assert result_queue_name(spec) == result_queue_name(parse_query(render_query(spec)))
    # A different query gets a different identity.
    other = parse_query(STREAM_MAX)
    assert plan(other, catalog).id != a.id


def test_plan_refuses_invalid_spec(catalog):
    spec = parse_query(STREAM_MAX.replace("neubotspeed", "nosuchqueue"))
    with pytest.raises(PlanError, match="nosuchqueue"):
        plan(spec, catalog)


def test_plan_many_fans_out_one_fetch(catalog):
    specs = [parse_query(NEUBOT_SPEED_MEAN), parse_query(STREAM_MAX)]
    p = plan_many(specs, catalog)
    fetch = p.stages[0]
    assert isinstance(fetch, FetchStage)
    assert fetch.output_queues == (f"in.{p.id}.0", f"in.{p.id}.1")
    assert len(p.operator_stages) == 2


def test_plan_many_requires_shared_stream(catalog):
    wide = Catalog(
        stream_queues=frozenset({"neubotspeed", "otherqueue"}),
        series_attributes=catalog.series_attributes,
    )
    specs = [
        parse_query(STREAM_MAX),
        parse_query(STREAM_MAX.replace("neubotspeed", "otherqueue")),
    ]
    with pytest.raises(PlanError, match="share a stream queue"):
        plan_many(specs, wide)


def test_historic_only_plan_has_no_fetch(catalog):
    text = (
        "EVERY 1 minutes compute the mean value of download_speed of the last 5 minutes "
        "FROM influxdb database neubot series speedtest"
    )
    p = plan(parse_query(text), catalog)
    assert p.source_queue is None
    assert all(isinstance(s, OperatorStage) for s in p.stages)


def test_plan_json_is_machine_readable(catalog):
    doc = json.loads(plan(parse_query(NEUBOT_SPEED_MEAN), catalog).to_json())
    assert doc["id"]
    assert [s["kind"] for s in doc["stages"]] == ["fetch", "operator"]
    assert doc["stages"][1]["window"] == {"kind": "sliding", "duration_ms": 10 * MIN}


# -- launched pipelines -----------------------------------------------------


def _launch_virtual(broker, catalog, text, store=None, duration_ms=None, start_ms=0):
    clock = VirtualClock(start_ms)
    p = plan(parse_query(text), catalog)
    pipe = launch(
        p, broker, store=store, clock=clock, duration_ms=duration_ms, threaded=False
    )
    return pipe, clock, p


def test_pipeline_matches_direct_evaluation(broker, catalog):
    feed = _feed(200, 3_000)
    pipe, clock, p = _launch_virtual(broker, catalog, STREAM_MAX, duration_ms=10 * MIN)
    assert pipe.state is PipelineState.RUNNING
    run_virtual(pipe, clock, feed=feed, end_ms=10 * MIN)
    results = broker.subscribe(p.stages[1].sink_queue)
    got = [result_from_tuple(t) for t in results.drain()]
    pipe.stop()
    assert len(got) == 5
    for r in got:
        count, want = single_pass_window(
            feed, AggregationFunction.MAX, "download_speed", r.window.start, r.window.end
        )
        assert r.count == count and close(r.value, want)


def test_pipeline_counts_conserve_at_quiescence(broker, catalog):
    feed = _feed(150, 2_000)
    pipe, clock, p = _launch_virtual(broker, catalog, STREAM_MAX, duration_ms=5 * MIN)
    run_virtual(pipe, clock, feed=feed, end_ms=5 * MIN)
    status = pipe.status()
    src = status.queues["neubotspeed"]
    assert src.published == 150
    assert src.delivered == 150 and src.in_memory == 0 and src.on_disk == 0
    for name, stats in status.queues.items():
        assert stats.published == stats.delivered + stats.in_memory + stats.on_disk, name
    fetch = status.stages[0]
    assert (fetch.tuples_in, fetch.tuples_out) == (150, 150)
    pipe.stop()


def test_hybrid_pipeline_reads_history(broker, catalog):
    store = HistoricStore(None)
    ref = SeriesRef("influxdb", "neubot", "speedtest")
    store.register_series(ref)
    history = _feed(60, 1_000, seed=5)
    store.ingest(ref, history)
    pipe, clock, p = _launch_virtual(
        broker, catalog, NEUBOT_SPEED_MEAN, store=store, duration_ms=40_000, start_ms=60_000
    )
    live = _feed(20, 1_000, start=60_000, seed=6)
    run_virtual(pipe, clock, feed=live, end_ms=100_000)
    got = [result_from_tuple(t) for t in broker.subscribe(p.stages[1].sink_queue).drain()]
    pipe.stop()
    store.close()
    assert len(got) == 2
    for r in got:
        count, want = single_pass_window(
            history + live,
            AggregationFunction.MEAN,
            "download_speed",
            r.window.start,
            r.window.end,
        )
        assert (r.count, r.history_count) == (count, 60)
        assert close(r.value, want)


def test_launch_rolls_back_on_missing_series(broker, catalog):
    store = HistoricStore(None)
    p = plan(parse_query(NEUBOT_SPEED_MEAN), catalog)
    pipe = launch(p, broker, store=store, clock=VirtualClock(0), threaded=False)
    assert pipe.state is PipelineState.FAILED
    assert "speedtest" in pipe.cause
    for q in p.queues:
        assert not broker.has_queue(q.name)
    store.close()


def test_second_pipeline_on_same_source_is_refused(broker, catalog):
    broker.declare_queue(QueueConfig("neubotspeed"))
    p = plan(parse_query(STREAM_MAX), catalog)
    first = launch(p, broker, clock=VirtualClock(0), threaded=False)
    assert first.state is PipelineState.RUNNING
    second = launch(p, broker, clock=VirtualClock(0), threaded=False)
    assert second.state is PipelineState.FAILED
    assert "consumer" in second.cause or "subscribe" in second.cause
    # The running pipeline kept its queues.
    assert broker.has_queue(p.stages[1].sink_queue)
    first.stop()


def test_stop_freezes_status(broker, catalog):
    pipe, clock, _ = _launch_virtual(broker, catalog, STREAM_MAX, duration_ms=4 * MIN)
    run_virtual(pipe, clock, feed=_feed(50, 4_000), end_ms=4 * MIN)
    status = pipe.stop()
    assert status.state is PipelineState.STOPPED
    after = pipe.status()
    assert after.stages == status.stages
    # Stopping twice is harmless.
    assert pipe.stop().state is PipelineState.STOPPED


def test_threaded_pipeline_small_run(broker, catalog):
    broker.declare_queue(QueueConfig("neubotspeed"))
    text = "EVERY 1 seconds compute the max value of download_speed of the last 2 seconds from streaming rabbitmq queue neubotspeed"
    p = plan(parse_query(text), catalog)
    pipe = launch(p, broker, duration_ms=1_200, threaded=True)
    assert pipe.state is PipelineState.RUNNING
    src = broker.get_queue("neubotspeed")
    for t in _feed(5, 100):
        src.publish(
            StreamTuple(
                timestamp=pipe.operators[0].anchor + t.timestamp,
                attributes=t.attributes,
                source_id=t.source_id,
            )
        )
    import time

    deadline = time.monotonic() + 5
    while not pipe.operators[0].finished and time.monotonic() < deadline:
        time.sleep(0.02)
    status = pipe.stop(drain_timeout_s=2)
    assert status.state is PipelineState.STOPPED
    got = broker.subscribe(p.stages[1].sink_queue).drain()
    assert len(got) == 1
    assert result_from_tuple(got[0]).count == 5
