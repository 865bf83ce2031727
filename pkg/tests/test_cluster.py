from __future__ import annotations

import math

import pytest

from fixtures import (
    app_doc,
    assign,
    block,
    chain_apps,
    counter_app,
    echo_app,
    goto,
    handler_doc,
    mixed_app,
    op,
    ret,
    rpc,
    syscall,
    v,
)
from svcfuzz.appmodel import CrashKind, parse_app_spec
from svcfuzz.cluster import (
    Cluster,
    DuplicateVersion,
    FaultPolicy,
    UnknownApp,
    UnknownHandler,
    VersionMismatch,
)
from svcfuzz.interp import Crashed, Returned


def test_deploy_to_empty_cluster():
    cluster = Cluster()
    cluster.deploy(echo_app())
    assert len(cluster.deployments) == 1


def test_redeploy_publishes_one_event_and_activates_v2():
    cluster = Cluster()
    events = []
    cluster.subscribe_version_events(events.append)
    cluster.deploy(echo_app(version="v1"))
    cluster.deploy(echo_app(version="v2", suffix=b"!"))
    assert cluster.deployments["B"].version_id == "v2"
    assert len(events) == 1 and events[0].version_id == "v2"


def test_duplicate_version_rejected():
    cluster = Cluster()
    cluster.deploy(echo_app(version="v1"))
    with pytest.raises(DuplicateVersion):
        cluster.deploy(echo_app(version="v1"))


def test_rpc_chain_returns_and_traces_both_apps():
    cluster = Cluster()
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    result = cluster.invoke("F", "handle", [b"hi"])
    assert isinstance(result.outcome, Returned)
    trace = cluster.collector.collect_and_splice(result.trace_id)
    assert {p[0] for p in trace.probe_set} == {"F", "B"}
    assert trace.root.app_id == "F"
    assert len(trace.root.child_span_ids) == 1


def test_forced_fault_crashes_at_caller_site():
    cluster = Cluster(fault_policy=FaultPolicy(rpc_failure_probability=1.0))
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    result = cluster.invoke("F", "handle", [b"hi"])
    assert isinstance(result.outcome, Crashed)
    assert result.outcome.kind is CrashKind.SYS_IO
    assert result.outcome.site == ("F", "handle", "b1")  # the RpcCall's block


def test_now_is_non_decreasing():
    app = parse_app_spec(app_doc("T", "v1", [handler_doc("h", [], "b0", {
        "b0": block([syscall("a", "now"), syscall("b", "now"),
                     {"kind": "emit", "sink": "t", "value": op("sub", v("b"), v("a"))}], ret(0)),
    })]))
    cluster = Cluster()
    cluster.deploy(app)
    result = cluster.invoke("T", "h", [])
    (_, delta), = result.observations
    assert delta >= 0


def test_clock_advances_per_hop_latency():
    cluster = Cluster(fault_policy=FaultPolicy(latency_ms=10))
    for app in chain_apps():
        cluster.deploy(app)
    t0 = cluster.now()
    cluster.invoke("A", "entry", [b"x"])
    assert cluster.now() - t0 == 20  # two hops: A->B, B->C


def test_clock_advances_one_ms_per_thousand_statements():
    # 1200 assigns + goto/return terminators cross the 1,000-statement mark once
    stmts = [assign("a", 1) for _ in range(600)]
    app = parse_app_spec(app_doc("S", "v1", [handler_doc("h", [], "b0", {
        "b0": block(stmts, goto("b1")),
        "b1": block(stmts, ret(0)),
    })]))
    cluster = Cluster()
    cluster.deploy(app)
    t0 = cluster.now()
    cluster.invoke("S", "h", [])
    assert cluster.now() - t0 == 1


def test_snapshot_restore_counter():
    cluster = Cluster()
    cluster.deploy(counter_app())
    snap = cluster.snapshot()
    cluster.invoke("C", "get_value", [b"k"])
    assert cluster.app_states["C"][b"counter"] == 1
    cluster.restore(snap)
    assert cluster.app_states["C"][b"counter"] == 0


def test_restore_then_replay_is_bit_identical():
    cluster = Cluster(rng_seed=11)
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    snap = cluster.snapshot()
    first = cluster.invoke("F", "handle", [b"abc"])
    cluster.restore(snap)
    second = cluster.invoke("F", "handle", [b"abc"])
    assert first.outcome == second.outcome
    assert first.probe_log == second.probe_log
    assert first.observations == second.observations


def test_restore_onto_different_deployments_is_version_mismatch():
    cluster = Cluster()
    cluster.deploy(echo_app(version="v1"))
    snap = cluster.snapshot()
    cluster.deploy(echo_app(version="v2", suffix=b"!"))
    with pytest.raises(VersionMismatch):
        cluster.restore(snap)


def test_unknown_app_and_handler():
    cluster = Cluster()
    cluster.deploy(echo_app())
    with pytest.raises(UnknownApp):
        cluster.invoke("ghost", "h", [])
    with pytest.raises(UnknownHandler):
        cluster.invoke("B", "ghost", [])


def test_rpc_depth_bounded():
    doc = app_doc("R", "v1", [handler_doc("h", ["x"], "b0", {
        "b0": block([rpc("y", "R", "h", [v("x")])], ret(v("y"))),
    })])
    cluster = Cluster(max_hops=32)
    cluster.deploy(parse_app_spec(doc))
    result = cluster.invoke("R", "h", [b""])
    assert isinstance(result.outcome, Crashed)
    assert result.outcome.kind is CrashKind.SYS_UNCLEARED_THROWABLE


def test_fault_rate_within_three_sigma_of_binomial():
    p = 0.05
    n = 10_000
    cluster = Cluster(rng_seed=123, fault_policy=FaultPolicy(rpc_failure_probability=p))
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    for i in range(n):
        cluster.invoke("F", "handle", [bytes([i % 256]) + b"x"])
    hops = cluster.hop_count
    faults = cluster.fault_count
    assert hops == n  # one rpc hop per request on the non-empty path
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(faults - n * p) <= 3 * sigma


def test_replay_determinism_full_cluster_runs():
    def run_once():
        cluster = Cluster(rng_seed=77, fault_policy=FaultPolicy(rpc_failure_probability=0.2))
        cluster.deploy(mixed_app())
        cluster.deploy(echo_app())
        log = []
        for i in range(50):
            result = cluster.invoke("F", "handle", [bytes([i, 255 - i])])
            log.append((type(result.outcome).__name__, tuple(result.probe_log)))
        return log, cluster.app_states, cluster.database, cluster.now()

    assert run_once() == run_once()


def test_affected_apps_limits_faults():
    cluster = Cluster(fault_policy=FaultPolicy(rpc_failure_probability=1.0, affected_apps=frozenset({"Z"})))
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    result = cluster.invoke("F", "handle", [b"ok"])
    assert isinstance(result.outcome, Returned)


def test_scheduled_version_event_fires_on_advance():
    cluster = Cluster()
    cluster.deploy(echo_app(version="v1"))
    cluster.schedule_version_event(5_000, echo_app(version="v2", suffix=b"!"))
    cluster.advance_clock(4_000)
    assert cluster.deployments["B"].version_id == "v1"
    cluster.advance_clock(2_000)
    assert cluster.deployments["B"].version_id == "v2"
    assert cluster.event_log[0].event_time == 5_000
