"""Mocking-assisted seed execution: record (input, output) at every
interception point, then replay with value substitution on matching inputs.

Point kinds: system dependencies (random/time), internal dependencies
(App-global state), external dependencies (RPC and database access).  A
point not covered during a recorded run keeps a NULL record.  Replay pairs
the k-th firing of a point with its k-th record; on an input match the
recorded output is returned and the real effect is skipped, otherwise the
real effect runs and a divergence is logged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .appmodel import (
    AppSpec,
    CrashKind,
    DbRead,
    DbWrite,
    RpcCall,
    StateRead,
    StateWrite,
    SysCall,
    decode_value,
    encode_value,
    value_eq,
)
from .cluster import Cluster
from .interp import UNIT, CrashOut, CrashSignal, Interceptor, Outcome, PointId, Substitution
from .tracing import Trace


class PointKind(str, Enum):
    SYSTEM = "PS"
    INTERNAL = "PI"
    EXTERNAL = "PE"


_KIND_BY_STMT = {
    SysCall: PointKind.SYSTEM,
    StateRead: PointKind.INTERNAL,
    StateWrite: PointKind.INTERNAL,
    RpcCall: PointKind.EXTERNAL,
    DbRead: PointKind.EXTERNAL,
    DbWrite: PointKind.EXTERNAL,
}


def point_kind_of(stmt) -> PointKind | None:
    return _KIND_BY_STMT.get(type(stmt))


@dataclass(frozen=True)
class MockPoint:
    point_id: PointId
    kind: PointKind
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class MockRecord:
    inputs: tuple
    output: object  # runtime value, UNIT, or CrashOut


@dataclass
class MockSet:
    """All records for one seed run, keyed by point id in encounter order.

    ``records[pid] is None`` is the NULL record: the point was enumerated
    for the seed's target-App closure but never fired during the run.
    """

    seed_id: str
    records: dict[PointId, list[MockRecord] | None] = field(default_factory=dict)

    def point_count(self) -> int:
        return len(self.records)


def inputs_equal(a: tuple, b: tuple, volatile: Iterable[int] = ()) -> bool:
    """Canonical-feature equality: exact per-field comparison after masking
    the point's registered volatile field indices (e.g. timestamps)."""
    if len(a) != len(b):
        return False
    masked = set(volatile)
    return all(i in masked or value_eq(x, y) for i, (x, y) in enumerate(zip(a, b)))


def enumerate_mock_points(apps: Iterable[AppSpec], target_app: str) -> list[MockPoint]:
    """All interception-eligible statements reachable from the target App's
    handlers, following RPC edges transitively; deterministic order."""
    by_id = {a.app_id: a for a in apps}
    if target_app not in by_id:
        raise UnknownTargetApp(target_app)
    reached: set[tuple[str, str]] = set()
    frontier = [(target_app, h.name) for h in by_id[target_app].handlers]
    while frontier:
        key = frontier.pop()
        if key in reached:
            continue
        reached.add(key)
        app_id, handler = key
        app = by_id.get(app_id)
        if app is None:
            continue
        try:
            h = app.handler(handler)
        except KeyError:
            continue
        for block in h.blocks.values():
            for stmt in block.statements:
                if isinstance(stmt, RpcCall):
                    frontier.append((stmt.target_app, stmt.target_handler))
    points = []
    for app_id, handler in reached:
        app = by_id.get(app_id)
        if app is None:
            continue
        try:
            h = app.handler(handler)
        except KeyError:
            continue
        for bid, block in h.blocks.items():
            for idx, stmt in enumerate(block.statements):
                kind = point_kind_of(stmt)
                if kind is not None:
                    points.append(MockPoint((app_id, handler, bid, idx), kind, getattr(stmt, "volatile", ())))
    points.sort(key=lambda p: p.point_id)
    return points


class UnknownTargetApp(KeyError):
    pass


class Recorder(Interceptor):
    """Executes every point for real and captures its (input, output) pair."""

    def __init__(self, points: list[MockPoint]):
        self.points = points
        self._records: dict[PointId, list[MockRecord]] = {}

    def after(self, point_id, stmt, inputs, output):
        self._records.setdefault(point_id, []).append(MockRecord(inputs, output))

    def after_crash(self, point_id, stmt, inputs, sig: CrashSignal):
        self._records.setdefault(point_id, []).append(
            MockRecord(inputs, CrashOut(sig.kind, sig.message, sig.site))
        )

    def finish(self, seed_id: str) -> MockSet:
        records: dict[PointId, list[MockRecord] | None] = {p.point_id: None for p in self.points}
        records.update(self._records)
        return MockSet(seed_id, records)


@dataclass(frozen=True)
class Divergence:
    point_id: PointId
    firing_index: int
    reason: str  # "mismatch" | "exhausted" | "null_record" | "unknown_point"
    observed_inputs: tuple
    recorded_inputs: tuple | None = None


@dataclass
class ConsistencyReport:
    divergences: list[Divergence] = field(default_factory=list)
    substituted: int = 0
    observations: list = field(default_factory=list)
    probe_log: list = field(default_factory=list)
    effective_mocks: MockSet | None = None

    @property
    def consistent(self) -> bool:
        return not self.divergences


class Replayer(Interceptor):
    """Substitutes recorded outputs on matching inputs; real execution on any
    divergence.  Also synthesizes an effective MockSet describing the run it
    actually performed, so an interesting mutant can be stored with mocks
    that reproduce its own path exactly."""

    def __init__(self, mock_set: MockSet, points: list[MockPoint]):
        self.mock_set = mock_set
        self.points = {p.point_id: p for p in points}
        self.report = ConsistencyReport()
        self._cursors: dict[PointId, int] = {}
        self._effective = Recorder(points)

    def _volatile(self, point_id: PointId, stmt) -> tuple[int, ...]:
        point = self.points.get(point_id)
        if point is not None:
            return point.volatile
        return getattr(stmt, "volatile", ())

    def before(self, point_id, stmt, inputs):
        firing = self._cursors.get(point_id, 0)
        self._cursors[point_id] = firing + 1
        if point_id not in self.mock_set.records:
            self.report.divergences.append(Divergence(point_id, firing, "unknown_point", inputs))
            return None
        recs = self.mock_set.records[point_id]
        if recs is None:
            self.report.divergences.append(Divergence(point_id, firing, "null_record", inputs))
            return None
        if firing >= len(recs):
            self.report.divergences.append(Divergence(point_id, firing, "exhausted", inputs))
            return None
        rec = recs[firing]
        if not inputs_equal(inputs, rec.inputs, self._volatile(point_id, stmt)):
            self.report.divergences.append(Divergence(point_id, firing, "mismatch", inputs, rec.inputs))
            return None
        self.report.substituted += 1
        self._effective.after(point_id, stmt, inputs, rec.output)
        return Substitution(rec.output)

    def after(self, point_id, stmt, inputs, output):
        self._effective.after(point_id, stmt, inputs, output)

    def after_crash(self, point_id, stmt, inputs, sig):
        self._effective.after_crash(point_id, stmt, inputs, sig)

    def effective_mocks(self, seed_id: str) -> MockSet:
        return self._effective.finish(seed_id)


def record_invoke(cluster: Cluster, seed) -> tuple[Outcome, int, MockSet]:
    """Recording execution only; the trace stays with the collector for a
    later splice (pipeline mode collects in a separate stage)."""
    recorder = Recorder(enumerate_mock_points(cluster.deployed_specs(), seed.app_id))
    result = cluster.invoke(seed.app_id, seed.handler, list(seed.args), interceptor=recorder)
    return result.outcome, result.trace_id, recorder.finish(seed.seed_id)


def record_run(cluster: Cluster, seed) -> tuple[Outcome, Trace, MockSet]:
    """Execute a seed with real dependencies, capturing its mock records."""
    outcome, trace_id, mocks = record_invoke(cluster, seed)
    return outcome, cluster.collector.collect_and_splice(trace_id), mocks


def replay_invoke(cluster: Cluster, seed, mock_set: MockSet) -> tuple[Outcome, int, ConsistencyReport]:
    """Replaying execution only; splice separately via the collector."""
    replayer = Replayer(mock_set, enumerate_mock_points(cluster.deployed_specs(), seed.app_id))
    result = cluster.invoke(seed.app_id, seed.handler, list(seed.args), interceptor=replayer)
    report = replayer.report
    report.observations = list(result.observations)
    report.effective_mocks = replayer.effective_mocks(seed.seed_id)
    report.probe_log = list(result.probe_log)
    return result.outcome, result.trace_id, report


def replay_run(cluster: Cluster, seed, mock_set: MockSet) -> tuple[Outcome, Trace, ConsistencyReport]:
    """Re-execute a seed substituting recorded outputs on matching inputs.

    Substituted writes leave App state and the database untouched;
    substituted RPCs are not routed.  The report carries the divergence log,
    the request's observation log, and the run's effective MockSet.
    """
    outcome, trace_id, report = replay_invoke(cluster, seed, mock_set)
    return outcome, cluster.collector.collect_and_splice(trace_id), report


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _encode_output(out) -> object:
    if out is UNIT:
        return {"unit": True}
    if isinstance(out, CrashOut):
        return {"crash": {"kind": out.kind.value, "message": out.message,
                          "site": list(out.site) if out.site else None}}
    return {"value": encode_value(out)}


def _decode_output(j):
    if j == {"unit": True}:
        return UNIT
    if "crash" in j:
        c = j["crash"]
        site = tuple(c["site"]) if c.get("site") else None
        return CrashOut(CrashKind(c["kind"]), c["message"], site)
    return decode_value(j["value"])


def point_id_str(pid: PointId) -> str:
    return f"{pid[0]}/{pid[1]}/{pid[2]}/{pid[3]}"


def parse_point_id(s: str) -> PointId:
    app, handler, block, idx = s.split("/")
    return (app, handler, block, int(idx))


def mock_set_to_json(mocks: MockSet) -> dict:
    """Persistence format: point id -> ordered (input, output) pairs, with
    NULL records encoded as the literal null."""
    out = {}
    for pid in sorted(mocks.records):
        recs = mocks.records[pid]
        if recs is None:
            out[point_id_str(pid)] = None
        else:
            out[point_id_str(pid)] = [
                [[encode_value(v) for v in r.inputs], _encode_output(r.output)] for r in recs
            ]
    return {"seed_id": mocks.seed_id, "points": out}


def mock_set_from_json(doc: dict) -> MockSet:
    records: dict[PointId, list[MockRecord] | None] = {}
    for key, recs in doc["points"].items():
        pid = parse_point_id(key)
        if recs is None:
            records[pid] = None
        else:
            records[pid] = [
                MockRecord(tuple(decode_value(v) for v in inputs), _decode_output(output))
                for inputs, output in recs
            ]
    return MockSet(doc["seed_id"], records)


def save_mock_set(path, mocks: MockSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mock_set_to_json(mocks), fh, indent=1, sort_keys=True)


def load_mock_set(path) -> MockSet:
    with open(path, "r", encoding="utf-8") as fh:
        return mock_set_from_json(json.load(fh))
