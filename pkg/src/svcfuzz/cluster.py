"""Deterministic in-process service cluster: deployment, RPC routing, faults.

The cluster owns every nondeterminism source (seeded rng, virtual clock,
per-App global stores, shared database) so that a fixed seed, fault policy,
deployment set, and request sequence replays bit-exactly.  Network hops are
simulated with configurable virtual latency and probabilistic fault
injection instead of sockets.
"""
from __future__ import annotations

import copy
import json
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .appmodel import AppSpec, CrashKind, decode_value, parse_app_spec
from .interp import (
    DEFAULT_STEP_BUDGET,
    BudgetSignal,
    Crashed,
    CrashSignal,
    ExecutionEnv,
    Interceptor,
    Outcome,
    Returned,
)
from .tracing import Agent, OutcomeSummary, Span, TraceCollector, TraceContext

DEFAULT_MAX_HOPS = 32


class UnknownApp(KeyError):
    pass


class UnknownHandler(KeyError):
    pass


class DuplicateVersion(ValueError):
    """Deploying a version id equal to the one already active."""


class VersionMismatch(ValueError):
    """Restoring a snapshot onto a cluster with different deployments."""


@dataclass(frozen=True)
class FaultPolicy:
    rpc_failure_probability: float = 0.0
    latency_ms: int = 0
    affected_apps: frozenset[str] | None = None

    def applies_to(self, app_id: str) -> bool:
        return self.affected_apps is None or app_id in self.affected_apps


@dataclass(frozen=True)
class VersionEvent:
    app_id: str
    version_id: str
    event_time: int


@dataclass
class ClusterSnapshot:
    deployments: dict[str, str]
    app_states: dict[str, dict]
    database: dict
    rng_state: object
    clock_ms: int
    stmt_accum: int


@dataclass
class _Timer:
    name: str
    interval_ms: int
    callback: object
    next_due: int

    def reset(self, next_due: int) -> None:
        self.next_due = next_due


@dataclass
class InvokeResult:
    outcome: Outcome
    trace_id: int
    root_span: Span
    probe_log: list
    observations: list


class _RequestRuntime:
    """Shared per-request state threaded through every RPC hop."""

    def __init__(self, cluster: "Cluster", trace_id: int, interceptor: Interceptor | None, step_budget: int):
        self.cluster = cluster
        self.trace_id = trace_id
        self.interceptor = interceptor
        self.step_budget = step_budget
        self.probe_log: list = []
        self.observations: list = []


class _ClusterServices:
    """Service backend bound to one handler invocation inside the cluster."""

    def __init__(self, cluster: "Cluster", runtime: _RequestRuntime, ctx: TraceContext):
        self.cluster = cluster
        self.runtime = runtime
        self.ctx = ctx

    def tick_statement(self) -> None:
        self.cluster._tick_statement()

    def sys_random(self) -> int:
        with self.cluster._lock:
            return self.cluster.rng.getrandbits(63)

    def sys_now(self) -> int:
        return self.cluster.clock_ms

    def state_read(self, app_id: str, key: bytes):
        with self.cluster._lock:
            return self.cluster.app_states[app_id].get(key, b"")

    def state_write(self, app_id: str, key: bytes, value) -> None:
        with self.cluster._lock:
            self.cluster.app_states[app_id][key] = value

    def db_read(self, table: str, key: bytes):
        with self.cluster._lock:
            try:
                return self.cluster.database[(table, key)]
            except KeyError:
                raise CrashSignal(CrashKind.SYS_SQL, f"no row in {table!r} for key 0x{key.hex()}") from None

    def db_write(self, table: str, key: bytes, value) -> None:
        with self.cluster._lock:
            self.cluster.database[(table, key)] = value

    def rpc(self, env: ExecutionEnv, target_app: str, target_handler: str, args: list):
        cluster = self.cluster
        if self.ctx.depth + 1 > cluster.max_hops:
            raise CrashSignal(
                CrashKind.SYS_UNCLEARED_THROWABLE,
                f"rpc depth exceeded {cluster.max_hops} hops calling {target_app}.{target_handler}",
            )
        policy = cluster.fault_policy
        cluster._advance_clock_internal(policy.latency_ms)
        if policy.rpc_failure_probability > 0 and policy.applies_to(target_app):
            with cluster._lock:
                cluster.hop_count += 1
                failed = cluster.rng.random() < policy.rpc_failure_probability
            if failed:
                with cluster._lock:
                    cluster.fault_count += 1
                raise CrashSignal(CrashKind.SYS_IO, f"injected rpc failure calling {target_app}.{target_handler}")
        else:
            with cluster._lock:
                cluster.hop_count += 1
        if target_app not in cluster.deployments:
            raise CrashSignal(CrashKind.SYS_IO, f"rpc target app {target_app!r} not deployed")
        child_ctx = TraceContext(self.ctx.trace_id, env._span_id, self.ctx.depth + 1)
        outcome = cluster._execute(target_app, target_handler, args, self.runtime, child_ctx)
        if isinstance(outcome, Returned):
            return outcome.value
        if isinstance(outcome, Crashed):
            raise CrashSignal(outcome.kind, outcome.message, outcome.site)
        raise BudgetSignal()


class Cluster:
    """Simulated cloud holding deployments, shared state, and virtual time."""

    def __init__(
        self,
        rng_seed: int = 0,
        fault_policy: FaultPolicy | None = None,
        max_hops: int = DEFAULT_MAX_HOPS,
        step_budget: int = DEFAULT_STEP_BUDGET,
    ):
        self.rng = random.Random(rng_seed)
        self.rng_seed = rng_seed
        self.fault_policy = fault_policy or FaultPolicy()
        self.max_hops = max_hops
        self.step_budget = step_budget
        self.clock_ms = 0
        self.deployments: dict[str, AppSpec] = {}
        self.app_states: dict[str, dict] = {}
        self.database: dict = {}
        self.collector = TraceCollector()
        self.agents: dict[str, Agent] = {}
        self.hop_count = 0
        self.fault_count = 0
        self.event_log: list[VersionEvent] = []
        self._subscribers: list = []
        self._timers: list[_Timer] = []
        self._pending_events: list[tuple[int, AppSpec]] = []
        self._stmt_accum = 0
        self._lock = threading.RLock()

    # -- time --------------------------------------------------------------

    def _tick_statement(self) -> None:
        # 1 ms of virtual time per 1,000 interpreted statements
        with self._lock:
            self._stmt_accum += 1
            if self._stmt_accum >= 1000:
                self._stmt_accum = 0
                self.clock_ms += 1

    def _advance_clock_internal(self, delta_ms: int) -> None:
        if delta_ms:
            with self._lock:
                self.clock_ms += delta_ms

    def now(self) -> int:
        return self.clock_ms

    def schedule_every(self, interval_ms: int, callback, name: str) -> _Timer:
        timer = _Timer(name, interval_ms, callback, self.clock_ms + interval_ms)
        self._timers.append(timer)
        return timer

    def cancel_timer(self, timer: _Timer) -> None:
        if timer in self._timers:
            self._timers.remove(timer)

    def advance_clock(self, delta_ms: int) -> None:
        """Move virtual time forward, firing due timers and scheduled version
        events in time order (ties resolve by registration order)."""
        target = self.clock_ms + delta_ms
        while True:
            due: list[tuple[int, int, object]] = []
            for t, app in self._pending_events:
                if t <= target:
                    due.append((t, 0, ("event", app)))
            for i, timer in enumerate(self._timers):
                if timer.next_due <= target:
                    due.append((timer.next_due, 1 + i, ("timer", timer)))
            if not due:
                break
            due.sort(key=lambda item: (item[0], item[1]))
            when, _, (kind, payload) = due[0]
            self.clock_ms = max(self.clock_ms, when)
            if kind == "event":
                self._pending_events = [(t, a) for (t, a) in self._pending_events if a is not payload]
                self.deploy(payload)
            else:
                payload.next_due = when + payload.interval_ms
                payload.callback()
        self.clock_ms = max(self.clock_ms, target)

    def schedule_version_event(self, event_time: int, app: AppSpec) -> None:
        self._pending_events.append((event_time, app))
        self._pending_events.sort(key=lambda e: e[0])

    # -- deployment ----------------------------------------------------------

    def subscribe_version_events(self, callback) -> None:
        self._subscribers.append(callback)

    def deploy(self, app: AppSpec) -> None:
        """Activate a version; replacing a live version publishes a VersionEvent."""
        previous = self.deployments.get(app.app_id)
        if previous is not None and previous.version_id == app.version_id:
            raise DuplicateVersion(f"{app.app_id} version {app.version_id!r} already deployed")
        self.deployments[app.app_id] = app
        self.app_states[app.app_id] = dict(app.initial_state)
        if app.app_id not in self.agents:
            self.agents[app.app_id] = Agent(app.app_id, self.collector)
        if previous is not None:
            event = VersionEvent(app.app_id, app.version_id, self.clock_ms)
            self.event_log.append(event)
            for callback in list(self._subscribers):
                callback(event)

    def deployed_specs(self) -> list[AppSpec]:
        return [self.deployments[a] for a in sorted(self.deployments)]

    def deployment_versions(self) -> dict[str, str]:
        return {a: spec.version_id for a, spec in self.deployments.items()}

    # -- execution -----------------------------------------------------------

    def _execute(self, app_id: str, handler: str, args: list, runtime: _RequestRuntime, ctx: TraceContext) -> Outcome:
        from .interp import execute_handler  # local import avoids cycle at module load

        app = self.deployments[app_id]
        try:
            app.handler(handler)
        except KeyError:
            raise UnknownHandler(f"{app_id}.{handler}") from None
        agent = self.agents[app_id]
        span = agent.open_span(ctx, handler, self.clock_ms)
        env = ExecutionEnv(
            app_id=app_id,
            services=_ClusterServices(self, runtime, ctx),
            interceptor=runtime.interceptor,
            step_budget=runtime.step_budget,
            probe_sink=lambda probe: agent.record(span.span_id, probe),
            probe_log=runtime.probe_log,
            observations=runtime.observations,
        )
        env._span_id = span.span_id
        try:
            return execute_handler(env, app, handler, args)
        finally:
            agent.close_span(span.span_id, self.clock_ms)

    def invoke(
        self,
        app_id: str,
        handler: str,
        args: list,
        interceptor: Interceptor | None = None,
        step_budget: int | None = None,
    ) -> InvokeResult:
        """Run one request against a deployed service and return its outcome
        plus the root trace fragment."""
        if app_id not in self.deployments:
            raise UnknownApp(app_id)
        try:
            self.deployments[app_id].handler(handler)
        except KeyError:
            raise UnknownHandler(f"{app_id}.{handler}") from None
        trace_id = self.collector.next_trace_id()
        runtime = _RequestRuntime(self, trace_id, interceptor, step_budget or self.step_budget)
        ctx = TraceContext(trace_id, None, 0)
        outcome = self._execute(app_id, handler, args, runtime, ctx)
        self.collector.note_outcome(trace_id, OutcomeSummary.from_outcome(outcome))
        spans = self.collector.spans_for(trace_id)
        root = next(s for s in spans if s.parent_span_id is None)
        return InvokeResult(outcome, trace_id, root, runtime.probe_log, runtime.observations)

    # -- snapshot / restore ----------------------------------------------------

    def snapshot(self) -> ClusterSnapshot:
        with self._lock:
            return ClusterSnapshot(
                deployments=self.deployment_versions(),
                app_states=copy.deepcopy(self.app_states),
                database=copy.deepcopy(self.database),
                rng_state=self.rng.getstate(),
                clock_ms=self.clock_ms,
                stmt_accum=self._stmt_accum,
            )

    def restore(self, snap: ClusterSnapshot) -> None:
        with self._lock:
            if self.deployment_versions() != snap.deployments:
                raise VersionMismatch(
                    f"snapshot deployments {snap.deployments} != current {self.deployment_versions()}"
                )
            self.app_states = copy.deepcopy(snap.app_states)
            self.database = copy.deepcopy(snap.database)
            self.rng.setstate(snap.rng_state)
            self.clock_ms = snap.clock_ms
            self._stmt_accum = snap.stmt_accum


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusEntry:
    app_id: str
    handler: str
    args: tuple[bytes, ...]


@dataclass
class Scenario:
    apps: list[AppSpec]
    rng_seed: int
    fault_policy: FaultPolicy
    events: list[tuple[int, AppSpec]] = field(default_factory=list)
    corpus: list[CorpusEntry] = field(default_factory=list)

    def build_cluster(self, seed_override: int | None = None, **kw) -> Cluster:
        cluster = Cluster(
            rng_seed=self.rng_seed if seed_override is None else seed_override,
            fault_policy=self.fault_policy,
            **kw,
        )
        for app in self.apps:
            cluster.deploy(app)
        for when, app in self.events:
            cluster.schedule_version_event(when, app)
        return cluster


def load_scenario(path: str | Path) -> Scenario:
    """Load a cluster scenario file: App documents, rng seed, fault policy,
    scripted version events, and an optional seed corpus."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    apps = [parse_app_spec((base / p).read_text(encoding="utf-8")) for p in doc.get("apps", [])]
    fault_raw = doc.get("fault", {})
    affected = fault_raw.get("affected_apps")
    fault = FaultPolicy(
        rpc_failure_probability=float(fault_raw.get("rpc_failure_probability", 0.0)),
        latency_ms=int(fault_raw.get("latency_ms", 0)),
        affected_apps=frozenset(affected) if affected is not None else None,
    )
    events = [
        (int(e["time"]), parse_app_spec((base / e["app"]).read_text(encoding="utf-8")))
        for e in doc.get("events", [])
    ]
    corpus = [
        CorpusEntry(c["app"], c["handler"], tuple(_decode_arg(a) for a in c.get("args", [])))
        for c in doc.get("corpus", [])
    ]
    return Scenario(apps, int(doc.get("seed", 0)), fault, events, corpus)


def _decode_arg(a) -> bytes:
    v = decode_value(a)
    if not isinstance(v, bytes):
        raise ValueError(f"corpus args must be byte strings, got {a!r}")
    return v
