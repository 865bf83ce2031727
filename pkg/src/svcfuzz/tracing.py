"""Distributed tracing: per-App agents, span splicing, and coverage digests.

Each service instance runs an agent that records covered probes under the
request's trace id.  A central collector splices per-App span fragments into
one whole-request coverage view and maintains the campaign-wide set of
coverage digests already seen.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable

from .appmodel import CrashKind
from .interp import BudgetExhausted, Crashed, Outcome, Returned

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

Probe = tuple[str, str, str]


class UnknownTrace(KeyError):
    """Recording against a span that is not open on this agent."""


class IncompleteTrace(RuntimeError):
    """Splicing requested while some agent still has an open span."""


def compute_cover_digest(probes: Iterable[Probe]) -> int:
    """64-bit FNV-1a over the canonical probe-set encoding.

    Probes are deduplicated, rendered as "app:handler:block", sorted
    lexicographically, joined with 0x0A, and hashed as UTF-8 bytes.  Equal
    probe sets therefore always produce equal digests.
    """
    lines = sorted({f"{a}:{h}:{b}" for (a, h, b) in probes})
    data = "\n".join(lines).encode("utf-8")
    digest = FNV64_OFFSET
    for byte in data:
        digest ^= byte
        digest = (digest * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return digest


def digest_hex(digest: int) -> str:
    return f"{digest:016x}"


@dataclass(frozen=True)
class TraceContext:
    trace_id: int
    parent_span_id: int | None
    depth: int


@dataclass
class Span:
    span_id: int
    trace_id: int
    app_id: str
    handler: str
    start: int
    parent_span_id: int | None = None
    end: int | None = None
    probes: list[Probe] = field(default_factory=list)
    child_span_ids: list[int] = field(default_factory=list)

    @property
    def closed(self) -> bool:
        return self.end is not None


@dataclass(frozen=True)
class OutcomeSummary:
    kind: str  # "returned" | "crashed" | "budget_exhausted"
    crash_kind: CrashKind | None = None
    crash_site: tuple[str, str, str] | None = None

    @classmethod
    def from_outcome(cls, outcome: Outcome) -> "OutcomeSummary":
        if isinstance(outcome, Returned):
            return cls("returned")
        if isinstance(outcome, Crashed):
            return cls("crashed", outcome.kind, outcome.site)
        if isinstance(outcome, BudgetExhausted):
            return cls("budget_exhausted")
        raise TypeError(f"not an outcome: {outcome!r}")


@dataclass(frozen=True)
class Trace:
    trace_id: int
    root: Span
    spans: tuple[Span, ...]
    probe_set: frozenset[Probe]
    cover_digest: int
    outcome: OutcomeSummary | None

    def app_probe_set(self, app_id: str) -> frozenset[Probe]:
        return frozenset(p for p in self.probe_set if p[0] == app_id)

    def app_digest(self, app_id: str) -> int:
        """Digest of the coverage fragment recorded for one service."""
        return compute_cover_digest(self.app_probe_set(app_id))


class Agent:
    """Single-writer span recorder for one deployed service."""

    def __init__(self, app_id: str, collector: "TraceCollector"):
        self.app_id = app_id
        self._collector = collector
        self._open: dict[int, Span] = {}

    def open_span(self, ctx: TraceContext, handler: str, start: int) -> Span:
        span = Span(
            span_id=self._collector.next_span_id(),
            trace_id=ctx.trace_id,
            app_id=self.app_id,
            handler=handler,
            start=start,
            parent_span_id=ctx.parent_span_id,
        )
        self._open[span.span_id] = span
        self._collector.register_span(span)
        return span

    def record(self, span_id: int, probe: Probe) -> None:
        span = self._open.get(span_id)
        if span is None:
            raise UnknownTrace(f"no open span {span_id} on agent {self.app_id!r}")
        span.probes.append(probe)

    def close_span(self, span_id: int, end: int) -> None:
        span = self._open.pop(span_id, None)
        if span is None:
            raise UnknownTrace(f"no open span {span_id} on agent {self.app_id!r}")
        span.end = end


class TraceCollector:
    """Central splice point; thread-safe for concurrent agents and queries."""

    def __init__(self):
        self._lock = threading.Lock()
        self._spans: dict[int, list[Span]] = {}
        self._outcomes: dict[int, OutcomeSummary] = {}
        self._traces: dict[int, Trace] = {}
        self._seen: set[int] = set()
        self._span_counter = 0
        self._trace_counter = 0

    def next_trace_id(self) -> int:
        with self._lock:
            self._trace_counter += 1
            return self._trace_counter

    def next_span_id(self) -> int:
        with self._lock:
            self._span_counter += 1
            return self._span_counter

    def register_span(self, span: Span) -> None:
        with self._lock:
            self._spans.setdefault(span.trace_id, []).append(span)

    def note_outcome(self, trace_id: int, summary: OutcomeSummary) -> None:
        with self._lock:
            self._outcomes[trace_id] = summary

    def report_new_digest(self, digest: int) -> bool:
        """True exactly once per distinct digest over the campaign."""
        with self._lock:
            if digest in self._seen:
                return False
            self._seen.add(digest)
            return True

    def forget_digest(self, digest: int) -> None:
        """Drop a digest from the seen set (seed life-cycle purge)."""
        with self._lock:
            self._seen.discard(digest)

    def seen_digest_count(self) -> int:
        with self._lock:
            return len(self._seen)

    def collect_and_splice(self, trace_id: int) -> Trace:
        """Assemble all span fragments for a request into one Trace.

        Siblings are ordered by start timestamp (span id breaks ties, which
        follows creation order).  Raises IncompleteTrace while any span for
        the request is still open.
        """
        with self._lock:
            spans = list(self._spans.get(trace_id, []))
            outcome = self._outcomes.get(trace_id)
        if not spans:
            raise UnknownTrace(f"no spans recorded for trace {trace_id}")
        for span in spans:
            if not span.closed:
                raise IncompleteTrace(f"span {span.span_id} of trace {trace_id} still open")
        by_id = {s.span_id: s for s in spans}
        for span in spans:
            span.child_span_ids = []
        roots = []
        for span in sorted(spans, key=lambda s: (s.start, s.span_id)):
            parent = by_id.get(span.parent_span_id) if span.parent_span_id is not None else None
            if parent is None:
                roots.append(span)
            else:
                parent.child_span_ids.append(span.span_id)
        probe_set = frozenset(p for s in spans for p in s.probes)
        trace = Trace(
            trace_id=trace_id,
            root=roots[0],
            spans=tuple(sorted(spans, key=lambda s: (s.start, s.span_id))),
            probe_set=probe_set,
            cover_digest=compute_cover_digest(probe_set),
            outcome=outcome,
        )
        with self._lock:
            self._traces[trace_id] = trace
        return trace

    def get_trace(self, trace_id: int) -> Trace | None:
        with self._lock:
            return self._traces.get(trace_id)

    def spans_for(self, trace_id: int) -> list[Span]:
        with self._lock:
            return list(self._spans.get(trace_id, []))


def span_to_json(span: Span, by_id: dict[int, Span]) -> dict:
    return {
        "span_id": span.span_id,
        "app": span.app_id,
        "handler": span.handler,
        "start_ms": span.start,
        "end_ms": span.end,
        "probes": [list(p) for p in span.probes],
        "children": [span_to_json(by_id[c], by_id) for c in span.child_span_ids],
    }


def trace_to_json(trace: Trace) -> dict:
    """Export one trace as a JSON document (span tree + digest)."""
    by_id = {s.span_id: s for s in trace.spans}
    doc = {
        "trace_id": f"{trace.trace_id:032x}",
        "cover_digest": digest_hex(trace.cover_digest),
        "probe_set": sorted(list(p) for p in trace.probe_set),
        "root": span_to_json(trace.root, by_id),
    }
    if trace.outcome is not None:
        doc["outcome"] = {
            "kind": trace.outcome.kind,
            "crash_kind": trace.outcome.crash_kind.value if trace.outcome.crash_kind else None,
            "crash_site": list(trace.outcome.crash_site) if trace.outcome.crash_site else None,
        }
    return doc
