"""Applied flows on top of the fuzzer: iteration testing (regression test
selection + directed fuzzing toward changed blocks) and taint verification
by variable controlling.
"""
from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field

from .appmodel import AppSpec, DiffResult, diff_blocks
from .callgraph import CallGraph, build_call_graph
from .cluster import Cluster
from .interp import Crashed
from .mocking import replay_run
from .mutation import MutationOp, OpKind, draw_op_kind, mutate
from .seedstore import Seed, SeedStore, TraceRecord
from .tracing import digest_hex


class NoReachingSeed(LookupError):
    """No stored seed's trace reaches the taint source's handler entry."""


# ---------------------------------------------------------------------------
# Trace index and regression test selection
# ---------------------------------------------------------------------------

@dataclass
class TraceIndex:
    """Per-(app, version) execution traces with their originating seeds."""

    records: dict[tuple[str, str], list[TraceRecord]] = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: SeedStore) -> "TraceIndex":
        index = cls()
        for seed in store.all_seeds():
            record = store.trace_record(seed.seed_id)
            if record is not None:
                index.add(seed.app_id, record.app_version_id, record)
        return index

    def add(self, app_id: str, version_id: str, record: TraceRecord) -> None:
        self.records.setdefault((app_id, version_id), []).append(record)

    def for_branch(self, branch) -> list[TraceRecord]:
        versions = {branch} if isinstance(branch, str) else set(branch)
        out = []
        for (_, version), records in sorted(self.records.items()):
            if version in versions:
                out.extend(records)
        return out


def select_regression_suite(index: TraceIndex, diff, branch_a, branch_b) -> tuple[set[str], set[str]]:
    """Seeds whose traces cover any changed block, partitioned by branch.

    ``diff`` is a set of (app, handler, block) refs (or a DiffResult); a
    seed may appear in both partitions if it executed on both branches.
    """
    changed = diff.changed if isinstance(diff, DiffResult) else frozenset(diff)

    def pick(branch) -> set[str]:
        return {
            record.seed_id
            for record in index.for_branch(branch)
            if record.probe_set & changed
        }

    return pick(branch_a), pick(branch_b)


# ---------------------------------------------------------------------------
# Directed distances and seed priority
# ---------------------------------------------------------------------------

def shortest_distances(graph: CallGraph, targets, weights: dict | None = None) -> dict:
    """Distance from every node TO the nearest target over reversed edges.

    Unit weights by default (plain BFS); an optional per-edge weight map
    switches to Dijkstra.  Unreachable nodes map to infinity.
    """
    targets = set(targets)
    missing = targets - set(graph.nodes)
    if missing:
        raise KeyError(f"targets not in graph: {sorted(missing)}")
    dist = {node: math.inf for node in graph.nodes}
    if weights is None:
        frontier = sorted(targets)
        for node in frontier:
            dist[node] = 0
        while frontier:
            nxt = []
            for node in frontier:
                for pred in graph.predecessors(node):
                    if math.isinf(dist[pred]):
                        dist[pred] = dist[node] + 1
                        nxt.append(pred)
            frontier = nxt
        return dist
    heap = []
    for i, node in enumerate(sorted(targets)):
        dist[node] = 0
        heapq.heappush(heap, (0, i, node))
    tie = len(heap)
    while heap:
        d, _, node = heapq.heappop(heap)
        if d > dist[node]:
            continue
        for pred in graph.predecessors(node):
            w = weights.get((pred, node), 1)
            if d + w < dist[pred]:
                dist[pred] = d + w
                tie += 1
                heapq.heappush(heap, (d + w, tie, pred))
    return dist


def directed_priority(seed: Seed, record: TraceRecord, distances: dict) -> tuple:
    """Sort key for directed campaigns; lower sorts first.

    Seeds covering a target come first, then nearest covered node, then
    larger coverage, then seed id.
    """
    covered = [distances.get(p, math.inf) for p in record.probe_set]
    dmin = min(covered, default=math.inf)
    return (0 if dmin == 0 else 1, dmin, -len(record.probe_set), seed.seed_id)


# ---------------------------------------------------------------------------
# Iteration testing
# ---------------------------------------------------------------------------

@dataclass
class IterationReport:
    diff: list
    deleted: list
    suite_a: list
    suite_b: list
    deltas: list  # per replayed suite seed on the new version
    initial_seeds: int  # seeds covering the diff at the start
    distinct_traces: int  # distinct (app, digest) pairs observed overall
    effectiveness: float
    reached_diff_blocks: list
    iterations: int

    def to_json(self) -> dict:
        return {
            "diff": self.diff,
            "deleted": self.deleted,
            "suites": {"A": self.suite_a, "B": self.suite_b},
            "deltas": self.deltas,
            "initial_seeds": self.initial_seeds,
            "distinct_traces": self.distinct_traces,
            "effectiveness": self.effectiveness,
            "reached_diff_blocks": self.reached_diff_blocks,
            "iterations": self.iterations,
        }


def run_iteration_test(
    cluster: Cluster,
    store: SeedStore,
    old_apps: list[AppSpec],
    new_apps: list[AppSpec],
    budget: int,
    rng_seed: int = 0,
) -> IterationReport:
    """Regression selection plus a directed campaign against changed blocks.

    The cluster must have the old versions deployed with the store's traces
    recorded against them.  New versions are deployed here; the selected
    suite is re-recorded on them (behavior deltas reported as digest
    changes), then seeds are mutated in priority order until the budget runs
    out, admitting new coverage as usual.
    """
    diff = diff_blocks(old_apps, new_apps)
    index = TraceIndex.from_store(store)
    branch_a = {a.version_id for a in old_apps}
    branch_b = {a.version_id for a in new_apps}
    suite_a, suite_b = select_regression_suite(index, diff, branch_a, branch_b)

    for app in new_apps:
        deployed = cluster.deployments.get(app.app_id)
        if deployed is None or deployed.version_id != app.version_id:
            cluster.deploy(app)

    suite = sorted(suite_a | suite_b)
    observed: set[tuple[str, int]] = set()
    deltas = []
    snap = cluster.snapshot()
    for seed_id in suite:
        seed = store.seeds[seed_id]
        cluster.restore(snap)
        old_digest = seed.cover_digest
        try:
            _, new_digest = store.refresh_seed(cluster, seed)
        except Exception as exc:
            deltas.append({"seed_id": seed_id, "error": repr(exc)})
            continue
        record = store.trace_record(seed_id)
        observed.add((seed.app_id, new_digest))
        delta = {
            "seed_id": seed_id,
            "old_digest": digest_hex(old_digest) if old_digest is not None else None,
            "new_digest": digest_hex(new_digest),
            "changed": old_digest != new_digest,
        }
        refreshed_trace = cluster.collector.get_trace(record.trace_id)
        if refreshed_trace is not None and refreshed_trace.outcome is not None:
            delta["outcome"] = refreshed_trace.outcome.kind
            if refreshed_trace.outcome.kind == "crashed":
                delta["crash_kind"] = refreshed_trace.outcome.crash_kind.value
        deltas.append(delta)
    cluster.restore(snap)

    initial = len(suite)
    reached: set = set()
    for seed_id in suite:
        record = store.trace_record(seed_id)
        if record is not None:
            reached |= record.probe_set & diff.changed

    iterations = 0
    if suite:
        graph = build_call_graph(new_apps)
        known = set(graph.nodes)
        dists = shortest_distances(graph, {t for t in diff.changed if t in known})
        rng = random.Random(rng_seed)
        corpus = list(suite)
        for it in range(budget):
            iterations += 1
            ranked = sorted(
                corpus,
                key=lambda sid: directed_priority(store.seeds[sid], store.trace_record(sid), dists),
            )
            parent = store.seeds[ranked[it % min(len(ranked), 4)]]
            args = list(parent.args)
            if not args:
                continue
            idx = rng.randrange(len(args))
            if not args[idx]:
                continue
            kind = draw_op_kind(rng, splice_ok=False)
            args[idx] = mutate(args[idx], MutationOp(kind), rng)
            candidate = Seed(
                seed_id=f"it{it}", app_id=parent.app_id, handler=parent.handler,
                args=tuple(args), created_at=cluster.now(), origin="mutation",
                app_version_id=cluster.deployments[parent.app_id].version_id,
            )
            mocks = store.mocks[parent.seed_id]
            outcome, trace, report = replay_run(cluster, candidate, mocks)
            app_digest = trace.app_digest(parent.app_id)
            observed.add((parent.app_id, app_digest))
            reached |= trace.probe_set & diff.changed
            seed = store.new_seed(parent.app_id, parent.handler, tuple(args), "mutation",
                                  candidate.app_version_id, cluster.now())
            mocks_eff = report.effective_mocks
            mocks_eff.seed_id = seed.seed_id
            decision = store.admit(seed, trace, isinstance(outcome, Crashed), mocks=mocks_eff)
            if decision.stored:
                corpus.append(seed.seed_id)
            if diff.changed and diff.changed <= reached:
                break

    distinct = len(observed)
    effectiveness = (distinct - initial) / initial if initial else 0.0
    return IterationReport(
        diff=sorted(list(t) for t in diff.changed),
        deleted=sorted(list(t) for t in diff.deleted),
        suite_a=sorted(suite_a),
        suite_b=sorted(suite_b),
        deltas=deltas,
        initial_seeds=initial,
        distinct_traces=distinct,
        effectiveness=effectiveness,
        reached_diff_blocks=sorted(list(t) for t in reached),
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# Taint verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaintCandidate:
    app_id: str
    handler: str
    param_index: int
    sink_id: str
    note: str = ""  # provenance from the upstream static analyzer


@dataclass(frozen=True)
class TaintWitness:
    mutant_i: int
    args_i: tuple
    sink_i: tuple
    mutant_j: int
    args_j: tuple
    sink_j: tuple


@dataclass(frozen=True)
class TaintVerdict:
    verdict: str  # "confirmed" | "uncertain"
    witness: TaintWitness | None
    mutants_used: int
    annotation: str = ""

    def to_json(self) -> dict:
        doc = {"verdict": self.verdict, "mutants_used": self.mutants_used}
        if self.annotation:
            doc["annotation"] = self.annotation
        if self.witness is not None:
            doc["witness"] = {
                "mutant_i": self.witness.mutant_i,
                "mutant_j": self.witness.mutant_j,
            }
        return doc


def _sink_values(observations, sink_id: str) -> tuple:
    return tuple(v for sid, v in observations if sid == sink_id)


def _tuples_equal(a: tuple, b: tuple) -> bool:
    from .appmodel import value_eq

    return len(a) == len(b) and all(value_eq(x, y) for x, y in zip(a, b))


def verify_taint(cluster: Cluster, store: SeedStore, candidate: TaintCandidate, k: int, rng_seed: int = 0) -> TaintVerdict:
    """Variable-controlling check of a <source, sink> candidate.

    Mutates only the source parameter of a seed whose trace reaches the
    source handler's entry, replaying everything else from the seed's mocks
    on an isolated snapshot per mutant.  Confirmed iff two mutants observe
    different sink values; an unobserved sink stays uncertain.
    """
    app = cluster.deployments.get(candidate.app_id)
    if app is None:
        raise NoReachingSeed(f"app {candidate.app_id!r} not deployed")
    entry_block = app.handler(candidate.handler).entry
    entry_probe = (candidate.app_id, candidate.handler, entry_block)
    reaching = [
        s for s in store.seeds_for(candidate.app_id)
        if s.handler == candidate.handler
        and len(s.args) > candidate.param_index
        and (rec := store.trace_record(s.seed_id)) is not None
        and entry_probe in rec.probe_set
    ]
    if not reaching:
        raise NoReachingSeed(f"no stored trace reaches {candidate.app_id}.{candidate.handler} entry")
    base = reaching[0]
    mocks = store.mocks[base.seed_id]
    rng = random.Random(rng_seed)
    snap = cluster.snapshot()
    runs: list[tuple[int, tuple, tuple]] = []  # (mutant index, args, sink values)
    prev_arg = base.args[candidate.param_index]
    used = 0
    try:
        for i in range(k):
            used = i + 1
            args = list(base.args)
            data = args[candidate.param_index]
            splice_ok = min(len(data), len(prev_arg)) >= 2 and data != prev_arg
            kind = draw_op_kind(rng, splice_ok)
            op = MutationOp(kind, other=prev_arg if kind is OpKind.SPLICE else None)
            args[candidate.param_index] = mutate(data, op, rng) if data else data
            prev_arg = args[candidate.param_index]
            mutant = Seed(
                seed_id=f"t{i}", app_id=base.app_id, handler=base.handler,
                args=tuple(args), created_at=cluster.now(), origin="mutation",
                app_version_id=base.app_version_id,
            )
            cluster.restore(snap)
            _, _, report = replay_run(cluster, mutant, mocks)
            sink = _sink_values(report.observations, candidate.sink_id)
            if not sink:
                continue
            for j, jargs, jsink in runs:
                if not _tuples_equal(sink, jsink):
                    witness = TaintWitness(j, jargs, jsink, i, tuple(args), sink)
                    return TaintVerdict("confirmed", witness, used)
            runs.append((i, tuple(args), sink))
    finally:
        cluster.restore(snap)
    if not runs:
        return TaintVerdict("uncertain", None, used, annotation="SinkNeverObserved")
    return TaintVerdict("uncertain", None, used)
