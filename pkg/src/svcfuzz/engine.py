"""The fuzzing loop: seed selection, mutation, mocked execution, trace
collection, and analysis — runnable sequentially or as five decoupled
pipeline stages over bounded queues.

Both modes share the same stage functions; pipeline mode runs one worker
thread per stage so execution never waits on splicing and analysis.  An
item ledger asserts the exactly-once contract: every selected work item
traverses each stage exactly once, even when the switch turns off mid-run
and the queues drain.
"""
from __future__ import annotations

import queue
import random
import threading
import time
from dataclasses import dataclass, field

from .cluster import Cluster
from .interp import DEFAULT_STEP_BUDGET, Crashed
from .mocking import replay_invoke
from .monitor import Monitor, SwitchPolicy
from .mutation import MutationOp, OpKind, draw_op_kind, mutate
from .seedstore import EmptyStore, Seed, SeedStore
from .tracing import digest_hex

STAGES = ("select", "mutate", "execute", "collect", "analyze")


@dataclass
class CampaignConfig:
    target_app: str
    budget: int = 100
    mode: str = "sequential"  # "sequential" | "pipeline"
    rng_seed: int = 0
    queue_depth: int = 8
    strategy: str = "weighted"  # "weighted" | "round_robin"
    policy: SwitchPolicy = field(default_factory=SwitchPolicy)
    switch_enabled: bool = True
    stage_latency: dict = field(default_factory=dict)  # stage -> seconds, for measurement runs
    stats_every: int = 0
    measure_timing: bool = False
    step_budget: int = DEFAULT_STEP_BUDGET
    deadline_s: float | None = None

    def validate(self) -> None:
        if self.mode not in ("sequential", "pipeline"):
            raise ValueError(f"mode must be sequential|pipeline, got {self.mode!r}")
        if self.strategy not in ("weighted", "round_robin"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.budget < 0 or self.queue_depth < 1:
            raise ValueError("budget must be >= 0 and queue depth >= 1")
        for stage in self.stage_latency:
            if stage not in STAGES:
                raise ValueError(f"unknown stage {stage!r} in stage_latency")


def select_seed(seeds: list[Seed], digest_freq: dict, strategy: str, rng: random.Random, rotation: list) -> Seed:
    """Pick the next parent seed from a store snapshot.

    The default strategy weights each seed by 1/(campaign frequency of its
    digest); candidates are ordered newest-first so equal weights favor
    recent seeds.  ``round_robin`` rotates strictly in admission order.
    """
    if not seeds:
        raise EmptyStore("no seeds to select from")
    if strategy == "round_robin":
        ordered = sorted(seeds, key=lambda s: (s.created_at, s.seed_id))
        seed = ordered[rotation[0] % len(ordered)]
        rotation[0] += 1
        return seed
    ordered = sorted(seeds, key=lambda s: (-s.created_at, s.seed_id))
    weights = [1.0 / max(1, digest_freq.get(s.cover_digest, 1)) for s in ordered]
    total = sum(weights)
    u = rng.random() * total
    acc = 0.0
    for seed, w in zip(ordered, weights):
        acc += w
        if u < acc:
            return seed
    return ordered[-1]


@dataclass
class WorkItem:
    index: int
    parent: Seed
    item_seed: int
    partner_args: tuple | None = None
    mutated_args: tuple | None = None
    op_kind: str | None = None
    candidate: Seed | None = None
    outcome: object = None
    trace_id: int | None = None
    replay_report: object = None
    trace: object = None
    app_digest: int | None = None
    decision: object = None


@dataclass
class CampaignReport:
    config: dict
    iterations: int = 0
    admissions: list = field(default_factory=list)
    crashes: dict = field(default_factory=dict)  # vul class -> kind -> site -> count
    coverage: list = field(default_factory=list)  # [n, covered blocks, distinct digests]
    switch_history: list = field(default_factory=list)
    stats_final: dict = field(default_factory=dict)
    stats_series: list = field(default_factory=list)
    divergent_items: int = 0
    failures: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    timing: dict | None = None

    def crash_count(self, vul_class: str | None = None) -> int:
        return sum(
            count
            for cls, kinds in self.crashes.items()
            if vul_class is None or cls == vul_class
            for sites in kinds.values()
            for count in sites.values()
        )

    def to_json(self) -> dict:
        doc = {
            "config": self.config,
            "iterations": self.iterations,
            "admissions": self.admissions,
            "crashes": self.crashes,
            "coverage": self.coverage,
            "switch_history": self.switch_history,
            "stats": self.stats_final,
            "stats_series": self.stats_series,
            "divergent_items": self.divergent_items,
            "failures": self.failures,
            "ledger": self.ledger,
        }
        if self.timing is not None:
            doc["timing"] = self.timing
        return doc


class Campaign:
    """One fuzzing campaign over a deployed cluster and admitted corpus."""

    def __init__(self, cluster: Cluster, store: SeedStore, monitor: Monitor, config: CampaignConfig):
        config.validate()
        self.cluster = cluster
        self.store = store
        self.monitor = monitor
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self.rotation = [0]
        self.ledger: dict[int, list[str]] = {}
        self.report = CampaignReport(config=self._config_json())
        self.selected = 0
        self._deadline = None
        self._stage_durations: dict[str, list[float]] = {}
        self.external_switch_poll = None  # optional callable -> "on"|"off"|None

    def _config_json(self) -> dict:
        cfg = self.config
        return {
            "target_app": cfg.target_app,
            "budget": cfg.budget,
            "mode": cfg.mode,
            "rng_seed": cfg.rng_seed,
            "queue_depth": cfg.queue_depth,
            "strategy": cfg.strategy,
            "switch_enabled": cfg.switch_enabled,
            "policy": {"t1": cfg.policy.t1, "t2": cfg.policy.t2,
                       "m_star": cfg.policy.m_star, "n_min": cfg.policy.n_min},
            "step_budget": cfg.step_budget,
        }

    def _mark(self, item: WorkItem, stage: str) -> None:
        self.ledger.setdefault(item.index, []).append(stage)

    def _latency(self, stage: str) -> None:
        delay = self.config.stage_latency.get(stage)
        if delay:
            time.sleep(delay)

    def _timed(self, stage: str, fn, *args):
        if not self.config.measure_timing:
            return fn(*args)
        started = time.perf_counter()
        try:
            return fn(*args)
        finally:
            self._stage_durations.setdefault(stage, []).append(time.perf_counter() - started)

    # -- stages ---------------------------------------------------------------

    def stage_select(self) -> WorkItem | None:
        self._latency("select")
        if not self.monitor.switch.is_on():
            return None
        if self._deadline is not None and time.monotonic() > self._deadline:
            return None
        if self.external_switch_poll is not None:
            state = self.external_switch_poll()
            if state in ("on", "off"):
                self.monitor.on_user(state)
                if state == "off":
                    return None
        seeds = self.store.seeds_for(self.config.target_app)
        parent = select_seed(seeds, self.monitor.stats._freq, self.config.strategy, self.rng, self.rotation)
        partner = seeds[self.rng.randrange(len(seeds))]
        item = WorkItem(
            index=self.selected,
            parent=parent,
            item_seed=self.rng.getrandbits(64),
            partner_args=partner.args if partner.handler == parent.handler else None,
        )
        self.selected += 1
        self._mark(item, "select")
        return item

    def stage_mutate(self, item: WorkItem) -> WorkItem:
        self._latency("mutate")
        rng = random.Random(item.item_seed)
        args = list(item.parent.args)
        if args:
            arg_idx = rng.randrange(len(args))
            data = args[arg_idx]
            partner = item.partner_args[arg_idx] if item.partner_args and arg_idx < len(item.partner_args) else None
            splice_ok = partner is not None and min(len(data), len(partner)) >= 2
            kind = draw_op_kind(rng, splice_ok) if data else OpKind.HAVOC
            op = MutationOp(kind, other=partner if kind is OpKind.SPLICE else None)
            args[arg_idx] = mutate(data, op, rng)
            item.op_kind = kind.value
        item.mutated_args = tuple(args)
        self._mark(item, "mutate")
        return item

    def stage_execute(self, item: WorkItem) -> WorkItem:
        self._latency("execute")
        mocks = self.store.mocks[item.parent.seed_id]
        candidate = Seed(
            seed_id=f"i{item.index}",
            app_id=item.parent.app_id,
            handler=item.parent.handler,
            args=item.mutated_args,
            created_at=self.cluster.now(),
            origin="mutation",
            app_version_id=self.cluster.deployments[item.parent.app_id].version_id,
        )
        item.candidate = candidate
        item.outcome, item.trace_id, item.replay_report = replay_invoke(self.cluster, candidate, mocks)
        self._mark(item, "execute")
        return item

    def stage_collect(self, item: WorkItem) -> WorkItem:
        self._latency("collect")
        item.trace = self.cluster.collector.collect_and_splice(item.trace_id)
        item.app_digest = item.trace.app_digest(self.config.target_app)
        self._mark(item, "collect")
        return item

    def stage_analyze(self, item: WorkItem) -> WorkItem:
        self._latency("analyze")
        is_crash = isinstance(item.outcome, Crashed)
        seed = self.store.new_seed(
            item.parent.app_id, item.parent.handler, item.mutated_args,
            "mutation", item.candidate.app_version_id, self.cluster.now(),
        )
        mocks = item.replay_report.effective_mocks
        mocks.seed_id = seed.seed_id
        item.decision = self.store.admit(seed, item.trace, is_crash, mocks=mocks)
        if item.decision.stored:
            self.report.admissions.append({
                "seed_id": seed.seed_id,
                "digest": digest_hex(item.decision.digest),
                "reason": item.decision.reason,
                "op": item.op_kind,
                "parent": item.parent.seed_id,
            })
        if is_crash:
            kind = item.outcome.kind
            site = "/".join(item.outcome.site) if item.outcome.site else "-"
            sites = self.report.crashes.setdefault(kind.vul_class, {}).setdefault(kind.value, {})
            sites[site] = sites.get(site, 0) + 1
        if item.replay_report.divergences:
            self.report.divergent_items += 1
        probes = item.trace.app_probe_set(self.config.target_app)
        self.monitor.ingest(
            item.app_digest, probes,
            stored_distinct=self.store.distinct_digest_count(self.config.target_app),
        )
        stats = self.monitor.stats
        self.report.coverage.append([stats.n, stats.s_n, stats.distinct_digests()])
        if self.config.stats_every and stats.n % self.config.stats_every == 0:
            self.report.stats_series.append(self.monitor.snapshot())
        self.report.iterations += 1
        self.cluster.advance_clock(0)  # apply version events / timers that came due
        self._mark(item, "analyze")
        return item

    # -- drivers ----------------------------------------------------------------

    def run(self) -> CampaignReport:
        if not self.store.seeds_for(self.config.target_app):
            raise EmptyStore(f"no admitted corpus for {self.config.target_app!r}")
        if self.config.deadline_s is not None:
            self._deadline = time.monotonic() + self.config.deadline_s
        started = time.perf_counter()
        if self.config.mode == "sequential":
            self._run_sequential()
        else:
            self._run_pipeline()
        elapsed = time.perf_counter() - started
        if self.monitor.switch.is_on():
            self.monitor.switch.turn("off", "budget", self.monitor.stats.n)
        self.report.switch_history = [
            {"state": t.state, "reason": t.reason, "at_n": t.at_n}
            for t in self.monitor.switch.history
        ]
        self.report.stats_final = self.monitor.stats.to_json()
        complete = all(list(stages) == list(STAGES) for stages in self.ledger.values())
        self.report.ledger = {
            "items": len(self.ledger),
            "complete": complete and len(self.ledger) == self.selected,
        }
        if self.config.measure_timing:
            stages = {}
            for stage, durations in sorted(self._stage_durations.items()):
                ordered = sorted(durations)
                stages[stage] = {
                    "count": len(ordered),
                    "mean_ms": 1000 * sum(ordered) / len(ordered),
                    "p50_ms": 1000 * ordered[len(ordered) // 2],
                    "max_ms": 1000 * ordered[-1],
                }
            done = self.report.iterations
            self.report.timing = {
                "elapsed_s": elapsed,
                "throughput_items_per_s": (done / elapsed) if elapsed > 0 else 0.0,
                # sequential: full per-iteration round trip; pipeline: completion interval
                "iteration_ms": (1000 * elapsed / done) if done else 0.0,
                "stages": stages,
            }
        return self.report

    def _run_sequential(self) -> None:
        for _ in range(self.config.budget):
            item = self._timed("select", self.stage_select)
            if item is None:
                break
            item = self._timed("mutate", self.stage_mutate, item)
            item = self._timed("execute", self.stage_execute, item)
            item = self._timed("collect", self.stage_collect, item)
            self._timed("analyze", self.stage_analyze, item)

    def _run_pipeline(self) -> None:
        depth = self.config.queue_depth
        queues = [queue.Queue(maxsize=depth) for _ in range(4)]

        def producer():
            try:
                for _ in range(self.config.budget):
                    item = self._timed("select", self.stage_select)
                    if item is None:
                        break
                    queues[0].put(item)
            except Exception as exc:
                self.report.failures.append(f"select: {exc!r}")
            finally:
                queues[0].put(None)

        def worker(stage_name, stage_fn, inbound, outbound):
            def loop():
                while True:
                    item = inbound.get()
                    if item is None:
                        break
                    try:
                        item = self._timed(stage_name, stage_fn, item)
                    except Exception as exc:  # drop the item; ledger exposes the gap
                        self.report.failures.append(f"{stage_name}: {exc!r}")
                        continue
                    if outbound is not None:
                        outbound.put(item)
                if outbound is not None:
                    outbound.put(None)
            return loop

        threads = [threading.Thread(target=producer, name="select")]
        stage_fns = [self.stage_mutate, self.stage_execute, self.stage_collect, self.stage_analyze]
        for i, fn in enumerate(stage_fns):
            outbound = queues[i + 1] if i + 1 < len(queues) else None
            threads.append(
                threading.Thread(target=worker(STAGES[i + 1], fn, queues[i], outbound), name=STAGES[i + 1])
            )
        for t in threads:
            t.start()
        for t in threads:
            t.join()


def run_campaign(cluster: Cluster, store: SeedStore, monitor: Monitor, config: CampaignConfig) -> CampaignReport:
    return Campaign(cluster, store, monitor, config).run()


def admit_corpus(cluster: Cluster, store: SeedStore, entries, origin: str = "traffic",
                 monitor: Monitor | None = None) -> list[Seed]:
    """Record and admit an initial corpus (e.g. captured traffic) into the store.

    Corpus executions count toward the monitor's tracking factors when one
    is supplied (keeps C <= n: stored digests never outrun observed runs).
    """
    from .mocking import record_run

    admitted = []
    for entry in entries:
        seed = store.new_seed(
            entry.app_id, entry.handler, entry.args, origin,
            cluster.deployments[entry.app_id].version_id, cluster.now(),
        )
        outcome, trace, mocks = record_run(cluster, seed)
        decision = store.admit(seed, trace, isinstance(outcome, Crashed), mocks=mocks)
        if decision.stored:
            admitted.append(seed)
        if monitor is not None:
            monitor.ingest(
                trace.app_digest(entry.app_id), trace.app_probe_set(entry.app_id),
                stored_distinct=store.distinct_digest_count(entry.app_id),
            )
    return admitted


def default_corpus(cluster: Cluster, target_app: str):
    """Fallback corpus when a scenario supplies none: one all-zero seed per handler."""
    from .cluster import CorpusEntry

    app = cluster.deployments[target_app]
    return [
        CorpusEntry(target_app, h.name, tuple(b"\x00\x00\x00\x00" for _ in h.params))
        for h in app.handlers
    ]
