"""Seed and mock databases: digest-indexed admission, refresh, life-cycle.

Admission keeps one seed per coverage digest per App (first wins), plus a
crash corpus keyed by (crash kind, crashing block).  Refresh re-executes
every stored seed with mocking disabled to re-record its mocks against the
latest deployed versions; seeds whose digest changed are flagged
inconsistent, which feeds the campaign switch.
"""
from __future__ import annotations

import json
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .appmodel import CrashKind
from .cluster import Cluster
from .mocking import MockSet, load_mock_set, record_run, save_mock_set
from .tracing import Trace, digest_hex

DEFAULT_TTL_MS = 3 * 24 * 3600 * 1000  # seeds live three virtual days
DEFAULT_REFRESH_INTERVAL_MS = 12 * 3600 * 1000
DEFAULT_CLEANUP_INTERVAL_MS = 24 * 3600 * 1000


class EmptyStore(LookupError):
    pass


@dataclass
class Seed:
    seed_id: str
    app_id: str
    handler: str
    args: tuple[bytes, ...]
    created_at: int
    origin: str  # "traffic" | "mutation" | "refresh"
    app_version_id: str
    cover_digest: int | None = None


@dataclass(frozen=True)
class TraceRecord:
    seed_id: str
    trace_id: int
    cover_digest: int  # whole-request digest
    app_digest: int  # digest over the seed's target-App probe subset
    probe_set: frozenset
    app_version_id: str


@dataclass(frozen=True)
class AdmitDecision:
    stored: bool
    reason: str  # "new_digest" | "new_crash" | "duplicate"
    digest: int
    crash_key: tuple | None = None


@dataclass
class RefreshReport:
    app_id: str
    refreshed: int = 0
    inconsistent: list = field(default_factory=list)  # (seed_id, old_digest, new_digest)
    errors: list = field(default_factory=list)

    @property
    def has_inconsistency(self) -> bool:
        return bool(self.inconsistent)


class SeedStore:
    """Single-writer seed database with digest and crash indexes."""

    def __init__(self, collector=None):
        self.collector = collector
        self.seeds: dict[str, Seed] = {}
        self.mocks: dict[str, MockSet] = {}
        self.traces: dict[str, TraceRecord] = {}
        self.digest_index: dict[str, dict[int, str]] = {}
        self.crash_index: dict[tuple, str] = {}
        self.refresh_log: list[RefreshReport] = []
        self._counter = 0
        self._lock = threading.RLock()

    # -- construction -------------------------------------------------------

    def new_seed(self, app_id: str, handler: str, args, origin: str, version_id: str, created_at: int) -> Seed:
        with self._lock:
            self._counter += 1
            return Seed(f"s{self._counter:06d}", app_id, handler, tuple(args), created_at, origin, version_id)

    # -- queries --------------------------------------------------------------

    def apps_with_seeds(self) -> list[str]:
        with self._lock:
            return sorted({s.app_id for s in self.seeds.values()})

    def seeds_for(self, app_id: str) -> list[Seed]:
        with self._lock:
            return sorted((s for s in self.seeds.values() if s.app_id == app_id), key=lambda s: s.seed_id)

    def all_seeds(self) -> list[Seed]:
        with self._lock:
            return sorted(self.seeds.values(), key=lambda s: s.seed_id)

    def trace_record(self, seed_id: str) -> TraceRecord | None:
        with self._lock:
            return self.traces.get(seed_id)

    def distinct_digest_count(self, app_id: str) -> int:
        with self._lock:
            return len(self.digest_index.get(app_id, {}))

    # -- admission ------------------------------------------------------------

    def admit(self, seed: Seed, trace: Trace, is_crash: bool, mocks: MockSet | None = None) -> AdmitDecision:
        """Store the seed iff its digest is new for the campaign, or it crashed
        at a (kind, block) pair not seen before."""
        digest = trace.app_digest(seed.app_id)
        if self.collector is not None:
            self.collector.report_new_digest(digest)
        with self._lock:
            new_digest = digest not in self.digest_index.get(seed.app_id, {})
            crash_key = None
            if is_crash and trace.outcome is not None and trace.outcome.crash_kind is not None:
                crash_key = (trace.outcome.crash_kind, trace.outcome.crash_site)
            if new_digest:
                reason = "new_digest"
            elif crash_key is not None and crash_key not in self.crash_index:
                reason = "new_crash"
            else:
                return AdmitDecision(False, "duplicate", digest, crash_key)
            seed.cover_digest = digest
            self.seeds[seed.seed_id] = seed
            if mocks is not None:
                self.mocks[seed.seed_id] = mocks
            self.traces[seed.seed_id] = TraceRecord(
                seed.seed_id, trace.trace_id, trace.cover_digest, digest,
                trace.probe_set, seed.app_version_id,
            )
            index = self.digest_index.setdefault(seed.app_id, {})
            if digest not in index:
                index[digest] = seed.seed_id
            if crash_key is not None and crash_key not in self.crash_index:
                self.crash_index[crash_key] = seed.seed_id
            return AdmitDecision(True, reason, digest, crash_key)

    # -- refresh ---------------------------------------------------------------

    def refresh_seed(self, cluster: Cluster, seed: Seed) -> tuple[int | None, int]:
        """Re-record one seed with real calls; returns (old digest, new digest)."""
        outcome, trace, mocks = record_run(cluster, seed)
        old = seed.cover_digest
        new = trace.app_digest(seed.app_id)
        with self._lock:
            index = self.digest_index.setdefault(seed.app_id, {})
            if old is not None and index.get(old) == seed.seed_id and old != new:
                del index[old]
                if self.collector is not None:
                    self.collector.forget_digest(old)
            if new not in index:
                index[new] = seed.seed_id
            seed.cover_digest = new
            seed.app_version_id = cluster.deployments[seed.app_id].version_id
            seed.origin = "refresh"
            self.mocks[seed.seed_id] = mocks
            self.traces[seed.seed_id] = TraceRecord(
                seed.seed_id, trace.trace_id, trace.cover_digest, new,
                trace.probe_set, seed.app_version_id,
            )
        if self.collector is not None:
            self.collector.report_new_digest(new)
        return old, new

    def refresh_all(self, cluster: Cluster, app_id: str) -> RefreshReport:
        """Re-record every stored seed of one App with mocking disabled.

        Each seed runs from the same pre-refresh snapshot so refresh is
        idempotent on a quiescent cluster; the snapshot is restored afterwards.
        """
        report = RefreshReport(app_id)
        snap = cluster.snapshot()
        try:
            for seed in self.seeds_for(app_id):
                cluster.restore(snap)
                try:
                    old, new = self.refresh_seed(cluster, seed)
                except Exception as exc:  # per-seed failures never abort the sweep
                    report.errors.append((seed.seed_id, repr(exc)))
                    continue
                report.refreshed += 1
                if old is not None and old != new:
                    report.inconsistent.append((seed.seed_id, old, new))
        finally:
            cluster.restore(snap)
        with self._lock:
            self.refresh_log.append(report)
        return report

    # -- life-cycle --------------------------------------------------------------

    def cleanup(self, now: int, ttl_ms: int = DEFAULT_TTL_MS) -> int:
        """Delete every seed older than the ttl together with its mocks."""
        with self._lock:
            doomed = [s for s in self.seeds.values() if s.created_at <= now - ttl_ms]
            for seed in doomed:
                del self.seeds[seed.seed_id]
                self.mocks.pop(seed.seed_id, None)
                self.traces.pop(seed.seed_id, None)
                index = self.digest_index.get(seed.app_id, {})
                for digest, sid in list(index.items()):
                    if sid == seed.seed_id:
                        del index[digest]
                        if self.collector is not None:
                            self.collector.forget_digest(digest)
                for key, sid in list(self.crash_index.items()):
                    if sid == seed.seed_id:
                        del self.crash_index[key]
            return len(doomed)


@dataclass
class TriggerHandle:
    refresh_timer: object
    cleanup_timer: object

    def cancel(self, cluster: Cluster) -> None:
        cluster.cancel_timer(self.refresh_timer)
        cluster.cancel_timer(self.cleanup_timer)


def schedule_triggers(
    store: SeedStore,
    cluster: Cluster,
    refresh_interval_ms: int = DEFAULT_REFRESH_INTERVAL_MS,
    cleanup_interval_ms: int = DEFAULT_CLEANUP_INTERVAL_MS,
    ttl_ms: int = DEFAULT_TTL_MS,
    on_report=None,
) -> TriggerHandle:
    """Wire the refresh event listener and the two periodic virtual-time tasks.

    A version event triggers an immediate refresh and resets the periodic
    refresh timer so the next sweep runs one full interval later.
    """

    def run_refresh() -> None:
        for app_id in store.apps_with_seeds():
            report = store.refresh_all(cluster, app_id)
            if on_report is not None:
                on_report(report)

    def on_version_event(event) -> None:
        run_refresh()
        refresh_timer.reset(event.event_time + refresh_interval_ms)

    def run_cleanup() -> None:
        store.cleanup(cluster.now(), ttl_ms)

    refresh_timer = cluster.schedule_every(refresh_interval_ms, run_refresh, "seed-refresh")
    cleanup_timer = cluster.schedule_every(cleanup_interval_ms, run_cleanup, "seed-cleanup")
    cluster.subscribe_version_events(on_version_event)
    return TriggerHandle(refresh_timer, cleanup_timer)


# ---------------------------------------------------------------------------
# Persistence: seeds/<app>/<seed_id>.json, mocks/<seed_id>.json, index/digests.json
# ---------------------------------------------------------------------------

def _seed_to_json(seed: Seed, record: TraceRecord | None) -> dict:
    doc = {
        "seed_id": seed.seed_id,
        "app": seed.app_id,
        "handler": seed.handler,
        "args": ["0x" + a.hex() for a in seed.args],
        "created_at": seed.created_at,
        "origin": seed.origin,
        "version": seed.app_version_id,
        "cover_digest": digest_hex(seed.cover_digest) if seed.cover_digest is not None else None,
    }
    if record is not None:
        doc["trace"] = {
            "trace_id": record.trace_id,
            "cover_digest": digest_hex(record.cover_digest),
            "app_digest": digest_hex(record.app_digest),
            "probe_set": sorted(list(p) for p in record.probe_set),
        }
    return doc


def save_store(store: SeedStore, root: str | Path) -> None:
    root = Path(root)
    for sub in ("seeds", "mocks"):
        if (root / sub).is_dir():
            shutil.rmtree(root / sub)
    (root / "index").mkdir(parents=True, exist_ok=True)
    for seed in store.all_seeds():
        app_dir = root / "seeds" / seed.app_id
        app_dir.mkdir(parents=True, exist_ok=True)
        doc = _seed_to_json(seed, store.trace_record(seed.seed_id))
        (app_dir / f"{seed.seed_id}.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
        mocks = store.mocks.get(seed.seed_id)
        if mocks is not None:
            mocks_dir = root / "mocks"
            mocks_dir.mkdir(parents=True, exist_ok=True)
            save_mock_set(mocks_dir / f"{seed.seed_id}.json", mocks)
    index_doc = {
        "digests": {
            app: {digest_hex(d): sid for d, sid in index.items()}
            for app, index in store.digest_index.items()
        },
        "crashes": {
            f"{kind.value}@{'/'.join(site) if site else '-'}": sid
            for (kind, site), sid in store.crash_index.items()
        },
        "counter": store._counter,
    }
    (root / "index" / "digests.json").write_text(json.dumps(index_doc, indent=1, sort_keys=True), encoding="utf-8")


def load_store(root: str | Path, collector=None) -> SeedStore:
    root = Path(root)
    store = SeedStore(collector)
    seeds_dir = root / "seeds"
    if seeds_dir.is_dir():
        for path in sorted(seeds_dir.glob("*/*.json")):
            doc = json.loads(path.read_text(encoding="utf-8"))
            seed = Seed(
                seed_id=doc["seed_id"],
                app_id=doc["app"],
                handler=doc["handler"],
                args=tuple(bytes.fromhex(a[2:]) for a in doc["args"]),
                created_at=doc["created_at"],
                origin=doc["origin"],
                app_version_id=doc["version"],
                cover_digest=int(doc["cover_digest"], 16) if doc.get("cover_digest") else None,
            )
            store.seeds[seed.seed_id] = seed
            if "trace" in doc:
                t = doc["trace"]
                store.traces[seed.seed_id] = TraceRecord(
                    seed.seed_id, t["trace_id"], int(t["cover_digest"], 16), int(t["app_digest"], 16),
                    frozenset(tuple(p) for p in t["probe_set"]), seed.app_version_id,
                )
            mock_path = root / "mocks" / f"{seed.seed_id}.json"
            if mock_path.exists():
                store.mocks[seed.seed_id] = load_mock_set(mock_path)
    index_path = root / "index" / "digests.json"
    if index_path.exists():
        doc = json.loads(index_path.read_text(encoding="utf-8"))
        store.digest_index = {
            app: {int(h, 16): sid for h, sid in index.items()}
            for app, index in doc.get("digests", {}).items()
        }
        for key, sid in doc.get("crashes", {}).items():
            kind_raw, _, site_raw = key.partition("@")
            site = tuple(site_raw.split("/")) if site_raw and site_raw != "-" else None
            store.crash_index[(CrashKind(kind_raw), site)] = sid
        store._counter = doc.get("counter", len(store.seeds))
    return store
