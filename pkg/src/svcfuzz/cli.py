"""Command-line front end: campaign control, seed store maintenance,
iteration testing, taint verification, and report rendering.

Exit codes: 0 success, 1 usage error, 2 campaign found crash findings
(machine-readable gate for CI pipelines).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .cluster import load_scenario
from .engine import Campaign, CampaignConfig, admit_corpus, default_corpus
from .monitor import Monitor, SwitchPolicy
from .scenarios import TaintCandidate, run_iteration_test, verify_taint
from .seedstore import SeedStore, load_store, save_store, schedule_triggers
from .tracing import digest_hex

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FINDINGS = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CI gate needs that code, so
    usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _parse_budget(text: str) -> tuple[int, float | None]:
    """'500' means iterations; '30s' means a wall-clock deadline."""
    if text.endswith("s"):
        return 1 << 30, float(text[:-1])
    return int(text), None


def build_parser() -> _Parser:
    parser = _Parser(prog="svcfuzz", description="Coverage-guided fuzzing for simulated service clusters")
    sub = parser.add_subparsers(dest="command", required=True)

    fuzz = sub.add_parser("fuzz", parents=[], help="campaign control")
    fuzz_sub = fuzz.add_subparsers(dest="fuzz_command", required=True)
    run = fuzz_sub.add_parser("run", help="run a fuzzing campaign")
    run.add_argument("--scenario", required=True, help="cluster scenario file")
    run.add_argument("--app", required=True, help="target app id")
    run.add_argument("--budget", default="100", help="iterations, or seconds with 's' suffix")
    run.add_argument("--mode", choices=["pipeline", "sequential"], default="sequential")
    run.add_argument("--seed", type=int, default=None, help="campaign rng seed (overrides scenario)")
    run.add_argument("--out", default="campaign-out", help="output directory")
    run.add_argument("--queue-depth", type=int, default=8)
    run.add_argument("--step-budget", type=int, default=100_000)
    run.add_argument("--strategy", choices=["weighted", "round_robin"], default="weighted")
    run.add_argument("--t1", type=float, default=0.01)
    run.add_argument("--t2", type=float, default=0.005)
    run.add_argument("--m-star", type=int, default=None)
    run.add_argument("--n-min", type=int, default=200)
    run.add_argument("--no-switch", action="store_true", help="disable the saturation switch")
    run.add_argument("--stats-every", type=int, default=0)
    run.add_argument("--measure-timing", action="store_true")
    run.add_argument("--refresh-interval-h", type=float, default=12.0)
    run.add_argument("--cleanup-interval-h", type=float, default=24.0)

    replay = sub.add_parser("replay", help="replay one stored seed with its mocks")
    replay.add_argument("--scenario", required=True)
    replay.add_argument("--store", required=True)
    replay.add_argument("--seed-id", required=True)

    store_p = sub.add_parser("seedstore", help="seed store maintenance")
    store_sub = store_p.add_subparsers(dest="store_command", required=True)
    ls = store_sub.add_parser("ls", help="list stored seeds")
    ls.add_argument("--store", required=True)
    ls.add_argument("--app", default=None)
    rm = store_sub.add_parser("rm", help="remove a seed")
    rm.add_argument("--store", required=True)
    rm.add_argument("--seed-id", required=True)
    refresh = store_sub.add_parser("refresh", help="re-record all seeds for an app")
    refresh.add_argument("--store", required=True)
    refresh.add_argument("--scenario", required=True)
    refresh.add_argument("--app", required=True)

    iterate = sub.add_parser("iterate", help="iteration testing between two versions")
    iterate.add_argument("--old", required=True, help="scenario of the old version")
    iterate.add_argument("--new", required=True, help="scenario of the new version")
    iterate.add_argument("--budget", type=int, default=1000)
    iterate.add_argument("--seed", type=int, default=None, help="rng seed (overrides the scenario)")
    iterate.add_argument("--out", default=None, help="write the iteration report here")

    taint = sub.add_parser("taint", help="taint verification")
    taint_sub = taint.add_subparsers(dest="taint_command", required=True)
    verify = taint_sub.add_parser("verify", help="verify <source, sink> candidates")
    verify.add_argument("--candidates", required=True, help="JSON list of candidates")
    verify.add_argument("-k", type=int, default=100, help="mutants per candidate")
    verify.add_argument("--scenario", required=True)
    verify.add_argument("--seed", type=int, default=None, help="rng seed (overrides the scenario)")
    verify.add_argument("--out", default=None)

    report = sub.add_parser("report", help="render a campaign report")
    report.add_argument("path", help="campaign report JSON")

    switch = sub.add_parser("switch", help="manual campaign switch")
    switch.add_argument("state", choices=["on", "off"])
    switch.add_argument("--out", required=True, help="campaign output directory")

    return parser


def _dump_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _switch_file_poll(out_dir: Path):
    path = out_dir / "switch.json"

    def poll():
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8")).get("state")
        except (OSError, json.JSONDecodeError):
            return None

    return poll


def _cmd_fuzz_run(args) -> int:
    scenario = load_scenario(args.scenario)
    cluster = scenario.build_cluster(seed_override=args.seed, step_budget=args.step_budget)
    if args.app not in cluster.deployments:
        print(f"error: app {args.app!r} not in scenario", file=sys.stderr)
        return EXIT_USAGE
    store = SeedStore(cluster.collector)
    budget, deadline = _parse_budget(args.budget)
    rng_seed = args.seed if args.seed is not None else scenario.rng_seed
    app = cluster.deployments[args.app]
    monitor = Monitor(
        app.block_count(),
        SwitchPolicy(t1=args.t1, t2=args.t2, m_star=args.m_star, n_min=args.n_min),
        enabled=not args.no_switch,
    )
    corpus = scenario.corpus or default_corpus(cluster, args.app)
    admit_corpus(cluster, store, [c for c in corpus if c.app_id == args.app], monitor=monitor)
    cluster.subscribe_version_events(monitor.on_version_event)
    schedule_triggers(
        store, cluster,
        refresh_interval_ms=int(args.refresh_interval_h * 3600 * 1000),
        cleanup_interval_ms=int(args.cleanup_interval_h * 3600 * 1000),
        on_report=lambda report: monitor.on_inconsistency(report) if report.has_inconsistency else None,
    )
    config = CampaignConfig(
        target_app=args.app,
        budget=budget,
        deadline_s=deadline,
        mode=args.mode,
        rng_seed=rng_seed,
        queue_depth=args.queue_depth,
        strategy=args.strategy,
        policy=monitor.policy,
        switch_enabled=not args.no_switch,
        stats_every=args.stats_every,
        measure_timing=args.measure_timing,
        step_budget=args.step_budget,
    )
    out_dir = Path(args.out)
    campaign = Campaign(cluster, store, monitor, config)
    campaign.external_switch_poll = _switch_file_poll(out_dir)
    report = campaign.run()
    _dump_json(out_dir / "report.json", report.to_json())
    save_store(store, out_dir / "store")
    print(f"iterations={report.iterations} admissions={len(report.admissions)} "
          f"crashes={report.crash_count()} report={out_dir / 'report.json'}")
    return EXIT_FINDINGS if report.crash_count() > 0 else EXIT_OK


def _cmd_replay(args) -> int:
    scenario = load_scenario(args.scenario)
    cluster = scenario.build_cluster()
    store = load_store(args.store, cluster.collector)
    seed = store.seeds.get(args.seed_id)
    if seed is None:
        print(f"error: seed {args.seed_id!r} not in store", file=sys.stderr)
        return EXIT_USAGE
    from .mocking import replay_run

    outcome, trace, report = replay_run(cluster, seed, store.mocks[seed.seed_id])
    print(json.dumps({
        "seed_id": seed.seed_id,
        "outcome": type(outcome).__name__,
        "app_digest": digest_hex(trace.app_digest(seed.app_id)),
        "divergences": len(report.divergences),
        "substituted": report.substituted,
    }, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_seedstore(args) -> int:
    if args.store_command == "ls":
        store = load_store(args.store)
        for seed in store.all_seeds():
            if args.app and seed.app_id != args.app:
                continue
            digest = digest_hex(seed.cover_digest) if seed.cover_digest is not None else "-"
            print(f"{seed.seed_id} app={seed.app_id} handler={seed.handler} "
                  f"origin={seed.origin} digest={digest} created_at={seed.created_at}")
        return EXIT_OK
    if args.store_command == "rm":
        store = load_store(args.store)
        if args.seed_id not in store.seeds:
            print(f"error: seed {args.seed_id!r} not in store", file=sys.stderr)
            return EXIT_USAGE
        seed = store.seeds.pop(args.seed_id)
        store.mocks.pop(args.seed_id, None)
        store.traces.pop(args.seed_id, None)
        index = store.digest_index.get(seed.app_id, {})
        for digest, sid in list(index.items()):
            if sid == args.seed_id:
                del index[digest]
        save_store(store, args.store)
        print(f"removed {args.seed_id}")
        return EXIT_OK
    # refresh
    scenario = load_scenario(args.scenario)
    cluster = scenario.build_cluster()
    store = load_store(args.store, cluster.collector)
    report = store.refresh_all(cluster, args.app)
    save_store(store, args.store)
    print(f"refreshed={report.refreshed} inconsistent={len(report.inconsistent)} errors={len(report.errors)}")
    return EXIT_OK


def _bootstrap_store(scenario_path: str, rng_seed: int | None):
    scenario = load_scenario(scenario_path)
    cluster = scenario.build_cluster(seed_override=rng_seed)
    effective_seed = rng_seed if rng_seed is not None else scenario.rng_seed
    store = SeedStore(cluster.collector)
    corpus = scenario.corpus
    if not corpus:
        for app_id in sorted(cluster.deployments):
            corpus.extend(default_corpus(cluster, app_id))
    admit_corpus(cluster, store, corpus)
    return scenario, cluster, store, effective_seed


def _cmd_iterate(args) -> int:
    old_scenario, cluster, store, rng_seed = _bootstrap_store(args.old, args.seed)
    new_scenario = load_scenario(args.new)
    report = run_iteration_test(
        cluster, store, old_scenario.apps, new_scenario.apps, args.budget, rng_seed=rng_seed,
    )
    doc = report.to_json()
    if args.out:
        _dump_json(Path(args.out), doc)
    print(json.dumps(doc, indent=1, sort_keys=True))
    crashed = any("crash_kind" in d for d in report.deltas)
    return EXIT_FINDINGS if crashed else EXIT_OK


def _cmd_taint(args) -> int:
    _, cluster, store, rng_seed = _bootstrap_store(args.scenario, args.seed)
    raw = json.loads(Path(args.candidates).read_text(encoding="utf-8"))
    results = []
    for c in raw:
        candidate = TaintCandidate(c["app"], c["handler"], int(c["param_index"]), c["sink_id"],
                                   c.get("note", ""))
        verdict = verify_taint(cluster, store, candidate, args.k, rng_seed=rng_seed)
        doc = verdict.to_json()
        doc["candidate"] = {"app": candidate.app_id, "handler": candidate.handler,
                            "param_index": candidate.param_index, "sink_id": candidate.sink_id}
        results.append(doc)
    out = {"results": results, "confirmed": sum(1 for r in results if r["verdict"] == "confirmed")}
    if args.out:
        _dump_json(Path(args.out), out)
    print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    doc = json.loads(Path(args.path).read_text(encoding="utf-8"))
    lines = [
        f"campaign report: {args.path}",
        f"  target app   : {doc['config']['target_app']}",
        f"  mode         : {doc['config']['mode']}  rng seed: {doc['config']['rng_seed']}",
        f"  iterations   : {doc['iterations']}",
        f"  admissions   : {len(doc['admissions'])}",
        f"  divergent    : {doc['divergent_items']}",
    ]
    stats = doc.get("stats", {})
    if stats:
        lines.append(
            f"  coverage     : {stats.get('s_n')}/{stats.get('s_hat')} blocks, "
            f"f1={stats.get('f1')} f2={stats.get('f2')} C={stats.get('c')}"
        )
    crashes = doc.get("crashes", {})
    total = 0
    for vul_class in sorted(crashes):
        for kind in sorted(crashes[vul_class]):
            count = sum(crashes[vul_class][kind].values())
            total += count
            lines.append(f"  crash        : [{vul_class}] {kind} x{count}")
    lines.append(f"  crash total  : {total}")
    for t in doc.get("switch_history", []):
        lines.append(f"  switch       : {t['state']} ({t['reason']}) at n={t['at_n']}")
    print("\n".join(lines))
    return EXIT_OK


def _cmd_switch(args) -> int:
    out_dir = Path(args.out)
    _dump_json(out_dir / "switch.json", {"state": args.state, "reason": "user"})
    print(f"switch {args.state} recorded in {out_dir / 'switch.json'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "fuzz":
            return _cmd_fuzz_run(args)
        if args.command == "replay":
            return _cmd_replay(args)
        if args.command == "seedstore":
            return _cmd_seedstore(args)
        if args.command == "iterate":
            return _cmd_iterate(args)
        if args.command == "taint":
            return _cmd_taint(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "switch":
            return _cmd_switch(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
