# Run a coverage-guided campaign against a small branch maze and watch the
# saturation estimators turn the campaign switch off once nothing new is
# being discovered.

import json

from svcfuzz import (
    Campaign,
    CampaignConfig,
    Cluster,
    CorpusEntry,
    Monitor,
    SeedStore,
    SwitchPolicy,
    admit_corpus,
    parse_app_spec,
)


def maze(levels=3):
    blocks = {
        "b0": {"stmts": [], "term": {"kind": "branch",
                                     "cond": {"op": "ge", "args": [{"op": "len", "args": [{"var": "x"}]}, levels]},
                                     "then": "l0", "else": "short"}},
        "short": {"stmts": [], "term": {"kind": "return", "expr": "0x"}},
        "end": {"stmts": [], "term": {"kind": "return", "expr": 0}},
    }
    for i in range(levels):
        nxt = f"l{i + 1}" if i + 1 < levels else "end"
        byte_i = {"op": "int_le", "args": [{"op": "concat", "args": [
            {"op": "slice", "args": [{"var": "x"}, i, i + 1]}, "0x00"]}]}
        blocks[f"l{i}"] = {"stmts": [], "term": {
            "kind": "branch", "cond": {"op": "lt", "args": [byte_i, 128]},
            "then": f"lo{i}", "else": f"hi{i}"}}
        blocks[f"lo{i}"] = {"stmts": [], "term": {"kind": "goto", "to": nxt}}
        blocks[f"hi{i}"] = {"stmts": [], "term": {"kind": "goto", "to": nxt}}
    return parse_app_spec(json.dumps({
        "app": "maze", "version": "v1",
        "handlers": [{"name": "walk", "params": ["x"], "entry": "b0", "blocks": blocks}],
    }))


app = maze()
cluster = Cluster(rng_seed=2)
cluster.deploy(app)
store = SeedStore(cluster.collector)
monitor = Monitor(app.block_count(), SwitchPolicy(t1=0.01, n_min=200))
admit_corpus(cluster, store, [CorpusEntry("maze", "walk", (b"\x00\x00\x00",))], monitor=monitor)
config = CampaignConfig(target_app="maze", budget=5000, mode="sequential", rng_seed=2)
report = Campaign(cluster, store, monitor, config).run()

print(f"executions      : {report.iterations} (budget was {config.budget})")
print(f"distinct digests: {report.coverage[-1][2]}")
print(f"blocks covered  : {report.stats_final['s_n']} / {report.stats_final['s_hat']}")
print(f"admissions      : {len(report.admissions)}")
for t in report.switch_history:
    print(f"switch          : {t['state']} ({t['reason']}) at n={t['at_n']}")

# coverage growth curve, downsampled
curve = report.coverage
for n, s_n, digests in curve[:: max(1, len(curve) // 10)]:
    print(f"  n={n:5d}  blocks={s_n:3d}  digests={digests}")

assert any(t["reason"] == "saturation" for t in report.switch_history)
print("the campaign stopped itself once discovery stalled")
