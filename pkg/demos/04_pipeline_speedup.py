# Compare sequential and pipelined campaign modes under injected stage
# latencies.  Decoupled stages overlap their waits, so throughput approaches
# the bottleneck-stage bound instead of the sum of all stage times.

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

echo = parse_app_spec(json.dumps({
    "app": "echo", "version": "v1",
    "handlers": [{"name": "h", "params": ["x"], "entry": "b0",
                  "blocks": {"b0": {"stmts": [], "term": {"kind": "return", "expr": {"var": "x"}}}}}],
}))

LATENCY = {"execute": 0.010, "collect": 0.020}  # simulated network + splice cost
BUDGET = 150


def run(mode: str) -> float:
    cluster = Cluster(rng_seed=1)
    cluster.deploy(echo)
    store = SeedStore(cluster.collector)
    admit_corpus(cluster, store, [CorpusEntry("echo", "h", (b"seed",))])
    monitor = Monitor(echo.block_count(), SwitchPolicy(n_min=10**9))
    config = CampaignConfig(target_app="echo", budget=BUDGET, mode=mode, rng_seed=1,
                            stage_latency=LATENCY, measure_timing=True)
    report = Campaign(cluster, store, monitor, config).run()
    assert report.ledger["complete"]
    timing = report.timing
    print(f"{mode:10s}: {timing['throughput_items_per_s']:6.1f} items/s, "
          f"{timing['iteration_ms']:5.1f} ms per completion")
    for stage, h in timing["stages"].items():
        print(f"    {stage:8s} mean={h['mean_ms']:6.2f} ms  p50={h['p50_ms']:6.2f}  max={h['max_ms']:6.2f}")
    return timing["throughput_items_per_s"]


sequential = run("sequential")
pipelined = run("pipeline")
bound = sum(LATENCY.values()) / max(LATENCY.values())
print(f"speedup: {pipelined / sequential:.2f}x (stage-time bound {bound:.2f}x)")
