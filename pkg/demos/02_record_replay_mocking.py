# Record a seed's execution (capturing every system, internal, and external
# dependency), then replay it after the upstream service changed.  The replay
# substitutes recorded outputs on matching inputs, so the path and its
# coverage digest stay fixed with zero divergences.

import json

from svcfuzz import Cluster, Seed, digest_hex, parse_app_spec, record_run, replay_run

service = parse_app_spec(json.dumps({
    "app": "svc", "version": "v1", "state": {"hits": 0},
    "handlers": [{
        "name": "handle", "params": ["x"], "entry": "b0",
        "blocks": {
            # a random draw, a global counter bump, and an RPC: the three
            # classic sources of run-to-run inconsistency
            "b0": {"stmts": [
                {"kind": "syscall", "var": "r", "prim": "random"},
                {"kind": "state_read", "var": "h", "key": "0x68697473"},
                {"kind": "state_write", "key": "0x68697473",
                 "value": {"op": "add", "args": [{"var": "h"}, 1]}},
                {"kind": "rpc", "var": "y", "app": "upstream", "handler": "quote",
                 "args": [{"var": "x"}]},
            ], "term": {"kind": "branch",
                        "cond": {"op": "lt", "args": [{"var": "h"}, 2]},
                        "then": "fresh", "else": "warm"}},
            "fresh": {"stmts": [], "term": {"kind": "return", "expr": {"var": "y"}}},
            "warm": {"stmts": [], "term": {"kind": "return",
                                           "expr": {"op": "concat",
                                                    "args": [{"var": "y"}, "0x2a"]}}},
        },
    }],
}))


def upstream(version, suffix):
    return parse_app_spec(json.dumps({
        "app": "upstream", "version": version,
        "handlers": [{
            "name": "quote", "params": ["x"], "entry": "b0",
            "blocks": {"b0": {"stmts": [], "term": {
                "kind": "return",
                "expr": {"op": "concat", "args": [{"var": "x"}, "0x" + suffix.hex()]}}}},
        }],
    }))


cluster = Cluster(rng_seed=42)
cluster.deploy(service)
cluster.deploy(upstream("v1", b"$1"))

seed = Seed("demo-seed", "svc", "handle", (b"order",), 0, "traffic", "v1")
outcome, trace, mocks = record_run(cluster, seed)
recorded_digest = trace.app_digest("svc")
print("recorded outcome:", outcome)
print("recorded digest :", digest_hex(recorded_digest))
print("mock points     :", mocks.point_count(),
      "(covered:", sum(1 for r in mocks.records.values() if r is not None), ")")

# the counter moved and the rng advanced, yet replay reproduces the run
outcome2, trace2, report = replay_run(cluster, seed, mocks)
assert outcome2 == outcome
assert trace2.app_digest("svc") == recorded_digest
assert report.consistent
print("replay on live state: consistent, substitutions =", report.substituted)

# the upstream releases a new version with a different response
cluster.deploy(upstream("v2", b"$999"))
outcome3, trace3, report = replay_run(cluster, seed, mocks)
assert outcome3 == outcome
assert trace3.app_digest("svc") == recorded_digest
assert report.consistent
print("replay after upstream redeploy: digest unchanged, zero divergences")

# a mutated argument no longer matches the recorded RPC input, so the real
# (new) upstream is called and the divergence is logged as data
mutant = Seed("demo-mutant", "svc", "handle", (b"chaos",), 0, "mutation", "v1")
_, _, report = replay_run(cluster, mutant, mocks)
print("mutated input: divergences =", [d.reason for d in report.divergences])
