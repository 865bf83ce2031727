# Build a three-service chain, run one request through it, and inspect the
# spliced whole-request trace and its coverage digest.

import json

from svcfuzz import Cluster, compute_cover_digest, digest_hex, parse_app_spec
from svcfuzz.tracing import trace_to_json

frontend = parse_app_spec(json.dumps({
    "app": "frontend", "version": "v1",
    "handlers": [{
        "name": "entry", "params": ["x"], "entry": "b0",
        "blocks": {
            "b0": {"stmts": [{"kind": "rpc", "var": "y", "app": "orders",
                              "handler": "place", "args": [{"var": "x"}]}],
                   "term": {"kind": "return", "expr": {"var": "y"}}},
        },
    }],
}))

orders = parse_app_spec(json.dumps({
    "app": "orders", "version": "v1",
    "handlers": [{
        "name": "place", "params": ["x"], "entry": "b0",
        "blocks": {
            "b0": {"stmts": [{"kind": "rpc", "var": "z", "app": "accounts",
                              "handler": "check", "args": [{"var": "x"}]}],
                   "term": {"kind": "return", "expr": {"op": "concat",
                                                       "args": [{"var": "z"}, "0x21"]}}},
        },
    }],
}))

accounts = parse_app_spec(json.dumps({
    "app": "accounts", "version": "v1",
    "handlers": [{
        "name": "check", "params": ["x"], "entry": "b0",
        "blocks": {"b0": {"stmts": [], "term": {"kind": "return", "expr": {"var": "x"}}}},
    }],
}))

cluster = Cluster(rng_seed=7)
for app in (frontend, orders, accounts):
    cluster.deploy(app)

result = cluster.invoke("frontend", "entry", [b"hi"])
print("outcome:", result.outcome)

# every hop recorded its own span; the collector splices them into one view
trace = cluster.collector.collect_and_splice(result.trace_id)
print("apps covered:", sorted({p[0] for p in trace.probe_set}))
print("whole-request digest:", digest_hex(trace.cover_digest))
assert trace.cover_digest == compute_cover_digest(trace.probe_set)

print(json.dumps(trace_to_json(trace), indent=1, sort_keys=True))
