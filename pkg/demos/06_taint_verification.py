# Verify <source, sink> candidates from a static analyzer by variable
# controlling: mutate only the source parameter (everything else replays
# from mocks) and compare observed sink values across mutants.

import json

from svcfuzz import Cluster, CorpusEntry, SeedStore, TaintCandidate, admit_corpus, parse_app_spec, verify_taint


def service(sink_expr):
    return parse_app_spec(json.dumps({
        "app": "vault", "version": "v1", "state": {"cfg": "0x00"},
        "handlers": [{
            "name": "store", "params": ["secret", "label"], "entry": "b0",
            "blocks": {"b0": {"stmts": [
                {"kind": "syscall", "var": "noise", "prim": "random"},
                {"kind": "emit", "sink": "audit_log", "value": sink_expr},
                {"kind": "db_write", "table": "audit", "key": "0x6b", "value": sink_expr},
            ], "term": {"kind": "return", "expr": 0}}},
        }],
    }))


def check(label, sink_expr):
    cluster = Cluster(rng_seed=5)
    cluster.deploy(service(sink_expr))
    store = SeedStore(cluster.collector)
    admit_corpus(cluster, store, [CorpusEntry("vault", "store", (b"\x01\x02\x03\x04", b"tag"))])
    candidate = TaintCandidate("vault", "store", 0, "audit_log",
                               note="flagged by upstream static analysis")
    verdict = verify_taint(cluster, store, candidate, k=100, rng_seed=9)
    print(f"{label:22s}: {verdict.verdict:9s} after {verdict.mutants_used} mutants"
          + (f" ({verdict.annotation})" if verdict.annotation else ""))
    if verdict.witness:
        w = verdict.witness
        print(f"  witness: mutant {w.mutant_i} observed {w.sink_i}, "
              f"mutant {w.mutant_j} observed {w.sink_j}")
    return verdict


# the sink leaks the source parameter: two mutants observe different values
leaking = check("sink echoes source", {"var": "secret"})
assert leaking.verdict == "confirmed"

# the sink only sees the other parameter: mutating the source never moves it,
# and the relation stays uncertain (never declared non-existent)
clean = check("sink ignores source", {"var": "label"})
assert clean.verdict == "uncertain"
