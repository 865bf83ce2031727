# Iteration testing across a version change: block-level diff, regression
# suite selection from prior traces, and a directed campaign that steers
# mutation toward the newly added block.

import json

from svcfuzz import Cluster, CorpusEntry, SeedStore, admit_corpus, parse_app_spec, run_iteration_test


def version(version_id, with_secret):
    first_byte = {"op": "int_le", "args": [{"op": "concat", "args": [
        {"op": "slice", "args": [{"var": "x"}, 0, 1]}, "0x00"]}]}
    blocks = {
        "b0": {"stmts": [], "term": {"kind": "branch",
                                     "cond": {"op": "lt", "args": [first_byte, 100]},
                                     "then": "low", "else": "high"}},
        "low": {"stmts": [], "term": {"kind": "return", "expr": 1}},
    }
    if with_secret:
        blocks["high"] = {"stmts": [], "term": {"kind": "branch",
                                                "cond": {"op": "eq", "args": [first_byte, 127]},
                                                "then": "secret", "else": "high2"}}
        blocks["secret"] = {"stmts": [{"kind": "emit", "sink": "hit", "value": first_byte}],
                            "term": {"kind": "return", "expr": 42}}
        blocks["high2"] = {"stmts": [], "term": {"kind": "return", "expr": 2}}
    else:
        blocks["high"] = {"stmts": [], "term": {"kind": "return", "expr": 2}}
    return parse_app_spec(json.dumps({
        "app": "pay", "version": version_id,
        "handlers": [{"name": "route", "params": ["x"], "entry": "b0", "blocks": blocks}],
    }))


old, new = version("rev-a", False), version("rev-b", True)

# history: fuzz traffic recorded against the old version
cluster = Cluster(rng_seed=3)
cluster.deploy(old)
store = SeedStore(cluster.collector)
admit_corpus(cluster, store, [
    CorpusEntry("pay", "route", (b"\x10payload",)),
    CorpusEntry("pay", "route", (b"\xc8payload",)),
])

report = run_iteration_test(cluster, store, [old], [new], budget=5000, rng_seed=11)

print("changed blocks :", report.diff)
print("suite (old)    :", report.suite_a, " suite (new):", report.suite_b)
print("replay deltas  :", json.dumps(report.deltas, indent=1))
print(f"initial seeds covering the diff : {report.initial_seeds}")
print(f"distinct traces after campaign  : {report.distinct_traces}")
print(f"effectiveness                   : {report.effectiveness:.2f}")
print("diff blocks reached             :", report.reached_diff_blocks)
assert ["pay", "route", "secret"] in report.reached_diff_blocks
print(f"the guarded block was reached after {report.iterations} directed iterations")
