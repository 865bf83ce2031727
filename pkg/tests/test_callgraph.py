from __future__ import annotations

import random

from fixtures import app_doc, block, branch, chain_apps, goto, handler_doc, ret, rpc, v
from svcfuzz.appmodel import Branch, Goto, RpcCall, parse_app_spec
from svcfuzz.callgraph import build_call_graph


def test_single_app_two_blocks():
    app = parse_app_spec(app_doc("A", "v1", [handler_doc("h", [], "b1", {
        "b1": block([], goto("b2")),
        "b2": block([], ret(0)),
    })]))
    g = build_call_graph([app])
    block_nodes = [n for n in g.nodes if len(n) == 3]
    method_nodes = [n for n in g.nodes if len(n) == 2]
    assert len(block_nodes) == 2 and len(method_nodes) == 1
    assert g.edges == ((("A", "h", "b1"), ("A", "h", "b2")),)


def test_empty_app_set():
    g = build_call_graph([])
    assert g.nodes == () and g.edges == ()


def test_dangling_rpc_is_warning_not_error():
    app = parse_app_spec(app_doc("A", "v1", [handler_doc("h", ["x"], "b0", {
        "b0": block([rpc("y", "nowhere", "h", [v("x")])], ret(0)),
    })]))
    g = build_call_graph([app])
    assert g.edges == ()
    assert len(g.warnings) == 1 and "nowhere" in g.warnings[0]


def _random_app(rng: random.Random, app_id: str, peer_ids: list[str]):
    n_blocks = rng.randint(1, 6)
    ids = [f"b{i}" for i in range(n_blocks)]
    blocks = {}
    for i, bid in enumerate(ids):
        stmts = []
        if rng.random() < 0.4 and peer_ids:
            stmts.append(rpc("y", rng.choice(peer_ids + ["ghost"]), "h", []))
        roll = rng.random()
        if roll < 0.4 and i + 1 < n_blocks:
            term = goto(ids[i + 1])
        elif roll < 0.7 and n_blocks > 1:
            term = branch(True, rng.choice(ids), rng.choice(ids))
        else:
            term = ret(0)
        blocks[bid] = block(stmts, term)
    return parse_app_spec(app_doc(app_id, "v1", [handler_doc("h", [], "b0", blocks)]))


def test_edge_count_invariant_on_random_apps():
    rng = random.Random(42)
    for _ in range(50):
        ids = ["A", "B", "C"]
        apps = [_random_app(rng, app_id, [p for p in ids if p != app_id]) for app_id in ids]
        g = build_call_graph(apps)
        cfg_pairs = 0
        resolvable = 0
        by_id = {a.app_id: a for a in apps}
        for app in apps:
            for h in app.handlers:
                for b in h.blocks.values():
                    if isinstance(b.terminator, Goto):
                        cfg_pairs += 1
                    elif isinstance(b.terminator, Branch):
                        cfg_pairs += 2
                    for stmt in b.statements:
                        if isinstance(stmt, RpcCall) and stmt.target_app in by_id:
                            resolvable += 1
        assert len(g.edges) == cfg_pairs + resolvable


def test_rebuild_is_deterministic():
    apps = chain_apps()
    g1 = build_call_graph(apps)
    g2 = build_call_graph(list(reversed(apps)))
    assert g1.nodes == g2.nodes and g1.edges == g2.edges
