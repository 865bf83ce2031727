from __future__ import annotations

import json

import pytest

from fixtures import app_doc, block, branch, chain_apps, goto, handler_doc, ret
from svcfuzz.appmodel import (
    AppSpec,
    ParseError,
    RpcCall,
    ValidationError,
    app_to_document,
    canonical_block,
    decode_value,
    diff_blocks,
    parse_app_spec,
    wrap64,
)


def minimal_doc():
    return app_doc("A", "v1", [handler_doc("h", [], "b0", {"b0": block([], ret(0))})])


def test_minimal_document_parses():
    app = parse_app_spec(json.dumps(minimal_doc()))
    assert app.app_id == "A"
    assert len(app.handlers) == 1
    assert len(app.handlers[0].blocks) == 1


def test_branch_to_missing_block_names_offender():
    doc = app_doc("A", "v1", [handler_doc("h", [], "b0", {
        "b0": block([], branch(True, "b0", "ghost")),
    })])
    with pytest.raises(ValidationError, match="ghost"):
        parse_app_spec(doc)


def test_duplicate_handler_rejected():
    doc = minimal_doc()
    doc["handlers"].append(doc["handlers"][0])
    with pytest.raises(ValidationError, match="duplicate handler"):
        parse_app_spec(doc)


def test_missing_entry_rejected():
    doc = app_doc("A", "v1", [handler_doc("h", [], "nope", {"b0": block([], ret(0))})])
    with pytest.raises(ValidationError, match="nope"):
        parse_app_spec(doc)


def test_duplicate_param_rejected():
    doc = app_doc("A", "v1", [handler_doc("h", ["x", "x"], "b0", {"b0": block([], ret(0))})])
    with pytest.raises(ValidationError, match="param"):
        parse_app_spec(doc)


def test_empty_app_id_rejected():
    doc = minimal_doc()
    doc["app"] = ""
    with pytest.raises(ValidationError):
        parse_app_spec(doc)


def test_malformed_json_is_parse_error():
    with pytest.raises(ParseError):
        parse_app_spec("{not json")


def test_float_literal_rejected():
    doc = app_doc("A", "v1", [handler_doc("h", [], "b0", {"b0": block([], ret(1.5))})])
    with pytest.raises(ParseError, match="floating"):
        parse_app_spec(doc)


def test_byte_literals_lowercase_hex():
    assert decode_value("0xab01") == b"\xab\x01"
    with pytest.raises(ParseError):
        decode_value("0xAB")
    with pytest.raises(ParseError):
        decode_value("ab01")


def test_chain_topology_cross_app_edges_match_rpc_scan():
    apps = chain_apps()
    from svcfuzz.callgraph import build_call_graph

    graph = build_call_graph(apps)
    cross = {(u[0], v_[0]) for u, v_ in graph.edges if u[0] != v_[0]}
    # oracle: brute-force scan of every RpcCall statement
    expected = set()
    by_id = {a.app_id: a for a in apps}
    for app in apps:
        for h in app.handlers:
            for b in h.blocks.values():
                for stmt in b.statements:
                    if isinstance(stmt, RpcCall) and stmt.target_app in by_id:
                        expected.add((app.app_id, stmt.target_app))
    assert cross == expected == {("A", "B"), ("B", "C")}


def test_round_trip_through_document():
    apps = chain_apps()
    for app in apps:
        again = parse_app_spec(json.dumps(app_to_document(app)))
        assert again == app


def test_wrap64():
    assert wrap64((1 << 63) - 1 + 1) == -(1 << 63)
    assert wrap64(-(1 << 63) - 1) == (1 << 63) - 1
    assert wrap64(5) == 5


# -- diff -----------------------------------------------------------------------

def two_block_app(version, const_val=7):
    return parse_app_spec(app_doc("D", version, [
        handler_doc("h", [], "b1", {
            "b1": block([], goto("b3")),
            "b3": block([], ret(const_val)),
        }),
    ]))


def test_diff_identical_empty():
    d = diff_blocks([two_block_app("v1")], [two_block_app("v2")])
    assert d.changed == frozenset() and d.deleted == frozenset()


def test_diff_constant_change():
    d = diff_blocks([two_block_app("v1", 7)], [two_block_app("v2", 8)])
    assert d.changed == {("D", "h", "b3")}
    assert d.deleted == frozenset()


def test_diff_added_handler_blocks():
    old = two_block_app("v1")
    doc = app_to_document(two_block_app("v2"))
    doc["handlers"].append(handler_doc("extra", [], "e1", {
        "e1": block([], goto("e2")),
        "e2": block([], ret(1)),
    }))
    new = parse_app_spec(doc)
    d = diff_blocks([old], [new])
    assert d.changed == {("D", "extra", "e1"), ("D", "extra", "e2")}


def test_diff_deleted_reported_separately():
    old = two_block_app("v1")
    new = parse_app_spec(app_doc("D", "v2", [
        handler_doc("h", [], "b1", {"b1": block([], ret(0))}),
    ]))
    d = diff_blocks([old], [new])
    assert ("D", "h", "b3") in d.deleted
    assert ("D", "h", "b3") not in d.changed


def test_diff_membership_symmetric_for_modified_blocks():
    old = two_block_app("v1", 7)
    new = two_block_app("v2", 8)
    forward = diff_blocks([old], [new]).changed
    backward = diff_blocks([new], [old]).changed
    assert ("D", "h", "b3") in forward and ("D", "h", "b3") in backward


def test_diff_oracle_brute_force_block_sets():
    # oracle: recompute membership from raw canonical maps
    old, new = two_block_app("v1", 1), two_block_app("v2", 2)
    d = diff_blocks([old], [new])

    def blocks_of(app: AppSpec):
        return {
            (app.app_id, h.name, bid): canonical_block(b)
            for h in app.handlers for bid, b in h.blocks.items()
        }

    om, nm = blocks_of(old), blocks_of(new)
    expected = {ref for ref in nm if ref not in om or om[ref] != nm[ref]}
    assert d.changed == expected
