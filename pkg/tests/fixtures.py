"""Shared fixture Apps and cluster builders for the test suite."""
from __future__ import annotations

import random

from svcfuzz.appmodel import parse_app_spec
from svcfuzz.cluster import Cluster, CorpusEntry, FaultPolicy
from svcfuzz.engine import admit_corpus
from svcfuzz.monitor import Monitor, SwitchPolicy
from svcfuzz.seedstore import SeedStore


# -- document helpers ---------------------------------------------------------

def v(name):
    return {"var": name}


def op(name, *args):
    return {"op": name, "args": list(args)}


def bhex(data: bytes) -> str:
    return "0x" + data.hex()


def block(stmts, term):
    return {"stmts": stmts, "term": term}


def ret(expr):
    return {"kind": "return", "expr": expr}


def branch(cond, then, els):
    return {"kind": "branch", "cond": cond, "then": then, "else": els}


def goto(to):
    return {"kind": "goto", "to": to}


def crash(kind, message="0x"):
    return {"kind": "crash", "crash_kind": kind, "message": message}


def assign(var, expr):
    return {"kind": "assign", "var": var, "expr": expr}


def syscall(var, prim):
    return {"kind": "syscall", "var": var, "prim": prim}


def sread(var, key, volatile=None):
    d = {"kind": "state_read", "var": var, "key": key}
    if volatile:
        d["volatile"] = volatile
    return d


def swrite(key, value, volatile=None):
    d = {"kind": "state_write", "key": key, "value": value}
    if volatile:
        d["volatile"] = volatile
    return d


def rpc(var, app, handler, args, volatile=None):
    d = {"kind": "rpc", "var": var, "app": app, "handler": handler, "args": args}
    if volatile:
        d["volatile"] = volatile
    return d


def dbr(var, table, key):
    return {"kind": "db_read", "var": var, "table": table, "key": key}


def dbw(table, key, value):
    return {"kind": "db_write", "table": table, "key": key, "value": value}


def emit(sink, value):
    return {"kind": "emit", "sink": sink, "value": value}


def app_doc(app, version, handlers, state=None):
    return {"app": app, "version": version, "state": state or {}, "handlers": handlers}


def handler_doc(name, params, entry, blocks):
    return {"name": name, "params": params, "entry": entry, "blocks": blocks}


def byte_at(name, i):
    """Unsigned value of byte i of a byte-string variable (zero-extended so
    the signed little-endian decode cannot flip negative)."""
    return op("int_le", op("concat", op("slice", v(name), i, i + 1), "0x00"))


def first_byte(name):
    return byte_at(name, 0)


# -- fixture apps -------------------------------------------------------------

def echo_app(app="B", version="v1", suffix=b""):
    """Echo service; a non-empty suffix distinguishes later versions."""
    expr = v("x") if not suffix else op("concat", v("x"), bhex(suffix))
    return parse_app_spec(app_doc(app, version, [
        handler_doc("echo", ["x"], "b0", {"b0": block([], ret(expr))}),
    ]))


def counter_app(app="C", version="v1"):
    """Global counter plus a key/value map behind one handler (internal-state
    dependence: every call shifts the counter)."""
    return parse_app_spec(app_doc(app, version, [
        handler_doc("get_value", ["key"], "b0", {
            "b0": block(
                [
                    sread("c", bhex(b"counter")),
                    swrite(bhex(b"counter"), op("add", v("c"), 1)),
                    sread("val", v("key")),
                ],
                branch(op("lt", v("c"), 3), "low", "high"),
            ),
            "low": block([emit("got", v("val"))], ret(v("val"))),
            "high": block([], ret(op("concat", v("val"), bhex(b"+")))),
        }),
        handler_doc("put_value", ["key", "value"], "b0", {
            "b0": block([swrite(v("key"), v("value"))], ret(0)),
        }),
    ], state={"counter": 0}))


def mixed_app(app="F", version="v1", backend="B"):
    """Frontend exercising every dependency class: system randomness and
    time, a global counter, RPC to a backend, and database reads/writes,
    with branches on the input, the random draw, and the counter."""
    return parse_app_spec(app_doc(app, version, [
        handler_doc("handle", ["x"], "b0", {
            "b0": block(
                [
                    syscall("r", "random"),
                    syscall("t", "now"),
                    sread("c", bhex(b"ctr")),
                    swrite(bhex(b"ctr"), op("add", v("c"), 1)),
                ],
                branch(op("gt", op("len", v("x")), 0), "b1", "empty"),
            ),
            "empty": block([], ret(bhex(b""))),
            "b1": block(
                [rpc("y", backend, "echo", [v("x")])],
                branch(op("eq", op("sub", v("r"), op("mul", op("div", v("r"), 2), 2)), 0), "even", "odd"),
            ),
            "even": block(
                [dbw("tbl", bhex(b"k"), v("y")), dbr("d", "tbl", bhex(b"k"))],
                branch(op("lt", first_byte("x"), 64), "small", "big"),
            ),
            "odd": block([], branch(op("lt", v("c"), 2), "fresh", "small")),
            "fresh": block([emit("seen", v("c"))], ret(v("y"))),
            "small": block([], ret(op("concat", v("y"), bhex(b".")))),
            "big": block([], branch(op("gt", first_byte("x"), 200), "boom", "small")),
            "boom": block([], crash("Biz_Error", bhex(b"big input"))),
        }),
    ], state={"ctr": 0}))


def crashy_app(app="K", version="v1"):
    """Input-selected crash kinds for taxonomy and dedup tests."""
    return parse_app_spec(app_doc(app, version, [
        handler_doc("poke", ["x"], "b0", {
            "b0": block([assign("n", first_byte("x"))],
                        branch(op("lt", v("n"), 10), "npe", "next1")),
            "npe": block([assign("z", v("missing"))], ret(v("z"))),
            "next1": block([], branch(op("lt", v("n"), 20), "sql", "next2")),
            "sql": block([dbr("q", "absent", v("x"))], ret(v("q"))),
            "next2": block([], branch(op("lt", v("n"), 30), "arith", "next3")),
            "arith": block([assign("z", op("div", 1, op("sub", v("n"), v("n"))))], ret(v("z"))),
            "next3": block([], branch(op("lt", v("n"), 40), "bounds", "next4")),
            "bounds": block([assign("z", op("slice", v("x"), 0, 99))], ret(v("z"))),
            "next4": block([], branch(op("lt", v("n"), 50), "biz", "ok")),
            "biz": block([], crash("Biz_Exception", bhex(b"refused"))),
            "ok": block([], ret(0)),
        }),
    ]))


def maze_app(app="M", version="v1", levels=3):
    """Finite path maze: one branch per input byte, so at most 2^levels + 1
    distinct probe sets are reachable (saturates quickly under mutation)."""
    blocks = {
        "b0": block([], branch(op("ge", op("len", v("x")), levels), "l0", "short")),
        "short": block([], ret(bhex(b""))),
    }
    for level in range(levels):
        lo = f"l{level}lo"
        hi = f"l{level}hi"
        nxt = f"l{level + 1}" if level + 1 < levels else "end"
        cond = op("lt", byte_at("x", level), 128)
        blocks[f"l{level}"] = block([], branch(cond, lo, hi))
        blocks[lo] = block([assign(f"m{level}", 0)], goto(nxt))
        blocks[hi] = block([assign(f"m{level}", 1)], goto(nxt))
    blocks["end"] = block([], ret(0))
    return parse_app_spec(app_doc(app, version, [handler_doc("walk", ["x"], "b0", blocks)]))


def guard_app(app="G", version="v1", with_guard=False):
    """v1 splits on the first byte; the next version adds a guarded block
    reachable only when the first byte equals 127."""
    blocks = {
        "b0": block([], branch(op("lt", first_byte("x"), 100), "low", "high")),
        "low": block([], ret(1)),
    }
    if with_guard:
        blocks["high"] = block([], branch(op("eq", first_byte("x"), 127), "secret", "high2"))
        blocks["secret"] = block([emit("hit", first_byte("x"))], ret(42))
        blocks["high2"] = block([], ret(2))
    else:
        blocks["high"] = block([], ret(2))
    return parse_app_spec(app_doc(app, version, [handler_doc("g", ["x"], "b0", blocks)]))


def chain_apps():
    """Three-service chain A -> B -> C."""
    a = parse_app_spec(app_doc("A", "v1", [
        handler_doc("entry", ["x"], "b0", {
            "b0": block([rpc("y", "B", "mid", [v("x")])], ret(v("y"))),
        }),
    ]))
    b = parse_app_spec(app_doc("B", "v1", [
        handler_doc("mid", ["x"], "b0", {
            "b0": block([rpc("z", "C", "leaf", [v("x")])], ret(v("z"))),
        }),
    ]))
    c = parse_app_spec(app_doc("C", "v1", [
        handler_doc("leaf", ["x"], "b0", {"b0": block([], ret(v("x")))}),
    ]))
    return a, b, c


def taint_app(rng: random.Random, dependent: bool, app="T", version="v1"):
    """Randomized taint fixture: the sink either derives from the source
    parameter or from everything except it."""
    pre = []
    if rng.random() < 0.5:
        pre.append(syscall("noise", "random"))
    if rng.random() < 0.5:
        pre.append(sread("st", bhex(b"cfg")))
    if dependent:
        choice = rng.randrange(3)
        if choice == 0:
            sink_expr = v("src")
        elif choice == 1:
            sink_expr = op("add", op("int_le", v("src")), rng.randrange(1, 50))
        else:
            sink_expr = op("concat", v("src"), bhex(bytes([rng.randrange(256)])))
    else:
        choice = rng.randrange(3)
        if choice == 0:
            sink_expr = rng.randrange(1000)
        elif choice == 1:
            sink_expr = v("aux")
        else:
            sink_expr = v("noise") if pre and pre[0]["kind"] == "syscall" else bhex(b"const")
    stmts = pre + [emit("sink0", sink_expr), dbw("audit", bhex(b"a"), sink_expr)]
    return parse_app_spec(app_doc(app, version, [
        handler_doc("t", ["src", "aux"], "b0", {"b0": block(stmts, ret(0))}),
    ], state={"cfg": bhex(b"cfgv")}))


# -- cluster builders -----------------------------------------------------------

def mixed_cluster(rng_seed=0, fault: FaultPolicy | None = None):
    cluster = Cluster(rng_seed=rng_seed, fault_policy=fault or FaultPolicy())
    cluster.deploy(mixed_app())
    cluster.deploy(echo_app())
    return cluster


def fuzz_setup(app_spec, corpus_args, rng_seed=0, policy=None, monitor_enabled=True):
    """Deploy one app, admit a corpus, and wire a monitor for campaigns."""
    cluster = Cluster(rng_seed=rng_seed)
    cluster.deploy(app_spec)
    store = SeedStore(cluster.collector)
    monitor = Monitor(app_spec.block_count(), policy or SwitchPolicy(), enabled=monitor_enabled)
    handler = app_spec.handlers[0].name
    entries = [CorpusEntry(app_spec.app_id, handler, args) for args in corpus_args]
    admit_corpus(cluster, store, entries, monitor=monitor)
    cluster.subscribe_version_events(monitor.on_version_event)
    return cluster, store, monitor
