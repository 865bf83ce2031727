"""Versioned service models: declarative control-flow programs, parsing, and block diffs.

A service ("App") is a set of named handlers, each a control-flow graph of
basic blocks over a small expression language.  Blocks are the unit of
coverage probes, version diffing, and directed-fuzzing distances.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping


class ParseError(ValueError):
    """Raised for structurally malformed App documents."""


class ValidationError(ValueError):
    """Raised for well-formed documents that violate model invariants."""


class CrashKind(str, Enum):
    BIZ_EXCEPTION = "Biz_Exception"
    BIZ_ERROR = "Biz_Error"
    SYS_NULL_POINTER = "Sys_NullPointer"
    SYS_SQL = "Sys_SQL"
    SYS_NUMBER_FORMAT = "Sys_NumberFormat"
    SYS_UNCLEARED_THROWABLE = "Sys_UnclearedThrowable"
    SYS_IO = "Sys_IO"
    SYS_ARITHMETIC = "Sys_Arithmetic"
    SYS_BOUNDS = "Sys_Bounds"

    @property
    def vul_class(self) -> str:
        """Two-way taxonomy: business-level kinds vs system-level kinds."""
        if self in (CrashKind.BIZ_EXCEPTION, CrashKind.BIZ_ERROR):
            return "Biz_Vul"
        return "Sys_Vul"


# Runtime values are plain Python objects: int (wrapping signed 64-bit),
# bytes, bool.  bool is checked before int everywhere since it subclasses int.
Value = Any

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


def wrap64(n: int) -> int:
    """Wrap an integer into signed two's-complement 64-bit range."""
    return ((n - INT64_MIN) & 0xFFFFFFFFFFFFFFFF) + INT64_MIN


def value_eq(a: Value, b: Value) -> bool:
    """Type-strict equality (True != 1, b"" != 0)."""
    return type(a) is type(b) and a == b


def render_value(v: Value) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, bytes):
        return "0x" + v.hex()
    raise TypeError(f"not a runtime value: {v!r}")


def encode_value(v: Value):
    """JSON encoding: bool -> bool, int -> number, bytes -> '0x..' hex string."""
    if isinstance(v, bool):
        return v
    if isinstance(v, int):
        return v
    if isinstance(v, bytes):
        return "0x" + v.hex()
    raise TypeError(f"not a runtime value: {v!r}")


def decode_value(j) -> Value:
    if isinstance(j, bool):
        return j
    if isinstance(j, int):
        if not (INT64_MIN <= j <= INT64_MAX):
            raise ParseError(f"integer literal out of 64-bit range: {j}")
        return j
    if isinstance(j, float):
        raise ParseError(f"floating-point values are not supported: {j}")
    if isinstance(j, str):
        if not j.startswith("0x"):
            raise ParseError(f"byte-string literal must start with '0x': {j!r}")
        body = j[2:]
        if body != body.lower():
            raise ParseError(f"byte-string literal must be lowercase hex: {j!r}")
        try:
            return bytes.fromhex(body)
        except ValueError as exc:
            raise ParseError(f"bad hex in byte-string literal {j!r}") from exc
    raise ParseError(f"cannot decode value: {j!r}")


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

# op -> arity; None means variable arity (unused today but keeps the table honest)
_EXPR_OPS = {
    "const": 1,
    "var": 1,
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "eq": 2,
    "ne": 2,
    "lt": 2,
    "le": 2,
    "gt": 2,
    "ge": 2,
    "and": 2,
    "or": 2,
    "not": 1,
    "concat": 2,
    "slice": 3,
    "len": 1,
    "int_le": 1,
    "bytes_le": 2,
}


@dataclass(frozen=True)
class Expr:
    """Expression node: ``const``/``var`` carry a literal, other ops carry sub-exprs."""

    op: str
    args: tuple

    def __post_init__(self):
        if self.op not in _EXPR_OPS:
            raise ParseError(f"unknown expression op: {self.op!r}")


def const(v: Value) -> Expr:
    return Expr("const", (v,))


def var(name: str) -> Expr:
    return Expr("var", (name,))


def parse_expr(j) -> Expr:
    """Parse the JSON expression encoding.

    Literals are encoded directly (number, "0x.." string, bool); variable
    references as {"var": name}; operations as {"op": name, "args": [...]}.
    """
    if isinstance(j, (bool, int, float)) or isinstance(j, str):
        return const(decode_value(j))
    if not isinstance(j, dict):
        raise ParseError(f"cannot parse expression: {j!r}")
    if "var" in j:
        name = j["var"]
        if not isinstance(name, str) or not name:
            raise ParseError(f"bad variable reference: {j!r}")
        return var(name)
    if "op" not in j:
        raise ParseError(f"expression object needs 'op' or 'var': {j!r}")
    op = j["op"]
    raw_args = j.get("args", [])
    if op not in _EXPR_OPS or op in ("const", "var"):
        raise ParseError(f"unknown expression op: {op!r}")
    if not isinstance(raw_args, list) or len(raw_args) != _EXPR_OPS[op]:
        raise ParseError(f"op {op!r} expects {_EXPR_OPS[op]} args")
    if op == "bytes_le":
        width = raw_args[1]
        if not isinstance(width, int) or isinstance(width, bool) or width not in (1, 2, 4, 8):
            raise ParseError(f"bytes_le width must be 1/2/4/8, got {width!r}")
        return Expr(op, (parse_expr(raw_args[0]), width))
    return Expr(op, tuple(parse_expr(a) for a in raw_args))


def expr_to_json(e: Expr):
    if e.op == "const":
        return encode_value(e.args[0])
    if e.op == "var":
        return {"var": e.args[0]}
    if e.op == "bytes_le":
        return {"op": e.op, "args": [expr_to_json(e.args[0]), e.args[1]]}
    return {"op": e.op, "args": [expr_to_json(a) for a in e.args]}


# ---------------------------------------------------------------------------
# Statements and terminators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assign:
    var: str
    expr: Expr


@dataclass(frozen=True)
class SysCall:
    var: str
    primitive: str  # "random" | "now"


@dataclass(frozen=True)
class StateRead:
    var: str
    key: Expr
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class StateWrite:
    key: Expr
    value: Expr
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class RpcCall:
    var: str
    target_app: str
    target_handler: str
    args: tuple[Expr, ...]
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class DbRead:
    var: str
    table: str
    key: Expr
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class DbWrite:
    table: str
    key: Expr
    value: Expr
    volatile: tuple[int, ...] = ()


@dataclass(frozen=True)
class EmitSink:
    sink_id: str
    value: Expr


Statement = Any  # union of the eight dataclasses above

# Statement kinds that the execution environment routes through an interceptor.
INTERCEPTABLE = (SysCall, StateRead, StateWrite, RpcCall, DbRead, DbWrite)


@dataclass(frozen=True)
class Branch:
    cond: Expr
    then_block: str
    else_block: str


@dataclass(frozen=True)
class Goto:
    target: str


@dataclass(frozen=True)
class Return:
    expr: Expr


@dataclass(frozen=True)
class CrashTerm:
    kind: CrashKind
    message: Expr


Terminator = Any


@dataclass(frozen=True)
class Block:
    block_id: str
    statements: tuple[Statement, ...]
    terminator: Terminator


@dataclass(frozen=True)
class Handler:
    name: str
    params: tuple[str, ...]
    blocks: Mapping[str, Block]
    entry: str


@dataclass(frozen=True)
class AppSpec:
    app_id: str
    version_id: str
    handlers: tuple[Handler, ...]
    initial_state: Mapping[bytes, Value] = field(default_factory=dict)

    def handler(self, name: str) -> Handler:
        for h in self.handlers:
            if h.name == name:
                return h
        raise KeyError(name)

    def handler_names(self) -> list[str]:
        return [h.name for h in self.handlers]

    def block_count(self) -> int:
        return sum(len(h.blocks) for h in self.handlers)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_STMT_KINDS = {
    "assign", "syscall", "state_read", "state_write", "rpc",
    "db_read", "db_write", "emit",
}


def _req(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise ParseError(f"{ctx}: missing field {key!r}")
    return obj[key]


def _volatile(obj: dict, ctx: str) -> tuple[int, ...]:
    raw = obj.get("volatile", [])
    if not isinstance(raw, list) or any(not isinstance(i, int) or isinstance(i, bool) or i < 0 for i in raw):
        raise ParseError(f"{ctx}: 'volatile' must be a list of non-negative indices")
    return tuple(raw)


def parse_statement(j, ctx: str) -> Statement:
    if not isinstance(j, dict):
        raise ParseError(f"{ctx}: statement must be an object")
    kind = _req(j, "kind", ctx)
    if kind == "assign":
        return Assign(_req(j, "var", ctx), parse_expr(_req(j, "expr", ctx)))
    if kind == "syscall":
        prim = _req(j, "prim", ctx)
        if prim not in ("random", "now"):
            raise ParseError(f"{ctx}: syscall primitive must be 'random' or 'now'")
        return SysCall(_req(j, "var", ctx), prim)
    if kind == "state_read":
        return StateRead(_req(j, "var", ctx), parse_expr(_req(j, "key", ctx)), _volatile(j, ctx))
    if kind == "state_write":
        return StateWrite(parse_expr(_req(j, "key", ctx)), parse_expr(_req(j, "value", ctx)), _volatile(j, ctx))
    if kind == "rpc":
        args = _req(j, "args", ctx)
        if not isinstance(args, list):
            raise ParseError(f"{ctx}: rpc args must be a list")
        return RpcCall(
            _req(j, "var", ctx), _req(j, "app", ctx), _req(j, "handler", ctx),
            tuple(parse_expr(a) for a in args), _volatile(j, ctx),
        )
    if kind == "db_read":
        return DbRead(_req(j, "var", ctx), _req(j, "table", ctx), parse_expr(_req(j, "key", ctx)), _volatile(j, ctx))
    if kind == "db_write":
        return DbWrite(_req(j, "table", ctx), parse_expr(_req(j, "key", ctx)), parse_expr(_req(j, "value", ctx)), _volatile(j, ctx))
    if kind == "emit":
        return EmitSink(_req(j, "sink", ctx), parse_expr(_req(j, "value", ctx)))
    raise ParseError(f"{ctx}: unknown statement kind {kind!r}")


def parse_terminator(j, ctx: str) -> Terminator:
    if not isinstance(j, dict):
        raise ParseError(f"{ctx}: terminator must be an object")
    kind = _req(j, "kind", ctx)
    if kind == "branch":
        return Branch(parse_expr(_req(j, "cond", ctx)), _req(j, "then", ctx), _req(j, "else", ctx))
    if kind == "goto":
        return Goto(_req(j, "to", ctx))
    if kind == "return":
        return Return(parse_expr(_req(j, "expr", ctx)))
    if kind == "crash":
        raw = _req(j, "crash_kind", ctx)
        try:
            ck = CrashKind(raw)
        except ValueError as exc:
            raise ParseError(f"{ctx}: unknown crash kind {raw!r}") from exc
        return CrashTerm(ck, parse_expr(j.get("message", "0x")))
    raise ParseError(f"{ctx}: unknown terminator kind {kind!r}")


def _branch_targets(term: Terminator) -> list[str]:
    if isinstance(term, Branch):
        return [term.then_block, term.else_block]
    if isinstance(term, Goto):
        return [term.target]
    return []


def validate_app(app: AppSpec) -> None:
    """Check all model invariants; raises ValidationError naming the offender."""
    if not app.app_id:
        raise ValidationError("app_id must be non-empty")
    seen = set()
    for h in app.handlers:
        if h.name in seen:
            raise ValidationError(f"duplicate handler {h.name!r} in app {app.app_id!r}")
        seen.add(h.name)
        if len(set(h.params)) != len(h.params):
            raise ValidationError(f"duplicate param name in handler {app.app_id}.{h.name}")
        if h.entry not in h.blocks:
            raise ValidationError(f"entry block {h.entry!r} missing in handler {app.app_id}.{h.name}")
        for b in h.blocks.values():
            for target in _branch_targets(b.terminator):
                if target not in h.blocks:
                    raise ValidationError(
                        f"block {b.block_id!r} in {app.app_id}.{h.name} references missing block {target!r}"
                    )


def parse_app_spec(document) -> AppSpec:
    """Parse and validate one App document (JSON text or already-decoded dict)."""
    if isinstance(document, (str, bytes)):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    else:
        doc = document
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object")
    app_id = _req(doc, "app", "document")
    version = _req(doc, "version", "document")
    if not isinstance(app_id, str) or not isinstance(version, str):
        raise ParseError("'app' and 'version' must be strings")
    state_raw = doc.get("state", {})
    if not isinstance(state_raw, dict):
        raise ParseError("'state' must be an object")
    state = {k.encode("utf-8"): decode_value(v) for k, v in state_raw.items()}
    handlers_raw = _req(doc, "handlers", "document")
    if not isinstance(handlers_raw, list):
        raise ParseError("'handlers' must be a list")
    handlers = []
    for h in handlers_raw:
        if not isinstance(h, dict):
            raise ParseError("handler must be an object")
        name = _req(h, "name", "handler")
        params = h.get("params", [])
        if not isinstance(params, list) or any(not isinstance(p, str) for p in params):
            raise ParseError(f"handler {name!r}: 'params' must be a list of names")
        blocks_raw = _req(h, "blocks", f"handler {name!r}")
        if not isinstance(blocks_raw, dict) or not blocks_raw:
            raise ParseError(f"handler {name!r}: 'blocks' must be a non-empty object")
        blocks = {}
        for block_id, braw in blocks_raw.items():
            ctx = f"{app_id}.{name}.{block_id}"
            if not isinstance(braw, dict):
                raise ParseError(f"{ctx}: block must be an object")
            stmts = braw.get("stmts", [])
            if not isinstance(stmts, list):
                raise ParseError(f"{ctx}: 'stmts' must be a list")
            blocks[block_id] = Block(
                block_id,
                tuple(parse_statement(s, ctx) for s in stmts),
                parse_terminator(_req(braw, "term", ctx), ctx),
            )
        handlers.append(Handler(name, tuple(params), blocks, _req(h, "entry", f"handler {name!r}")))
    app = AppSpec(app_id, version, tuple(handlers), state)
    validate_app(app)
    return app


# ---------------------------------------------------------------------------
# Canonical serialization (round-trip + diffing)
# ---------------------------------------------------------------------------

def statement_to_json(s: Statement) -> dict:
    if isinstance(s, Assign):
        return {"kind": "assign", "var": s.var, "expr": expr_to_json(s.expr)}
    if isinstance(s, SysCall):
        return {"kind": "syscall", "var": s.var, "prim": s.primitive}
    if isinstance(s, StateRead):
        d = {"kind": "state_read", "var": s.var, "key": expr_to_json(s.key)}
    elif isinstance(s, StateWrite):
        d = {"kind": "state_write", "key": expr_to_json(s.key), "value": expr_to_json(s.value)}
    elif isinstance(s, RpcCall):
        d = {"kind": "rpc", "var": s.var, "app": s.target_app, "handler": s.target_handler,
             "args": [expr_to_json(a) for a in s.args]}
    elif isinstance(s, DbRead):
        d = {"kind": "db_read", "var": s.var, "table": s.table, "key": expr_to_json(s.key)}
    elif isinstance(s, DbWrite):
        d = {"kind": "db_write", "table": s.table, "key": expr_to_json(s.key), "value": expr_to_json(s.value)}
    elif isinstance(s, EmitSink):
        return {"kind": "emit", "sink": s.sink_id, "value": expr_to_json(s.value)}
    else:
        raise TypeError(f"not a statement: {s!r}")
    if s.volatile:
        d["volatile"] = list(s.volatile)
    return d


def terminator_to_json(t: Terminator) -> dict:
    if isinstance(t, Branch):
        return {"kind": "branch", "cond": expr_to_json(t.cond), "then": t.then_block, "else": t.else_block}
    if isinstance(t, Goto):
        return {"kind": "goto", "to": t.target}
    if isinstance(t, Return):
        return {"kind": "return", "expr": expr_to_json(t.expr)}
    if isinstance(t, CrashTerm):
        return {"kind": "crash", "crash_kind": t.kind.value, "message": expr_to_json(t.message)}
    raise TypeError(f"not a terminator: {t!r}")


def app_to_document(app: AppSpec) -> dict:
    """Serialize back to the App document format (inverse of parse_app_spec)."""
    return {
        "app": app.app_id,
        "version": app.version_id,
        "state": {k.decode("utf-8"): encode_value(v) for k, v in app.initial_state.items()},
        "handlers": [
            {
                "name": h.name,
                "params": list(h.params),
                "entry": h.entry,
                "blocks": {
                    bid: {"stmts": [statement_to_json(s) for s in b.statements],
                          "term": terminator_to_json(b.terminator)}
                    for bid, b in h.blocks.items()
                },
            }
            for h in app.handlers
        ],
    }


def _canon_expr(e: Expr):
    if e.op == "const":
        v = e.args[0]
        tag = "bool" if isinstance(v, bool) else ("int" if isinstance(v, int) else "bytes")
        return ["const", tag, render_value(v)]
    if e.op == "var":
        return ["var", e.args[0]]
    return [e.op] + [_canon_expr(a) if isinstance(a, Expr) else a for a in e.args]


def _canon_stmt(s: Statement) -> list:
    # fields in declaration order, tagged by statement kind
    if isinstance(s, Assign):
        return ["assign", s.var, _canon_expr(s.expr)]
    if isinstance(s, SysCall):
        return ["syscall", s.var, s.primitive]
    if isinstance(s, StateRead):
        return ["state_read", s.var, _canon_expr(s.key), list(s.volatile)]
    if isinstance(s, StateWrite):
        return ["state_write", _canon_expr(s.key), _canon_expr(s.value), list(s.volatile)]
    if isinstance(s, RpcCall):
        return ["rpc", s.var, s.target_app, s.target_handler,
                [_canon_expr(a) for a in s.args], list(s.volatile)]
    if isinstance(s, DbRead):
        return ["db_read", s.var, s.table, _canon_expr(s.key), list(s.volatile)]
    if isinstance(s, DbWrite):
        return ["db_write", s.table, _canon_expr(s.key), _canon_expr(s.value), list(s.volatile)]
    if isinstance(s, EmitSink):
        return ["emit", s.sink_id, _canon_expr(s.value)]
    raise TypeError(f"not a statement: {s!r}")


def _canon_term(t: Terminator) -> list:
    if isinstance(t, Branch):
        return ["branch", _canon_expr(t.cond), t.then_block, t.else_block]
    if isinstance(t, Goto):
        return ["goto", t.target]
    if isinstance(t, Return):
        return ["return", _canon_expr(t.expr)]
    if isinstance(t, CrashTerm):
        return ["crash", t.kind.value, _canon_expr(t.message)]
    raise TypeError(f"not a terminator: {t!r}")


def canonical_block(block: Block) -> str:
    """Deterministic byte-exact encoding used by diff_blocks."""
    return json.dumps(
        [[_canon_stmt(s) for s in block.statements], _canon_term(block.terminator)],
        separators=(",", ":"),
    )


BlockRef = tuple[str, str, str]  # (app_id, handler, block_id)


@dataclass(frozen=True)
class DiffResult:
    """Blocks added or modified in the new version (``changed``) and blocks
    that only exist in the old version (``deleted``, reported separately)."""

    changed: frozenset[BlockRef]
    deleted: frozenset[BlockRef]


def _block_map(apps: Iterable[AppSpec]) -> dict[BlockRef, str]:
    out = {}
    for app in apps:
        for h in app.handlers:
            for bid, b in h.blocks.items():
                out[(app.app_id, h.name, bid)] = canonical_block(b)
    return out


def diff_blocks(old: Iterable[AppSpec], new: Iterable[AppSpec]) -> DiffResult:
    """Block-granular version diff under canonical serialization.

    A block is changed iff it exists only in ``new`` or its canonical
    encoding differs between the two sides.
    """
    old_map = _block_map(old)
    new_map = _block_map(new)
    changed = {ref for ref, canon in new_map.items() if old_map.get(ref) != canon}
    deleted = {ref for ref in old_map if ref not in new_map}
    return DiffResult(frozenset(changed), frozenset(deleted))
