"""Handler interpreter: block-level coverage probes, step budgets, interception.

Every interception-eligible statement (system call, global-state access,
RPC, DB access) is routed through the environment's interceptor before the
real effect runs; a recording interceptor observes (input, output) pairs and
a replaying interceptor substitutes recorded outputs on matching inputs.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable

from .appmodel import (
    AppSpec,
    Assign,
    Block,
    Branch,
    CrashKind,
    DbRead,
    DbWrite,
    EmitSink,
    Expr,
    Goto,
    Return,
    RpcCall,
    StateRead,
    StateWrite,
    SysCall,
    render_value,
    wrap64,
)

DEFAULT_STEP_BUDGET = 100_000


class _Unit:
    """Output of effect-only points (state/db writes); substitutable but valueless."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNIT"


UNIT = _Unit()


class CrashSignal(Exception):
    """Unwinds handler execution; carries the crash taxonomy kind and site."""

    def __init__(self, kind: CrashKind, message: str, site: tuple[str, str, str] | None = None):
        super().__init__(f"{kind.value}: {message}")
        self.kind = kind
        self.message = message
        self.site = site


class BudgetSignal(Exception):
    """Step budget exhausted; surfaces as the BudgetExhausted outcome."""


@dataclass(frozen=True)
class Returned:
    value: object


@dataclass(frozen=True)
class Crashed:
    kind: CrashKind
    message: str
    site: tuple[str, str, str] | None = None


@dataclass(frozen=True)
class BudgetExhausted:
    pass


Outcome = object  # Returned | Crashed | BudgetExhausted


@dataclass(frozen=True)
class Substitution:
    """Interceptor answer: return this instead of running the real effect."""

    output: object  # value, UNIT, or CrashOut

    def apply(self):
        if isinstance(self.output, CrashOut):
            raise CrashSignal(self.output.kind, self.output.message, self.output.site)
        return self.output


@dataclass(frozen=True)
class CrashOut:
    """A crash observed as a point's effect; replayable like a value."""

    kind: CrashKind
    message: str
    site: tuple[str, str, str] | None = None


PointId = tuple[str, str, str, int]  # (app_id, handler, block_id, statement index)


class Interceptor:
    """No-op base; record/replay interceptors override the three hooks."""

    def before(self, point_id: PointId, stmt, inputs: tuple) -> Substitution | None:
        return None

    def after(self, point_id: PointId, stmt, inputs: tuple, output) -> None:
        pass

    def after_crash(self, point_id: PointId, stmt, inputs: tuple, sig: CrashSignal) -> None:
        pass


class LocalServices:
    """In-process service backend for single-App execution (no cluster)."""

    def __init__(self, app: AppSpec, rng_seed: int = 0):
        self.state = {app.app_id: dict(app.initial_state)}
        self.database: dict[tuple[str, bytes], object] = {}
        self.rng = random.Random(rng_seed)
        self.clock_ms = 0
        self._stmt_accum = 0

    def tick_statement(self) -> None:
        self._stmt_accum += 1
        if self._stmt_accum >= 1000:
            self._stmt_accum = 0
            self.clock_ms += 1

    def sys_random(self) -> int:
        return self.rng.getrandbits(63)

    def sys_now(self) -> int:
        return self.clock_ms

    def state_read(self, app_id: str, key: bytes):
        return self.state.setdefault(app_id, {}).get(key, b"")

    def state_write(self, app_id: str, key: bytes, value) -> None:
        self.state.setdefault(app_id, {})[key] = value

    def db_read(self, table: str, key: bytes):
        try:
            return self.database[(table, key)]
        except KeyError:
            raise CrashSignal(CrashKind.SYS_SQL, f"no row in {table!r} for key 0x{key.hex()}") from None

    def db_write(self, table: str, key: bytes, value) -> None:
        self.database[(table, key)] = value

    def rpc(self, env: "ExecutionEnv", target_app: str, target_handler: str, args: list) -> object:
        raise CrashSignal(CrashKind.SYS_IO, f"rpc to {target_app!r} unavailable outside a cluster")


@dataclass
class ExecutionEnv:
    """Per-invocation execution context wired to a service backend.

    ``probe_log`` and ``observations`` may be shared across RPC hops of one
    request so the whole-request sequences are visible to callers.
    """

    app_id: str
    services: object
    interceptor: Interceptor | None = None
    step_budget: int = DEFAULT_STEP_BUDGET
    probe_sink: Callable[[tuple[str, str, str]], None] | None = None
    probe_log: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    steps: int = 0

    @classmethod
    def standalone(cls, app: AppSpec, rng_seed: int = 0, **kw) -> "ExecutionEnv":
        return cls(app_id=app.app_id, services=LocalServices(app, rng_seed), **kw)

    def step(self) -> None:
        if self.steps >= self.step_budget:
            raise BudgetSignal()
        self.steps += 1
        self.services.tick_statement()

    def fire_probe(self, probe: tuple[str, str, str]) -> None:
        self.probe_log.append(probe)
        if self.probe_sink is not None:
            self.probe_sink(probe)

    def fire_point(self, point_id: PointId, stmt, inputs: tuple, real: Callable[[], object]):
        if self.interceptor is not None:
            sub = self.interceptor.before(point_id, stmt, inputs)
            if sub is not None:
                return sub.apply()
        try:
            out = real()
        except CrashSignal as sig:
            if sig.site is None:
                sig.site = (point_id[0], point_id[1], point_id[2])
            if self.interceptor is not None:
                self.interceptor.after_crash(point_id, stmt, inputs, sig)
            raise
        if self.interceptor is not None:
            self.interceptor.after(point_id, stmt, inputs, out)
        return out


def _type_error(where: str, expected: str, got) -> CrashSignal:
    return CrashSignal(
        CrashKind.SYS_UNCLEARED_THROWABLE,
        f"{where}: expected {expected}, got {type(got).__name__}",
    )


def _as_int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise _type_error(where, "int", v)
    return v


def _as_bytes(v, where: str) -> bytes:
    if not isinstance(v, bytes):
        raise _type_error(where, "bytes", v)
    return v


def _as_bool(v, where: str) -> bool:
    if not isinstance(v, bool):
        raise _type_error(where, "bool", v)
    return v


def eval_expr(e: Expr, vars: dict):
    op = e.op
    if op == "const":
        return e.args[0]
    if op == "var":
        name = e.args[0]
        try:
            return vars[name]
        except KeyError:
            raise CrashSignal(CrashKind.SYS_NULL_POINTER, f"undefined variable {name!r}") from None
    if op == "bytes_le":
        n = _as_int(eval_expr(e.args[0], vars), "bytes_le")
        width = e.args[1]
        return (n & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
    args = [eval_expr(a, vars) for a in e.args]
    if op in ("add", "sub", "mul", "div"):
        x = _as_int(args[0], op)
        y = _as_int(args[1], op)
        if op == "add":
            return wrap64(x + y)
        if op == "sub":
            return wrap64(x - y)
        if op == "mul":
            return wrap64(x * y)
        if y == 0:
            raise CrashSignal(CrashKind.SYS_ARITHMETIC, "division by zero")
        q = abs(x) // abs(y)  # truncation toward zero
        return wrap64(q if (x >= 0) == (y >= 0) else -q)
    if op in ("eq", "ne"):
        same = type(args[0]) is type(args[1]) and args[0] == args[1]
        return same if op == "eq" else not same
    if op in ("lt", "le", "gt", "ge"):
        x, y = args
        if isinstance(x, bool) or isinstance(y, bool) or type(x) is not type(y):
            raise _type_error(op, "two ints or two byte strings", (x, y))
        if op == "lt":
            return x < y
        if op == "le":
            return x <= y
        if op == "gt":
            return x > y
        return x >= y
    if op in ("and", "or"):
        x = _as_bool(args[0], op)
        y = _as_bool(args[1], op)
        return (x and y) if op == "and" else (x or y)
    if op == "not":
        return not _as_bool(args[0], "not")
    if op == "concat":
        return _as_bytes(args[0], "concat") + _as_bytes(args[1], "concat")
    if op == "slice":
        b = _as_bytes(args[0], "slice")
        lo = _as_int(args[1], "slice")
        hi = _as_int(args[2], "slice")
        if not (0 <= lo <= hi <= len(b)):
            raise CrashSignal(CrashKind.SYS_BOUNDS, f"slice [{lo}:{hi}] out of range for {len(b)} bytes")
        return b[lo:hi]
    if op == "len":
        return len(_as_bytes(args[0], "len"))
    if op == "int_le":
        b = _as_bytes(args[0], "int_le")
        if not b:
            return 0
        return int.from_bytes(b[:8], "little", signed=True)
    raise AssertionError(f"unhandled op {op!r}")


def _exec_statement(env: ExecutionEnv, handler: str, block: Block, idx: int, stmt, vars: dict) -> None:
    pid: PointId = (env.app_id, handler, block.block_id, idx)
    if isinstance(stmt, Assign):
        vars[stmt.var] = eval_expr(stmt.expr, vars)
    elif isinstance(stmt, SysCall):
        if stmt.primitive == "random":
            vars[stmt.var] = env.fire_point(pid, stmt, (), env.services.sys_random)
        else:
            vars[stmt.var] = env.fire_point(pid, stmt, (), env.services.sys_now)
    elif isinstance(stmt, StateRead):
        key = _as_bytes(eval_expr(stmt.key, vars), "state key")
        vars[stmt.var] = env.fire_point(pid, stmt, (key,), lambda: env.services.state_read(env.app_id, key))
    elif isinstance(stmt, StateWrite):
        key = _as_bytes(eval_expr(stmt.key, vars), "state key")
        value = eval_expr(stmt.value, vars)

        def write_state():
            env.services.state_write(env.app_id, key, value)
            return UNIT

        env.fire_point(pid, stmt, (key, value), write_state)
    elif isinstance(stmt, RpcCall):
        args = []
        for i, a in enumerate(stmt.args):
            args.append(_as_bytes(eval_expr(a, vars), f"rpc arg {i}"))
        vars[stmt.var] = env.fire_point(
            pid, stmt, tuple(args),
            lambda: env.services.rpc(env, stmt.target_app, stmt.target_handler, args),
        )
    elif isinstance(stmt, DbRead):
        key = _as_bytes(eval_expr(stmt.key, vars), "db key")
        vars[stmt.var] = env.fire_point(pid, stmt, (key,), lambda: env.services.db_read(stmt.table, key))
    elif isinstance(stmt, DbWrite):
        key = _as_bytes(eval_expr(stmt.key, vars), "db key")
        value = eval_expr(stmt.value, vars)
        env.observations.append((f"db:{stmt.table}", value))

        def write_db():
            env.services.db_write(stmt.table, key, value)
            return UNIT

        env.fire_point(pid, stmt, (key, value), write_db)
    elif isinstance(stmt, EmitSink):
        env.observations.append((stmt.sink_id, eval_expr(stmt.value, vars)))
    else:
        raise AssertionError(f"unknown statement {stmt!r}")


def execute_handler(env: ExecutionEnv, app: AppSpec, handler: str, args: list) -> Outcome:
    """Interpret a handler from its entry block until Return, Crash, or budget.

    Every entered block fires a coverage probe; each statement and each
    terminator evaluation costs one budget step, so all loops terminate.
    """
    h = app.handler(handler)
    if len(args) != len(h.params):
        raise ValueError(f"{app.app_id}.{handler} takes {len(h.params)} args, got {len(args)}")
    vars: dict = dict(zip(h.params, args))
    block = h.blocks[h.entry]
    try:
        while True:
            env.fire_probe((app.app_id, handler, block.block_id))
            site = (app.app_id, handler, block.block_id)
            try:
                for idx, stmt in enumerate(block.statements):
                    env.step()
                    _exec_statement(env, handler, block, idx, stmt, vars)
                env.step()
                term = block.terminator
                if isinstance(term, Return):
                    return Returned(eval_expr(term.expr, vars))
                if isinstance(term, Goto):
                    block = h.blocks[term.target]
                elif isinstance(term, Branch):
                    cond = eval_expr(term.cond, vars)
                    if not isinstance(cond, bool):
                        raise _type_error("branch condition", "bool", cond)
                    block = h.blocks[term.then_block if cond else term.else_block]
                else:  # CrashTerm
                    raise CrashSignal(term.kind, render_value(eval_expr(term.message, vars)))
            except CrashSignal as sig:
                if sig.site is None:
                    sig.site = site
                raise
    except CrashSignal as sig:
        return Crashed(sig.kind, sig.message, sig.site)
    except BudgetSignal:
        return BudgetExhausted()
