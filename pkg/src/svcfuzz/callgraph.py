"""Cross-service call graphs: block-level CFG edges plus RPC edges.

Nodes are block refs (app, handler, block_id) together with synthetic
method-level nodes (app, handler).  Edges are unit weight: one per
intra-handler CFG successor pair and one per RPC statement that resolves to
a deployed callee (pointing at the callee handler's entry block).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .appmodel import AppSpec, Branch, Goto, RpcCall

Node = tuple  # (app, handler, block) or (app, handler)


@dataclass(frozen=True)
class CallGraph:
    nodes: tuple[Node, ...]
    edges: tuple[tuple[Node, Node], ...]
    warnings: tuple[str, ...] = ()
    _succ: dict = field(default_factory=dict, repr=False, compare=False)
    _pred: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for u, v in self.edges:
            self._succ.setdefault(u, []).append(v)
            self._pred.setdefault(v, []).append(u)

    def successors(self, node: Node) -> list[Node]:
        return self._succ.get(node, [])

    def predecessors(self, node: Node) -> list[Node]:
        return self._pred.get(node, [])


def build_call_graph(apps: Iterable[AppSpec]) -> CallGraph:
    """Full rebuild from a set of App versions; deterministic node ordering.

    RPC statements whose target is not among ``apps`` produce a warning
    entry instead of an edge.
    """
    apps = sorted(apps, key=lambda a: a.app_id)
    by_id = {a.app_id: a for a in apps}
    nodes: list[Node] = []
    edges: list[tuple[Node, Node]] = []
    warnings: list[str] = []
    for app in apps:
        for h in app.handlers:
            nodes.append((app.app_id, h.name))
            for bid in sorted(h.blocks):
                nodes.append((app.app_id, h.name, bid))
    for app in apps:
        for h in app.handlers:
            for bid in sorted(h.blocks):
                block = h.blocks[bid]
                src = (app.app_id, h.name, bid)
                term = block.terminator
                if isinstance(term, Goto):
                    edges.append((src, (app.app_id, h.name, term.target)))
                elif isinstance(term, Branch):
                    edges.append((src, (app.app_id, h.name, term.then_block)))
                    edges.append((src, (app.app_id, h.name, term.else_block)))
                for stmt in block.statements:
                    if not isinstance(stmt, RpcCall):
                        continue
                    callee = by_id.get(stmt.target_app)
                    if callee is None:
                        warnings.append(f"{app.app_id}.{h.name}.{bid}: rpc target app {stmt.target_app!r} unknown")
                        continue
                    try:
                        target = callee.handler(stmt.target_handler)
                    except KeyError:
                        warnings.append(
                            f"{app.app_id}.{h.name}.{bid}: rpc target handler "
                            f"{stmt.target_app}.{stmt.target_handler} unknown"
                        )
                        continue
                    edges.append((src, (stmt.target_app, stmt.target_handler, target.entry)))
    return CallGraph(tuple(nodes), tuple(edges), tuple(warnings))
