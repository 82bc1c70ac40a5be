"""Critical-cut extraction and the subgradient of the session rate.

The session rate is a pointwise minimum of linear cut capacities, so the 0/1
indicator of any cut attaining it is a valid subgradient with respect to the
overlay link rates.
"""

from __future__ import annotations

from dataclasses import dataclass

from .overlay import SessionGraph
from .treepack import min_min_cut
from .underlay import EdgeKey


@dataclass(frozen=True)
class CriticalCut:
    """A source-side vertex set whose crossing edges attain the min-min-cut.

    Vertex labels: ``"s"``, ``"r:<node>"``, ``"h:<node>"``, ``"t:<node>"``.
    ``cut_edges`` are overlay links (head, tail).
    """

    z: frozenset[str]
    cut_edges: tuple[EdgeKey, ...]
    value: float
    critical_receiver: str


def _relay_label(g: SessionGraph, v: str) -> str:
    return f"h:{v}" if v in g.helpers else f"r:{v}"


def critical_cut(g: SessionGraph) -> CriticalCut:
    """Deterministic critical cut for the session graph.

    With j* the critical receiver, a relay v sits on the source side exactly
    when its edge into sink j* is strictly cheaper than its source edge; on
    ties the source edge is cut.  The infinite own-relay edge never crosses.
    """
    value, j_star = min_min_cut(g)
    z = {"s"}
    cut_edges: list[EdgeKey] = []
    check = 0
    for v in g.relays:
        a = g.source_cap(v)
        b = g.relay_cap(v, j_star)
        if b < a:
            z.add(_relay_label(g, v))
            if g.has_relay_edge(v, j_star):
                cut_edges.append((v, j_star))
            check += b
        else:
            if g.has_source_edge(v):
                cut_edges.append((g.source, v))
            check += a
    for j in g.receivers:
        if j != j_star:
            z.add(f"t:{j}")
    assert check == value, "cut capacity must equal the min-min-cut"
    return CriticalCut(
        z=frozenset(z),
        cut_edges=tuple(sorted(cut_edges)),
        value=value,
        critical_receiver=j_star,
    )


def subgradient(g: SessionGraph, cut: CriticalCut) -> dict[EdgeKey, float]:
    """0/1 subgradient of the session rate over the graph's overlay links."""
    crossing = set(cut.cut_edges)
    grad: dict[EdgeKey, float] = {}
    for v in g.relays:
        if g.has_source_edge(v):
            e = (g.source, v)
            grad[e] = 1.0 if e in crossing else 0.0
    for (v, j) in g.relay_caps:
        grad[(v, j)] = 1.0 if (v, j) in crossing else 0.0
    return grad
