"""Conference sessions, overlay rate allocation, and the two-layer session graph.

A session graph has a source vertex, one relay vertex per receiver or helper,
and one sink vertex per receiver.  Edge capacities are the overlay link rates
allocated to the session; the relay-to-own-sink edge gets a finite surrogate
for infinity so that all packing arithmetic stays total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .underlay import EdgeKey, NoPathError, Route, UnderlayGraph, compute_route


class ReceiverUnreachable(Exception):
    def __init__(self, receiver: str):
        super().__init__(f"no delay-feasible path reaches receiver {receiver}")
        self.receiver = receiver


@dataclass(frozen=True)
class Session:
    id: str
    source: str
    receivers: tuple[str, ...]
    helpers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "receivers", tuple(sorted(self.receivers)))
        object.__setattr__(self, "helpers", tuple(sorted(self.helpers)))
        if self.source in self.receivers:
            raise ValueError(f"session {self.id}: source listed as receiver")
        overlap = set(self.helpers) & ({self.source} | set(self.receivers))
        if overlap:
            raise ValueError(f"session {self.id}: helpers overlap participants: {overlap}")
        if not self.receivers:
            raise ValueError(f"session {self.id}: needs at least one receiver")

    @property
    def relays(self) -> tuple[str, ...]:
        return tuple(sorted(self.receivers + self.helpers))

    def edges(self) -> list[EdgeKey]:
        """Overlay links this session can use: source->relay and relay->sink."""
        out: list[EdgeKey] = [(self.source, v) for v in self.relays]
        for v in self.relays:
            for j in self.receivers:
                if v != j:
                    out.append((v, j))
        return out


@dataclass(frozen=True)
class OverlayLink:
    head: str
    tail: str
    route: Route

    def __post_init__(self) -> None:
        if self.head == self.tail:
            raise ValueError("overlay link endpoints must differ")

    @property
    def key(self) -> EdgeKey:
        return (self.head, self.tail)


class RateAllocation:
    """Per (session, overlay link) rates in kbps.

    Internal iterates may dip below zero under the controller's bracket rule;
    every exported value is clamped to zero.
    """

    def __init__(self, rates: Mapping[tuple[str, EdgeKey], float] | None = None):
        self._rates: dict[tuple[str, EdgeKey], float] = dict(rates or {})

    def raw(self, session_id: str, edge: EdgeKey) -> float:
        return self._rates.get((session_id, edge), 0.0)

    def exported(self, session_id: str, edge: EdgeKey) -> float:
        return max(0.0, self._rates.get((session_id, edge), 0.0))

    def set(self, session_id: str, edge: EdgeKey, rate: float) -> None:
        self._rates[(session_id, edge)] = rate

    def drop(self, session_id: str, edge: EdgeKey) -> None:
        self._rates.pop((session_id, edge), None)

    def has(self, session_id: str, edge: EdgeKey) -> bool:
        return (session_id, edge) in self._rates

    def keys(self):
        return self._rates.keys()

    def items(self):
        """Exported (clamped) items; the view consumers should see."""
        return [(k, max(0.0, v)) for k, v in self._rates.items()]

    def raw_items(self):
        return self._rates.items()

    def session_edges(self, session_id: str) -> list[EdgeKey]:
        return sorted(e for (m, e) in self._rates if m == session_id)

    def copy(self) -> "RateAllocation":
        return RateAllocation(self._rates)

    def __len__(self) -> int:
        return len(self._rates)


def conference_nodes(sessions: Iterable[Session]) -> set[str]:
    nodes: set[str] = set()
    for s in sessions:
        nodes.add(s.source)
        nodes.update(s.receivers)
        nodes.update(s.helpers)
    return nodes


def map_routes(
    graph: UnderlayGraph,
    sessions: Iterable[Session],
    routers: Iterable[str] | None = None,
) -> dict[EdgeKey, Route]:
    """Underlay route for every overlay link any session can use.

    Only ``routers`` may forward traffic in path interiors (hosts do not
    transit); by default every node that is not a conference endpoint counts
    as a router.  Overlay links with no up-path are omitted.
    """
    sessions = list(sessions)
    if routers is None:
        transit = set(graph.nodes) - conference_nodes(sessions)
    else:
        transit = set(routers)
    needed: set[EdgeKey] = set()
    for session in sessions:
        needed.update(session.edges())
    routes: dict[EdgeKey, Route] = {}
    for head, tail in sorted(needed):
        try:
            routes[(head, tail)] = compute_route(graph, head, tail, transit)
        except NoPathError:
            continue
    return routes


def zero_allocation(sessions: Iterable[Session], links: Iterable[EdgeKey]) -> RateAllocation:
    """All-zeros allocation over each session's usable overlay links."""
    link_set = set(links)
    alloc = RateAllocation()
    for session in sessions:
        for edge in session.edges():
            if edge in link_set:
                alloc.set(session.id, edge, 0.0)
    return alloc


@dataclass
class SessionGraph:
    """Delay-pruned two-layer DAG for one session.

    ``source_caps[v]`` is the capacity of the source->relay(v) edge and
    ``relay_caps[(v, j)]`` of the relay(v)->sink(j) edge (v != j); absent keys
    mean the edge was pruned or its overlay link does not exist.  Every
    receiver's own relay->sink edge is implicit with capacity ``inf_cap``.
    """

    source: str
    receivers: tuple[str, ...]
    helpers: tuple[str, ...]
    source_caps: dict[str, float]
    relay_caps: dict[tuple[str, str], float]
    inf_cap: float

    @property
    def relays(self) -> tuple[str, ...]:
        return tuple(sorted(self.receivers + self.helpers))

    def source_cap(self, v: str) -> float:
        return self.source_caps.get(v, 0.0)

    def relay_cap(self, v: str, j: str) -> float:
        if v == j:
            # own relay->sink edge, always present for receivers
            return self.inf_cap if v in self.receivers else 0.0
        return self.relay_caps.get((v, j), 0.0)

    def has_source_edge(self, v: str) -> bool:
        return v in self.source_caps

    def has_relay_edge(self, v: str, j: str) -> bool:
        if v == j:
            return v in self.receivers
        return (v, j) in self.relay_caps


def build_session_graph(
    session: Session,
    allocation: RateAllocation,
    prop_delays: Mapping[EdgeKey, float],
    delay_bound: float,
) -> SessionGraph:
    """Build the two-layer graph, dropping edges that break the delay bound.

    ``prop_delays`` maps existing overlay links to their one-hop propagation
    delay in ms; overlay links not present are treated as nonexistent.  An
    edge source->v is kept when its one-hop delay fits the bound; an edge
    v->sink(j) is kept when both the one-hop delay of (v, j) and the two-hop
    delay via v fit.  Raises :class:`ReceiverUnreachable` when delay pruning
    leaves some sink with no path from the source.
    """
    s = session.source
    source_caps: dict[str, float] = {}
    relay_caps: dict[tuple[str, str], float] = {}
    for v in session.relays:
        d_sv = prop_delays.get((s, v))
        if d_sv is None or d_sv > delay_bound:
            continue
        source_caps[v] = allocation.exported(session.id, (s, v))
        for j in session.receivers:
            if j == v:
                continue
            d_vj = prop_delays.get((v, j))
            if d_vj is None or d_vj > delay_bound or d_sv + d_vj > delay_bound:
                continue
            relay_caps[(v, j)] = allocation.exported(session.id, (v, j))

    for j in session.receivers:
        reachable = j in source_caps or any(
            (v, j) in relay_caps for v in session.relays
        )
        if not reachable:
            raise ReceiverUnreachable(j)

    # +1 (not +1.0) keeps exact types (Fraction, int) exact
    inf_cap = sum(source_caps.values()) + 1
    return SessionGraph(
        source=s,
        receivers=session.receivers,
        helpers=session.helpers,
        source_caps=source_caps,
        relay_caps=relay_caps,
        inf_cap=inf_cap,
    )
