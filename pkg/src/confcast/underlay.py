"""Physical network model: directed graph, fixed routing, fluid link dynamics.

Links carry a capacity in kbps and a propagation delay in ms.  Loads above
capacity translate into a loss fraction and a growing queuing-delay price;
loads below capacity drain the price back toward zero.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping

EdgeKey = tuple[str, str]


class NoPathError(Exception):
    """No up-path exists from head to tail."""


@dataclass
class PhysLink:
    id: str
    src: str
    dst: str
    capacity: float            # kbps
    prop_delay: float = 0.0    # ms
    up: bool = True
    cross_traffic: float = 0.0  # kbps of exogenous load

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ValueError(f"link {self.id}: self-loop {self.src}")
        if self.capacity <= 0:
            raise ValueError(f"link {self.id}: capacity must be positive")
        if self.prop_delay < 0:
            raise ValueError(f"link {self.id}: negative propagation delay")
        if self.cross_traffic < 0:
            raise ValueError(f"link {self.id}: negative cross traffic")


class UnderlayGraph:
    """Directed physical graph over participant and router nodes."""

    def __init__(self, nodes: Iterable[str], links: Iterable[PhysLink]):
        self.nodes: tuple[str, ...] = tuple(sorted(set(nodes)))
        node_set = set(self.nodes)
        self.links: dict[str, PhysLink] = {}
        for link in links:
            if link.id in self.links:
                raise ValueError(f"duplicate link id {link.id}")
            if link.src not in node_set or link.dst not in node_set:
                raise ValueError(f"link {link.id}: unknown endpoint")
            self.links[link.id] = link
        self._out: dict[str, list[PhysLink]] = {n: [] for n in self.nodes}
        for link in sorted(self.links.values(), key=lambda l: l.id):
            self._out[link.src].append(link)

    def out_links(self, node: str) -> list[PhysLink]:
        return self._out[node]

    def link(self, link_id: str) -> PhysLink:
        return self.links[link_id]


@dataclass(frozen=True)
class Route:
    """Ordered physical link ids from overlay head to overlay tail."""

    links: tuple[str, ...]

    def __iter__(self):
        return iter(self.links)

    def __len__(self) -> int:
        return len(self.links)


def compute_route(
    graph: UnderlayGraph,
    head: str,
    tail: str,
    transit: Iterable[str] | None = None,
) -> Route:
    """Minimum propagation-delay path, ties broken by smallest link-id sequence.

    ``transit`` restricts which nodes may appear in the interior of the path
    (routers forward traffic, conference hosts do not).  ``head`` and ``tail``
    are always allowed at their own ends.  Raises :class:`NoPathError` when the
    tail is unreachable over up links.
    """
    if head == tail:
        raise ValueError("head and tail must differ")
    if head not in graph._out or tail not in graph._out:
        raise ValueError("unknown endpoint")
    allowed_interior = None if transit is None else set(transit)

    # Dijkstra on (delay, link-id tuple); tuples of a simple path are never
    # prefixes of another simple path to the same node, so the lexicographic
    # order is stable under extension.
    best: dict[str, tuple[float, tuple[str, ...]]] = {}
    heap: list[tuple[float, tuple[str, ...], str]] = [(0.0, (), head)]
    done: set[str] = set()
    while heap:
        delay, ids, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == tail:
            return Route(ids)
        if node != head and allowed_interior is not None and node not in allowed_interior:
            continue  # may terminate a path but not forward
        for link in graph.out_links(node):
            if not link.up or link.dst in done:
                continue
            cand = (delay + link.prop_delay, ids + (link.id,))
            prev = best.get(link.dst)
            if prev is None or cand < prev:
                best[link.dst] = cand
                heapq.heappush(heap, (cand[0], cand[1], link.dst))
    raise NoPathError(f"no up-path from {head} to {tail}")


def link_load(
    graph: UnderlayGraph,
    allocation,
    routes: Mapping[EdgeKey, Route],
) -> dict[str, float]:
    """Per-physical-link load: cross traffic plus all routed overlay rates.

    ``allocation`` maps (session, overlay edge) pairs to kbps; negative
    internal iterates count as zero.  Down links carry nothing.
    """
    load: dict[str, float] = {}
    for link in graph.links.values():
        load[link.id] = link.cross_traffic if link.up else 0.0
    items = allocation.items() if hasattr(allocation, "items") else allocation
    for (_, edge), rate in items:
        if rate <= 0.0:
            continue
        route = routes.get(edge)
        if route is None:
            continue
        for link_id in route:
            load[link_id] += rate
    return load


def loss_fraction(y: float, capacity: float) -> float:
    """Fraction of offered traffic dropped: (y - C)+ / y, zero when idle."""
    if y <= 0.0:
        return 0.0
    return max(y - capacity, 0.0) / y


def price_step(price_ms: float, y: float, capacity: float, dt: float) -> float:
    """One projected queuing-delay update; dt seconds per control tick.

    The increment (y - C)/C is a rate of queue growth in seconds per second;
    scaling by dt keeps the price in physical time units (stored in ms).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return max(0.0, price_ms + 1000.0 * dt * (y - capacity) / capacity)


def overlay_loss(route: Route, link_losses: Mapping[str, float]) -> float:
    """Additive per-link loss along the route, capped at 1."""
    return min(1.0, sum(link_losses.get(l, 0.0) for l in route))


def overlay_queue_delay(route: Route, prices_ms: Mapping[str, float]) -> float:
    """Summed queuing delay along the route, in ms."""
    return sum(prices_ms.get(l, 0.0) for l in route)


def overlay_prop_delay(route: Route, graph: UnderlayGraph) -> float:
    """Summed propagation delay along the route, in ms."""
    return sum(graph.link(l).prop_delay for l in route)
