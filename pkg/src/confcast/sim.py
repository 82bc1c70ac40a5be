"""Deterministic discrete-time fluid simulator.

Every tick recomputes link loads, loss fractions, and queuing-delay prices.
On the rate interval each (session, overlay link) rate takes one controller
step using measurements averaged over the window and control information one
report interval stale.  On the report interval each source rebuilds its
session graph, packs trees, and publishes the critical cut and utility
derivative.  Scenario events mutate the underlay or the conference roster at
their timestamps.  Given identical inputs the run is bit-reproducible; the
seed only matters to stochastic extensions, of which there are none by
default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .control import (
    ControlParams,
    UtilityParams,
    quickstart_params,
    rate_update,
    utility,
    utility_deriv,
)
from .cut import critical_cut
from .overlay import (
    RateAllocation,
    ReceiverUnreachable,
    Session,
    build_session_graph,
    conference_nodes,
    map_routes,
    zero_allocation,
)
from .treepack import TreeSet, min_min_cut, pack_trees
from .underlay import (
    EdgeKey,
    Route,
    UnderlayGraph,
    link_load,
    loss_fraction,
    overlay_prop_delay,
    price_step,
)
from . import oracle as _oracle


class ConfigError(Exception):
    pass


EVENT_KINDS = ("add_cross", "remove_cross", "fail", "restore", "join", "leave")


@dataclass(frozen=True)
class ScenarioEvent:
    at: float           # seconds
    kind: str           # one of EVENT_KINDS
    target: str         # link id or node id
    value: float = 0.0  # kbps for add_cross

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.at < 0:
            raise ValueError("event time must be nonnegative")


@dataclass
class MetricsRow:
    t: float
    send_kbps: dict[str, float]
    delay_ms: dict[str, float]
    loss: dict[str, float]
    utility: float
    link_load: dict[str, float]
    link_price_ms: dict[str, float]


@dataclass(frozen=True)
class SimParams:
    control: ControlParams = ControlParams()
    utility: UtilityParams = UtilityParams()
    quantum_kbps: float = 1.0
    sample_interval_ms: float = 1000.0
    instantaneous_control: bool = False
    join_rate_kbps: float = 1.0
    crash_leave: bool = False
    record_trajectory: bool = False


@dataclass
class _Publication:
    cut_edges: frozenset[EdgeKey]
    u_deriv: float
    rate: float
    trees: TreeSet | None


def _ticks(interval_ms: float, tick_ms: float, name: str) -> int:
    n = interval_ms / tick_ms
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ConfigError(f"tick must divide {name} ({interval_ms} ms)")
    return int(round(n))


class Simulation:
    def __init__(
        self,
        topology: UnderlayGraph,
        sessions: Iterable[Session],
        params: SimParams,
        scenario: Sequence[ScenarioEvent] = (),
        duration_s: float = 300.0,
        tick_ms: float = 10.0,
        seed: int = 0,
        routers: Iterable[str] | None = None,
    ):
        if duration_s <= 0:
            raise ConfigError("duration must be positive")
        if tick_ms <= 0:
            raise ConfigError("tick must be positive")
        self.graph = topology
        self.params = params
        self.duration_s = duration_s
        self.tick_s = tick_ms / 1000.0
        self.seed = seed
        self.sessions: dict[str, Session] = {
            s.id: s for s in sorted(sessions, key=lambda s: s.id)
        }
        if not self.sessions:
            raise ConfigError("at least one session is required")
        self.scenario = sorted(scenario, key=lambda e: (e.at, EVENT_KINDS.index(e.kind), e.target))
        for ev in self.scenario:
            if ev.kind in ("add_cross", "remove_cross", "fail", "restore"):
                if ev.target not in topology.links:
                    raise ConfigError(f"event references unknown link {ev.target}")
            else:
                if ev.target not in topology.nodes:
                    raise ConfigError(f"event references unknown node {ev.target}")

        ctl = params.control
        self.rate_every = _ticks(ctl.rate_interval_ms, tick_ms, "rate interval")
        self.report_every = _ticks(ctl.report_interval_ms, tick_ms, "report interval")
        self.sample_every = _ticks(params.sample_interval_ms, tick_ms, "sample interval")

        if routers is None:
            hosts = conference_nodes(self.sessions.values())
            hosts.update(
                ev.target for ev in self.scenario if ev.kind in ("join", "leave")
            )
            self.routers = set(topology.nodes) - hosts
        else:
            self.routers = set(routers)

        self.routes: dict[EdgeKey, Route] = {}
        self.alloc = RateAllocation()
        self._rebuild_overlay(initial=True)
        self.prices: dict[str, float] = {lid: 0.0 for lid in sorted(topology.links)}
        self.active: dict[str, _Publication] = {}
        self.pending: dict[str, _Publication] = {}
        self.latest: dict[str, _Publication] = {}
        self._win_loss: dict[EdgeKey, float] = {}
        self._win_queue: dict[EdgeKey, float] = {}
        self._win_ticks = 0
        self._pack_memo: dict[tuple, TreeSet] = {}
        self.trajectory: list[tuple[dict, dict]] = []

    # -- overlay/session bookkeeping ---------------------------------------

    def _rebuild_overlay(self, initial: bool = False) -> None:
        self.routes = map_routes(self.graph, self.sessions.values(), self.routers)
        valid: set[tuple[str, EdgeKey]] = set()
        for session in self.sessions.values():
            for edge in session.edges():
                if edge in self.routes:
                    valid.add((session.id, edge))
        for key in list(self.alloc.keys()):
            if key not in valid:
                self.alloc.drop(*key)
        init_rate = 0.0 if initial else self.params.join_rate_kbps
        for m, edge in sorted(valid):
            if not self.alloc.has(m, edge):
                self.alloc.set(m, edge, init_rate)

    def _apply_event(self, ev: ScenarioEvent) -> None:
        if ev.kind == "add_cross":
            self.graph.link(ev.target).cross_traffic += ev.value
        elif ev.kind == "remove_cross":
            self.graph.link(ev.target).cross_traffic = 0.0
        elif ev.kind == "fail":
            self.graph.link(ev.target).up = False
            self.prices[ev.target] = 0.0
            self._rebuild_overlay()
        elif ev.kind == "restore":
            self.graph.link(ev.target).up = True
            self.prices[ev.target] = 0.0
            self._rebuild_overlay()
        elif ev.kind == "join":
            self._join(ev.target)
        elif ev.kind == "leave":
            self._leave(ev.target)

    def _join(self, node: str) -> None:
        if node in self.sessions:
            return
        members = sorted(self.sessions)
        for m in members:
            s = self.sessions[m]
            self.sessions[m] = replace(s, receivers=s.receivers + (node,))
        self.sessions[node] = Session(id=node, source=node, receivers=tuple(members))
        self.sessions = {m: self.sessions[m] for m in sorted(self.sessions)}
        self._rebuild_overlay()

    def _leave(self, node: str) -> None:
        if node not in self.sessions:
            return
        del self.sessions[node]
        for pub in (self.active, self.pending, self.latest):
            pub.pop(node, None)
        for m in sorted(self.sessions):
            s = self.sessions[m]
            self.sessions[m] = replace(
                s, receivers=tuple(r for r in s.receivers if r != node)
            )
        if self.params.crash_leave:
            self.active.clear()
            self.pending.clear()
            self.latest.clear()
        self._rebuild_overlay()

    # -- per-tick work ------------------------------------------------------

    def _measure(self) -> tuple[dict[str, float], dict[str, float]]:
        y = link_load(self.graph, self.alloc, self.routes)
        losses = {}
        for lid, link in self.graph.links.items():
            losses[lid] = loss_fraction(y[lid], link.capacity) if link.up else 0.0
        return y, losses

    def _accumulate(self, losses: Mapping[str, float]) -> None:
        for edge, route in self.routes.items():
            loss = min(1.0, sum(losses[l] for l in route))
            queue_s = sum(self.prices[l] for l in route) / 1000.0
            self._win_loss[edge] = self._win_loss.get(edge, 0.0) + loss
            self._win_queue[edge] = self._win_queue.get(edge, 0.0) + queue_s
        self._win_ticks += 1

    def _publish_all(self, t: float) -> None:
        _, beta_eff = quickstart_params(t, self.params.control, self.params.utility)
        dlt = self.params.utility.delta
        bound = self.params.control.delay_bound_ms
        for m in sorted(self.sessions):
            session = self.sessions[m]
            prop = {}
            for edge in session.edges():
                route = self.routes.get(edge)
                if route is not None:
                    prop[edge] = overlay_prop_delay(route, self.graph)
            try:
                g = build_session_graph(session, self.alloc, prop, bound)
            except ReceiverUnreachable:
                pub = _Publication(
                    cut_edges=frozenset(),
                    u_deriv=beta_eff / dlt,
                    rate=0.0,
                    trees=None,
                )
            else:
                rate, _ = min_min_cut(g)
                trees = self._pack_memoized(m, g)
                cc = critical_cut(g)
                u_d = beta_eff / (rate + dlt)
                assert u_d <= beta_eff / dlt + 1e-12  # bounded-derivative hypothesis
                assert trees.total_rate <= rate + 1e-9  # never send above the cut
                pub = _Publication(
                    cut_edges=frozenset(cc.cut_edges),
                    u_deriv=u_d,
                    rate=rate,
                    trees=trees,
                )
            self.latest[m] = pub
            if self.params.instantaneous_control:
                self.active[m] = pub
            else:
                prev = self.pending.get(m)
                if prev is not None:
                    self.active[m] = prev
                self.pending[m] = pub

    def _pack_memoized(self, m: str, g) -> TreeSet:
        q = self.params.quantum_kbps
        key = (
            m,
            tuple(sorted((v, int(c / q + 1e-9)) for v, c in g.source_caps.items())),
            tuple(sorted((vj, int(c / q + 1e-9)) for vj, c in g.relay_caps.items())),
        )
        hit = self._pack_memo.get(key)
        if hit is None:
            if len(self._pack_memo) > 20000:
                self._pack_memo.clear()
            hit = pack_trees(g, q)
            self._pack_memo[key] = hit
        return hit

    def _update_rates(self, t: float) -> None:
        alpha_eff, _ = quickstart_params(t, self.params.control, self.params.utility)
        n = max(1, self._win_ticks)
        for m in sorted(self.sessions):
            pub = self.active.get(m)
            for edge in self.alloc.session_edges(m):
                loss = self._win_loss.get(edge, 0.0) / n
                queue = self._win_queue.get(edge, 0.0) / n
                if pub is not None:
                    xi = 1.0 if edge in pub.cut_edges else 0.0
                    u_d = pub.u_deriv
                else:
                    xi, u_d = 0.0, 0.0
                self.alloc.set(
                    m, edge,
                    rate_update(self.alloc.raw(m, edge), xi, u_d, loss, queue, alpha_eff),
                )
        self._win_loss.clear()
        self._win_queue.clear()
        self._win_ticks = 0

    def _sample(self, t: float, y: Mapping[str, float], losses: Mapping[str, float]) -> MetricsRow:
        send: dict[str, float] = {}
        delay: dict[str, float] = {}
        loss_out: dict[str, float] = {}
        total_u = 0.0
        for m in sorted(self.sessions):
            pub = self.latest.get(m)
            if pub is None or pub.trees is None or not pub.trees.trees:
                send[m] = 0.0
                delay[m] = 0.0
                loss_out[m] = 0.0
                total_u += utility(pub.rate if pub else 0.0, self.params.utility)
                continue
            source = self.sessions[m].source
            send[m] = pub.trees.total_rate
            wsum = 0.0
            dsum = 0.0
            lsum = 0.0
            for tree in pub.trees.trees:
                worst_ms = 0.0
                loss_total = 0.0
                n_sinks = 0
                for j in tree.direct:
                    d, l = self._path_cost([(source, j)], losses)
                    worst_ms = max(worst_ms, d)
                    loss_total += l
                    n_sinks += 1
                for v, targets in tree.branches.items():
                    for j in targets:
                        d, l = self._path_cost([(source, v), (v, j)], losses)
                        worst_ms = max(worst_ms, d)
                        loss_total += l
                        n_sinks += 1
                if n_sinks == 0:
                    continue
                wsum += tree.rate
                dsum += tree.rate * worst_ms
                lsum += tree.rate * (loss_total / n_sinks)
            delay[m] = dsum / wsum if wsum > 0 else 0.0
            loss_out[m] = lsum / wsum if wsum > 0 else 0.0
            total_u += utility(pub.rate, self.params.utility)
        return MetricsRow(
            t=t,
            send_kbps=send,
            delay_ms=delay,
            loss=loss_out,
            utility=total_u,
            link_load=dict(sorted(y.items())),
            link_price_ms=dict(sorted(self.prices.items())),
        )

    def _path_cost(self, edges: list[EdgeKey], losses: Mapping[str, float]) -> tuple[float, float]:
        delay_ms = 0.0
        loss = 0.0
        for e in edges:
            route = self.routes.get(e)
            if route is None:
                continue
            for l in route:
                delay_ms += self.graph.link(l).prop_delay + self.prices[l]
                loss += losses[l]
        return delay_ms, min(1.0, loss)

    # -- main loop ----------------------------------------------------------

    def run(self) -> list[MetricsRow]:
        rows: list[MetricsRow] = []
        n_ticks = int(round(self.duration_s / self.tick_s))
        ev_i = 0
        for i in range(n_ticks + 1):
            t = i * self.tick_s
            while ev_i < len(self.scenario) and self.scenario[ev_i].at <= t + 1e-9:
                self._apply_event(self.scenario[ev_i])
                ev_i += 1
            y, losses = self._measure()
            self._accumulate(losses)
            if i % self.report_every == 0:
                self._publish_all(t)
            if i % self.rate_every == 0:
                if self.params.record_trajectory:
                    self.trajectory.append((
                        {k: v for k, v in self.alloc.items()},
                        {lid: p / 1000.0 for lid, p in self.prices.items()},
                    ))
                if i > 0:
                    self._update_rates(t)
            for lid, link in self.graph.links.items():
                if link.up:
                    self.prices[lid] = price_step(
                        self.prices[lid], y[lid], link.capacity, self.tick_s
                    )
            if i % self.sample_every == 0:
                rows.append(self._sample(t, y, losses))
        return rows


def run(
    topology: UnderlayGraph,
    sessions: Iterable[Session],
    params: SimParams,
    scenario: Sequence[ScenarioEvent] = (),
    duration_s: float = 300.0,
    tick_ms: float = 10.0,
    seed: int = 0,
    routers: Iterable[str] | None = None,
) -> list[MetricsRow]:
    """Run the fluid simulation and return one metrics row per sample tick."""
    return Simulation(
        topology, sessions, params, scenario, duration_s, tick_ms, seed, routers
    ).run()


# ---------------------------------------------------------------------------
# baselines


def _star_tree(session: Session) -> list[EdgeKey]:
    return [(session.source, j) for j in session.receivers]


def simulcast_max(
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    util: UtilityParams | None = None,
    routers: Iterable[str] | None = None,
) -> dict[str, float]:
    """Best per-session rates when each source streams to receivers directly.

    A session whose source lacks a direct overlay path to some receiver
    cannot broadcast at all and gets rate zero.
    """
    util = util or UtilityParams()
    routes = map_routes(topology, sessions, routers)
    catalog: dict[str, list[list[EdgeKey]]] = {}
    for session in sessions:
        star = _star_tree(session)
        catalog[session.id] = [star] if all(e in routes for e in star) else []
    return _oracle.solve_restricted(topology, sessions, catalog, util, routers)


def mutualcast_max(
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    util: UtilityParams | None = None,
    routers: Iterable[str] | None = None,
) -> dict[str, float]:
    """Best rates over the star plus full one-relay trees (and helper trees)."""
    util = util or UtilityParams()
    routes = map_routes(topology, sessions, routers)
    catalog: dict[str, list[list[EdgeKey]]] = {}
    for session in sessions:
        trees: list[list[EdgeKey]] = []
        star = _star_tree(session)
        if all(e in routes for e in star):
            trees.append(star)
        for i in session.receivers:
            tree = [(session.source, i)] + [
                (i, j) for j in session.receivers if j != i
            ]
            if all(e in routes for e in tree):
                trees.append(tree)
        for h in session.helpers:
            tree = [(session.source, h)] + [(h, j) for j in session.receivers]
            if all(e in routes for e in tree):
                trees.append(tree)
        catalog[session.id] = trees
    return _oracle.solve_restricted(topology, sessions, catalog, util, routers)


# ---------------------------------------------------------------------------
# operation overhead


@dataclass(frozen=True)
class OverheadConfig:
    n_overlay_links: int
    n_sessions: int
    payload_bytes: float = 1000.0
    header_bytes: float = 46.0
    rate_control_kbps: float = 0.2
    report_kbps: float = 0.158
    aggregate_rate_kbps: float | None = None


@dataclass(frozen=True)
class OverheadEstimate:
    packet_overhead: float        # header share of every data packet
    control_report_kbps: float    # rate-control plus link-state report total

    def total_fraction(self, aggregate_rate_kbps: float) -> float:
        return self.packet_overhead + self.control_report_kbps / aggregate_rate_kbps


def estimate_overhead(cfg: OverheadConfig) -> OverheadEstimate:
    """Header share plus per-link control traffic totals."""
    packet = cfg.header_bytes / (cfg.header_bytes + cfg.payload_bytes)
    control = (
        (cfg.rate_control_kbps + cfg.report_kbps)
        * cfg.n_overlay_links
        * cfg.n_sessions
    )
    return OverheadEstimate(packet_overhead=packet, control_report_kbps=control)
