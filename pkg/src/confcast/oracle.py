"""Ground-truth engines: max-flow verifier, centralized solver, diagnostics.

Everything here is batch and desk-scale: a generic max-flow check for the
closed-form cuts, a projected supergradient solver for the central rate
allocation problem (and its restricted tree-catalog variants), the Lagrangian
of the penalized formulation, and the two-sided averaged-value convergence
bound evaluated from an observed trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
from scipy.optimize import nnls

from .control import UtilityParams, utility, utility_deriv
from .overlay import (
    RateAllocation,
    ReceiverUnreachable,
    Session,
    SessionGraph,
    build_session_graph,
    map_routes,
)
from .treepack import min_min_cut
from .underlay import EdgeKey, Route, UnderlayGraph, link_load, overlay_prop_delay


class Infeasible(Exception):
    """Some receiver cannot be reached under the delay bound."""


class BoundViolation(Exception):
    """The two-sided averaged-Lagrangian bound failed; implementation bug."""


@dataclass
class MpSolution:
    allocation: RateAllocation
    session_rates: dict[str, float]
    total_utility: float
    link_prices: dict[str, float]  # estimated multipliers, seconds


@dataclass
class ConvergenceDiagnostics:
    k: int
    avg_lagrangian: float
    saddle_estimate: float
    bound_low: float
    bound_high: float

    @property
    def gap(self) -> float:
        return self.avg_lagrangian - self.saddle_estimate


# ---------------------------------------------------------------------------
# max-flow oracle


def max_flow(g: SessionGraph, sink: str) -> tuple[float, tuple[EdgeKey, ...]]:
    """Exact max-flow value and a minimum cut, as overlay links.

    Used purely to verify the closed-form per-receiver cut; the own-relay
    edge carries the finite surrogate capacity, which dominates any flow.
    """
    if sink not in g.receivers:
        raise ValueError(f"{sink} is not a sink of the session graph")
    dg = nx.DiGraph()
    for v, cap in g.source_caps.items():
        dg.add_edge("s", f"v:{v}", capacity=float(cap))
    for (v, j), cap in g.relay_caps.items():
        dg.add_edge(f"v:{v}", f"t:{j}", capacity=float(cap))
    for j in g.receivers:
        dg.add_edge(f"v:{j}", f"t:{j}", capacity=float(g.inf_cap))
    if f"t:{sink}" not in dg:
        return 0.0, ()
    if "s" not in dg:
        return 0.0, ()
    value, (src_side, _) = nx.minimum_cut(dg, "s", f"t:{sink}")
    cut: list[EdgeKey] = []
    for u, w in dg.edges:
        if u in src_side and w not in src_side:
            if u == "s":
                cut.append((g.source, w[2:]))
            else:
                cut.append((u[2:], w[2:]))
    return value, tuple(sorted(cut))


# ---------------------------------------------------------------------------
# central solver machinery


class _SessionEval:
    """Delay-pruned structure of one session with variable indices."""

    def __init__(
        self,
        session: Session,
        skeleton: SessionGraph,
        var_of: Mapping[tuple[str, EdgeKey], int],
    ):
        self.id = session.id
        self.source = session.source
        self.receivers = session.receivers
        self.relays = session.relays
        self.src_idx: dict[str, int] = {}
        for v in skeleton.source_caps:
            self.src_idx[v] = var_of[(session.id, (session.source, v))]
        self.rel_idx: dict[tuple[str, str], int] = {}
        for (v, j) in skeleton.relay_caps:
            self.rel_idx[(v, j)] = var_of[(session.id, (v, j))]

    def rate(self, c: np.ndarray) -> float:
        best = None
        for j in self.receivers:
            total = 0.0
            for v in self.relays:
                si = self.src_idx.get(v)
                a = c[si] if si is not None else 0.0
                if v == j:
                    total += a  # own edge is effectively infinite
                    continue
                ri = self.rel_idx.get((v, j))
                b = c[ri] if ri is not None else 0.0
                total += a if a < b else b
            if best is None or total < best:
                best = total
        return best if best is not None else 0.0

    def rate_and_cut_vars(self, c: np.ndarray, tie_eps: float):
        """Session rate plus the cut-variable lists of all near-minimal cuts."""
        sums: dict[str, float] = {}
        for j in self.receivers:
            total = 0.0
            for v in self.relays:
                si = self.src_idx.get(v)
                a = c[si] if si is not None else 0.0
                if v == j:
                    total += a
                    continue
                ri = self.rel_idx.get((v, j))
                b = c[ri] if ri is not None else 0.0
                total += a if a < b else b
            sums[j] = total
        rate = min(sums.values())
        cuts: list[list[int]] = []
        for j in self.receivers:
            if sums[j] > rate + tie_eps:
                continue
            vars_j: list[int] = []
            for v in self.relays:
                si = self.src_idx.get(v)
                a = c[si] if si is not None else 0.0
                if v == j:
                    if si is not None:
                        vars_j.append(si)  # infinite edge never crosses
                    continue
                ri = self.rel_idx.get((v, j))
                b = c[ri] if ri is not None else 0.0
                if b < a:
                    if ri is not None:
                        vars_j.append(ri)
                else:
                    if si is not None:
                        vars_j.append(si)
            cuts.append(vars_j)
        return rate, cuts


@dataclass
class _LinkRow:
    link_id: str
    var_idx: np.ndarray
    coef: np.ndarray
    headroom: float
    norm_sq: float


def _session_skeletons(
    sessions: Sequence[Session],
    routes: Mapping[EdgeKey, Route],
    graph: UnderlayGraph,
    delay_bound: float,
) -> dict[str, SessionGraph]:
    """Delay-pruned edge structure per session; allocation-independent."""
    prop = {e: overlay_prop_delay(r, graph) for e, r in routes.items()}
    zeros = RateAllocation()
    skeletons: dict[str, SessionGraph] = {}
    for session in sessions:
        try:
            skeletons[session.id] = build_session_graph(
                session, zeros, prop, delay_bound
            )
        except ReceiverUnreachable as exc:
            raise Infeasible(
                f"session {session.id}: receiver {exc.receiver} unreachable"
            ) from exc
    return skeletons


def _link_rows(
    graph: UnderlayGraph,
    usages: Mapping[str, list[tuple[int, float]]],
) -> list[_LinkRow]:
    rows = []
    for link_id in sorted(usages):
        pairs = usages[link_id]
        if not pairs:
            continue
        link = graph.link(link_id)
        idx = np.array([i for i, _ in pairs], dtype=np.intp)
        coef = np.array([w for _, w in pairs], dtype=float)
        rows.append(
            _LinkRow(
                link_id=link_id,
                var_idx=idx,
                coef=coef,
                headroom=max(0.0, link.capacity - link.cross_traffic),
                norm_sq=float(np.dot(coef, coef)),
            )
        )
    return rows


def _project(c: np.ndarray, rows: list[_LinkRow], sweeps: int = 8) -> np.ndarray:
    """Alternating halfspace/orthant projection plus a strict repair pass."""
    np.maximum(c, 0.0, out=c)
    for _ in range(sweeps):
        moved = 0.0
        for row in rows:
            load = float(c[row.var_idx] @ row.coef)
            over = load - row.headroom
            if over > 1e-12:
                c[row.var_idx] -= (over / row.norm_sq) * row.coef
                moved += over
        np.maximum(c, 0.0, out=c)
        if moved == 0.0:
            break
    # repair: scaling members of one link never raises another link's load
    for row in rows:
        load = float(c[row.var_idx] @ row.coef)
        if load > row.headroom:
            if row.headroom <= 0.0 or load <= 0.0:
                c[row.var_idx] = 0.0
            else:
                c[row.var_idx] *= row.headroom / load
    return c


def _ascend(
    n_vars: int,
    rows: list[_LinkRow],
    grad_fn,
    util_fn,
    step_scale: float,
    max_iters: int,
    rel_tol: float = 1e-3,
    window: int = 1000,
):
    """Projected supergradient ascent with diminishing steps.

    Tracks the best feasible iterate and a restarted running average; stops
    once the best utility has not improved by ``rel_tol`` (relative) over the
    last ``window`` iterations.
    """
    c = np.zeros(n_vars)
    best_c = c.copy()
    best_u = util_fn(c)
    mark_u = best_u
    mark_k = 0
    avg = c.copy()
    avg_n = 1
    avg_restart = 1
    for k in range(1, max_iters + 1):
        g = grad_fn(c)
        c = c + (step_scale / math.sqrt(k)) * g
        c = _project(c, rows)
        u = util_fn(c)
        if u > best_u:
            best_u = u
            best_c = c.copy()
        if k == avg_restart:  # restart tail average at powers of two
            avg = c.copy()
            avg_n = 1
            avg_restart *= 2
        else:
            avg_n += 1
            avg += (c - avg) / avg_n
        if k - mark_k >= window:
            if best_u - mark_u <= rel_tol * max(1.0, abs(mark_u)):
                break
            mark_u = best_u
            mark_k = k
    tail = _project(avg.copy(), rows)
    if util_fn(tail) > best_u:
        best_u = util_fn(tail)
        best_c = tail
    return best_c, best_u


def solve_mp_central(
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    delay_bound: float,
    util: UtilityParams,
    routers: Iterable[str] | None = None,
    max_iters: int = 20000,
    step_scale: float | None = None,
    tie_eps: float = 0.5,
) -> MpSolution:
    """Centralized optimum of the delay-bounded utility maximization.

    Projected supergradient ascent over all (session, overlay link) rates
    subject to physical capacity headroom, with diminishing steps and
    best-feasible-iterate tracking.  Near-tied receiver cuts contribute an
    averaged supergradient, which removes boundary dithering.
    """
    sessions = sorted(sessions, key=lambda s: s.id)
    routes = map_routes(topology, sessions, routers)
    skeletons = _session_skeletons(sessions, routes, topology, delay_bound)

    var_of: dict[tuple[str, EdgeKey], int] = {}
    var_list: list[tuple[str, EdgeKey]] = []
    for session in sessions:
        for edge in session.edges():
            if edge in routes:
                var_of[(session.id, edge)] = len(var_list)
                var_list.append((session.id, edge))
    evals = [_SessionEval(s, skeletons[s.id], var_of) for s in sessions]

    usages: dict[str, list[tuple[int, float]]] = {}
    for (m, edge), idx in var_of.items():
        for link_id in routes[edge]:
            usages.setdefault(link_id, []).append((idx, 1.0))
    rows = _link_rows(topology, usages)

    def util_fn(c: np.ndarray) -> float:
        return sum(utility(ev.rate(c), util) for ev in evals)

    def grad_fn(c: np.ndarray) -> np.ndarray:
        g = np.zeros(len(var_list))
        for ev in evals:
            rate, cuts = ev.rate_and_cut_vars(c, tie_eps)
            if not cuts:
                continue
            w = utility_deriv(rate, util) / len(cuts)
            for vars_j in cuts:
                for i in vars_j:
                    g[i] += w
        return g

    if step_scale is None:
        step_scale = 0.25 * max(l.capacity for l in topology.links.values())
    best_c, best_u = _ascend(
        len(var_list), rows, grad_fn, util_fn, step_scale, max_iters
    )

    alloc = RateAllocation()
    for (m, edge), idx in var_of.items():
        alloc.set(m, edge, float(best_c[idx]))
    rates = {ev.id: float(ev.rate(best_c)) for ev in evals}
    prices = _fit_prices(best_c, evals, rows, routes, var_list, util)
    return MpSolution(
        allocation=alloc,
        session_rates=rates,
        total_utility=float(best_u),
        link_prices=prices,
    )


def _fit_prices(
    c: np.ndarray,
    evals: list[_SessionEval],
    rows: list[_LinkRow],
    routes: Mapping[EdgeKey, Route],
    var_list: list[tuple[str, EdgeKey]],
    util: UtilityParams,
) -> dict[str, float]:
    """Nonnegative multipliers from stationarity on active critical-cut edges.

    On every cut edge carrying rate, the summed price along its route should
    equal the session's utility derivative; prices of slack links are zero.
    """
    binding: list[str] = []
    for row in rows:
        load = float(c[row.var_idx] @ row.coef)
        if load >= row.headroom - max(1e-6, 1e-4 * row.headroom):
            binding.append(row.link_id)
    prices = {link_id: 0.0 for link_id in binding}
    if not binding:
        return {}
    col = {link_id: i for i, link_id in enumerate(binding)}
    rows_a: list[np.ndarray] = []
    rhs: list[float] = []
    for ev in evals:
        rate, cuts = ev.rate_and_cut_vars(c, tie_eps=1e-6)
        target = utility_deriv(rate, util)
        for vars_j in cuts:
            for i in vars_j:
                if c[i] <= 0.5:
                    continue
                _, edge = var_list[i]
                arow = np.zeros(len(binding))
                hit = False
                for link_id in routes[edge]:
                    if link_id in col:
                        arow[col[link_id]] = 1.0
                        hit = True
                if hit:
                    rows_a.append(arow)
                    rhs.append(target)
    if not rows_a:
        return prices
    sol, _ = nnls(np.vstack(rows_a), np.array(rhs))
    for link_id, i in col.items():
        prices[link_id] = float(sol[i])
    return prices


# ---------------------------------------------------------------------------
# restricted tree-catalog solver


def solve_restricted(
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    tree_catalog: Mapping[str, Sequence[Sequence[EdgeKey]]],
    util: UtilityParams,
    routers: Iterable[str] | None = None,
    max_iters: int = 20000,
    step_scale: float | None = None,
) -> dict[str, float]:
    """Optimal per-session rates when each session may only use listed trees.

    ``tree_catalog[m]`` is a list of trees, each a list of overlay links the
    tree sends on.  Raises :class:`Infeasible` when a listed tree references
    an overlay link with no underlay path.  Sessions with an empty catalog
    get rate zero.
    """
    sessions = sorted(sessions, key=lambda s: s.id)
    routes = map_routes(topology, sessions, routers)

    var_sessions: list[str] = []
    var_loads: list[dict[str, float]] = []  # per-variable link crossing counts
    session_vars: dict[str, list[int]] = {s.id: [] for s in sessions}
    for session in sessions:
        for tree in tree_catalog.get(session.id, []):
            loads: dict[str, float] = {}
            for edge in tree:
                route = routes.get(tuple(edge))
                if route is None:
                    raise Infeasible(
                        f"session {session.id}: tree edge {edge} has no path"
                    )
                for link_id in route:
                    loads[link_id] = loads.get(link_id, 0.0) + 1.0
            session_vars[session.id].append(len(var_sessions))
            var_sessions.append(session.id)
            var_loads.append(loads)

    if not var_sessions:
        return {s.id: 0.0 for s in sessions}

    usages: dict[str, list[tuple[int, float]]] = {}
    for idx, loads in enumerate(var_loads):
        for link_id, w in loads.items():
            usages.setdefault(link_id, []).append((idx, w))
    rows = _link_rows(topology, usages)

    def session_rate(c: np.ndarray, m: str) -> float:
        return float(sum(c[i] for i in session_vars[m]))

    def util_fn(c: np.ndarray) -> float:
        return sum(utility(session_rate(c, s.id), util) for s in sessions)

    def grad_fn(c: np.ndarray) -> np.ndarray:
        g = np.zeros(len(var_sessions))
        for s in sessions:
            idxs = session_vars[s.id]
            if not idxs:
                continue
            d = utility_deriv(session_rate(c, s.id), util)
            for i in idxs:
                g[i] = d
        return g

    if step_scale is None:
        step_scale = 0.25 * max(l.capacity for l in topology.links.values())
    best_c, _ = _ascend(
        len(var_sessions), rows, grad_fn, util_fn, step_scale, max_iters
    )
    return {s.id: session_rate(best_c, s.id) for s in sessions}


# ---------------------------------------------------------------------------
# Lagrangian and convergence diagnostics


def capacity_penalty(y: float, capacity: float) -> float:
    """Closed form of the loss-price integral: (y-C) - C ln(y/C) above C."""
    if y <= capacity:
        return 0.0
    return (y - capacity) - capacity * math.log(y / capacity)


def lagrangian(
    allocation,
    prices_s: Mapping[str, float],
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    util: UtilityParams,
    delay_bound: float,
    routes: Mapping[EdgeKey, Route],
) -> float:
    """Utility minus capacity penalty minus priced excess load.

    ``prices_s`` carries the multipliers in seconds, the controller's native
    unit; any link missing from the mapping is priced at zero.
    """
    y = link_load(topology, allocation, routes)
    prop = {e: overlay_prop_delay(r, topology) for e, r in routes.items()}
    total = 0.0
    for session in sorted(sessions, key=lambda s: s.id):
        try:
            g = build_session_graph(session, _as_alloc(allocation), prop, delay_bound)
            rate, _ = min_min_cut(g)
        except ReceiverUnreachable:
            rate = 0.0
        total += utility(rate, util)
    for link in topology.links.values():
        if not link.up:
            continue
        total -= capacity_penalty(y[link.id], link.capacity)
        total -= prices_s.get(link.id, 0.0) * (y[link.id] - link.capacity)
    return total


def _as_alloc(allocation) -> RateAllocation:
    if isinstance(allocation, RateAllocation):
        return allocation
    return RateAllocation(dict(allocation))


def track_convergence(
    trajectory: Sequence[tuple[Mapping[tuple[str, EdgeKey], float], Mapping[str, float]]],
    saddle: MpSolution,
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    util: UtilityParams,
    delay_bound: float,
    alpha: float,
    checkpoints: Sequence[int] | None = None,
    routers: Iterable[str] | None = None,
) -> list[ConvergenceDiagnostics]:
    """Evaluate the two-sided averaged-Lagrangian bound along a trajectory.

    ``trajectory[i]`` holds the iterates (c, p) before update ``i``; prices in
    seconds.  The subgradient magnitude is instantiated empirically as the
    largest observed primal or dual subgradient norm.  Raises
    :class:`BoundViolation` if the bound fails at any checkpoint.
    """
    if not trajectory:
        raise ValueError("empty trajectory")
    sessions = sorted(sessions, key=lambda s: s.id)
    routes = map_routes(topology, sessions, routers)
    skeletons = _session_skeletons(sessions, routes, topology, delay_bound)
    prop = {e: overlay_prop_delay(r, topology) for e, r in routes.items()}

    ks = sorted(set(checkpoints or [len(trajectory)]))
    if ks[-1] > len(trajectory):
        raise ValueError("checkpoint beyond trajectory length")

    saddle_prices = dict(saddle.link_prices)
    g_star = lagrangian(
        saddle.allocation, saddle_prices, topology, sessions, util,
        delay_bound, routes,
    )

    c0, p0 = trajectory[0]
    b1 = _alloc_dist_sq(c0, saddle.allocation, sessions, routes)
    b2 = 0.0
    for link in topology.links.values():
        dp = p0.get(link.id, 0.0) - saddle_prices.get(link.id, 0.0)
        b2 += link.capacity * dp * dp
    g_max_inv_cap = max(1.0 / l.capacity for l in topology.links.values())

    out: list[ConvergenceDiagnostics] = []
    running = 0.0
    delta_sq = 0.0
    next_ck = 0
    for i, (c_i, p_i) in enumerate(trajectory):
        alloc = _as_alloc(c_i)
        running += lagrangian(
            alloc, p_i, topology, sessions, util, delay_bound, routes
        )
        delta_sq = max(delta_sq, _subgrad_norms_sq(
            alloc, p_i, topology, sessions, skeletons, prop, util, routes,
            delay_bound,
        ))
        k = i + 1
        if next_ck < len(ks) and k == ks[next_ck]:
            avg = running / k
            low = -b1 / (2.0 * alpha * k) - delta_sq * alpha / 2.0
            high = b2 / (2.0 * k) + delta_sq * g_max_inv_cap / 2.0
            gap = avg - g_star
            tol = 1e-7 * max(1.0, abs(g_star))
            if gap < low - tol or gap > high + tol:
                raise BoundViolation(
                    f"k={k}: gap {gap:.6g} outside [{low:.6g}, {high:.6g}]"
                )
            out.append(ConvergenceDiagnostics(
                k=k, avg_lagrangian=avg, saddle_estimate=g_star,
                bound_low=low, bound_high=high,
            ))
            next_ck += 1
    return out


def _alloc_dist_sq(c0, star: RateAllocation, sessions, routes) -> float:
    a0 = _as_alloc(c0)
    total = 0.0
    for session in sessions:
        for edge in session.edges():
            if edge not in routes:
                continue
            d = a0.exported(session.id, edge) - star.exported(session.id, edge)
            total += d * d
    return total


def _subgrad_norms_sq(
    alloc: RateAllocation,
    prices_s: Mapping[str, float],
    topology: UnderlayGraph,
    sessions: Sequence[Session],
    skeletons: Mapping[str, SessionGraph],
    prop: Mapping[EdgeKey, float],
    util: UtilityParams,
    routes: Mapping[EdgeKey, Route],
    delay_bound: float,
) -> float:
    """max(|G_c|^2, |G_p|^2) at one iterate, matching the update directions."""
    from .cut import critical_cut  # local import avoids a cycle at module load

    y = link_load(topology, alloc, routes)
    losses = {
        l.id: (max(0.0, y[l.id] - l.capacity) / y[l.id] if y[l.id] > 0 else 0.0)
        for l in topology.links.values()
    }
    gc_sq = 0.0
    for session in sessions:
        try:
            g = build_session_graph(session, alloc, prop, delay_bound)
            rate, _ = min_min_cut(g)
            cross = set(critical_cut(g).cut_edges)
        except ReceiverUnreachable:
            rate, cross = 0.0, set()
        ud = utility_deriv(rate, util)
        for edge in session.edges():
            if edge not in routes:
                continue
            loss = sum(losses[l] for l in routes[edge])
            queue = sum(prices_s.get(l, 0.0) for l in routes[edge])
            comp = ud * (1.0 if edge in cross else 0.0) - loss - queue
            gc_sq += comp * comp
    gp_sq = 0.0
    for link in topology.links.values():
        d = y[link.id] - link.capacity
        gp_sq += d * d
    return max(gc_sq, gp_sq)
