"""Delay-bounded multicast rate and packing of 2-hop trees.

The achievable session rate over the two-layer graph is the minimum over
receivers of the source-receiver min-cut, which on this graph family has the
closed form ``min_j sum_v min(cap(s->v), cap(v->t_j))``.  Unit trees are
peeled off one at a time so that every peel reduces that minimum by exactly
its rate; runs of identical consecutive trees are constructed as one batch.

A unit tree is a set W of relays fed from the source plus an assignment of
every sink to a feeding relay.  Removing it lowers receiver j's cut by
``max(|{v in W : su_v <= ru_vj}|, 1)``, so a tree is safe exactly when that
drop fits within each receiver's slack above the minimum cut.  Such a tree
always exists while the minimum cut is positive; the relay set is chosen
smallest-first with lexicographic ties, which keeps the output deterministic
and reproduces the single-relay unit-capacity example.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping

from .overlay import SessionGraph
from .underlay import EdgeKey


@dataclass
class Tree:
    """One packed 2-hop tree: every sink is covered exactly once.

    ``branches`` maps a relay or helper node to the sinks it forwards to;
    ``direct`` lists sinks fed through their own relay (source->relay->sink).
    """

    rate: float
    branches: dict[str, tuple[str, ...]]
    direct: tuple[str, ...]

    def sinks(self) -> set[str]:
        out = set(self.direct)
        for targets in self.branches.values():
            out.update(targets)
        return out

    def edges(self, source: str) -> list[EdgeKey]:
        """All overlay links the tree sends on, each exactly once."""
        out = [(source, v) for v in sorted(set(self.direct) | set(self.branches))]
        for v in sorted(self.branches):
            out.extend((v, j) for j in self.branches[v])
        return out


@dataclass
class TreeSet:
    trees: list[Tree]
    quantum: float

    @property
    def total_rate(self) -> float:
        return sum(t.rate for t in self.trees)


def per_receiver_cut(g: SessionGraph, j: str):
    """Min-cut between source and sink j: sum_v min(cap(s->v), cap(v->t_j))."""
    total = 0
    for v in g.relays:
        total += min(g.source_cap(v), g.relay_cap(v, j))
    return total


def min_min_cut(g: SessionGraph):
    """Session rate achievable by 2-hop packing, and the critical receiver.

    Returns ``(rate, j*)`` with j* the smallest receiver attaining the min.
    """
    if not g.receivers:
        raise ValueError("session graph has no sinks")
    best_rate = None
    best_j = None
    for j in g.receivers:  # receivers sorted; first win = smallest id
        cut = per_receiver_cut(g, j)
        if best_rate is None or cut < best_rate:
            best_rate = cut
            best_j = j
    return best_rate, best_j


def tree_delay(tree: Tree, prop_delays: Mapping[EdgeKey, float], source: str) -> float:
    """Worst-sink propagation delay of the tree, in ms."""
    worst = 0.0
    for j in tree.direct:
        worst = max(worst, prop_delays.get((source, j), 0.0))
    for v, targets in tree.branches.items():
        d_sv = prop_delays.get((source, v), 0.0)
        for j in targets:
            worst = max(worst, d_sv + prop_delays.get((v, j), 0.0))
    return worst


class _Residual:
    """Integer unit capacities of a session graph during packing."""

    def __init__(self, g: SessionGraph, quantum: float):
        self.receivers = g.receivers
        self.relays = g.relays
        self.su: dict[str, int] = {}
        for v, cap in g.source_caps.items():
            self.su[v] = int(cap / quantum + 1e-9)
        self.ru: dict[tuple[str, str], int] = {}
        for (v, j), cap in g.relay_caps.items():
            self.ru[(v, j)] = int(cap / quantum + 1e-9)

    def source_units(self, v: str) -> int:
        return self.su.get(v, 0)

    def relay_units(self, v: str, j: str) -> int | None:
        """Residual units of v->sink(j); None encodes the infinite own edge."""
        if v == j:
            return None if v in self.receivers else 0
        return self.ru.get((v, j), 0)

    def cut_sums(self, tree: "_UnitTree | None" = None, lam: int = 0) -> dict[str, int]:
        """Per-receiver cuts, optionally after removing ``lam`` tree copies."""
        sums: dict[str, int] = {}
        for j in self.receivers:
            total = 0
            for v in self.relays:
                a = self.su.get(v, 0)
                b = self.relay_units(v, j)
                if tree is not None and v in tree.relay_set:
                    a -= lam
                    if tree.assign.get(j) == v and v != j:
                        b -= lam
                if b is None:
                    total += a
                else:
                    total += a if a < b else b
            sums[j] = total
        return sums

    def k_value(self, tree: "_UnitTree | None" = None, lam: int = 0) -> int:
        return min(self.cut_sums(tree, lam).values())

    def consume(self, tree: "_UnitTree", lam: int) -> None:
        for v in tree.relay_set:
            self.su[v] -= lam
        for j, v in tree.assign.items():
            if v != j:
                self.ru[(v, j)] -= lam


@dataclass
class _UnitTree:
    relay_set: tuple[str, ...]
    assign: dict[str, str]  # sink -> feeding relay


def _choose_tree(res: _Residual) -> tuple[_UnitTree, bool] | None:
    """Smallest relay set whose per-receiver cut drops fit the slack budgets.

    Removing one tree copy lowers receiver j's cut by one unit for every
    relay in W that is source-limited toward j (the own edge counts as
    source-limited), or by one when none is and j's feed must come off a
    relay edge.  A set W is usable when every sink has a feasible feed and
    every drop stays within ``K_j - K + 1``; peeling such a tree keeps the
    min-min-cut achievable for the remainder.

    Capacity vectors that are not sums of trees (the min-min-cut then
    overstates what is packable) may leave no within-budget set; the
    fallback returns the feasible tree with the least budget excess so the
    packing stays maximal.  The boolean flag reports which case was taken.
    """
    sums = res.cut_sums()
    k = min(sums.values())
    if k < 1:
        return None
    budgets = {j: sums[j] - k + 1 for j in res.receivers}
    avail = tuple(v for v in res.relays if res.source_units(v) >= 1)
    best_over: tuple[int, int, tuple, dict] | None = None
    for size in range(1, len(avail) + 1):
        for w in combinations(avail, size):
            assign, excess = _assign_sinks(res, w, budgets)
            if assign is None:
                continue
            if excess == 0:
                return _UnitTree(relay_set=w, assign=assign), True
            if best_over is None or excess < best_over[0]:
                best_over = (excess, size, w, assign)
    if best_over is not None:
        return _UnitTree(relay_set=best_over[2], assign=best_over[3]), False
    return None


def _assign_sinks(
    res: _Residual, w: tuple[str, ...], budgets: Mapping[str, int]
) -> tuple[dict[str, str] | None, int]:
    """Cheapest feed assignment for relay set w, plus total budget excess."""
    assign: dict[str, str] = {}
    excess = 0
    for j in res.receivers:
        src_limited = []
        feeds = []
        for v in w:
            units = res.relay_units(v, j)
            if units is None:  # own edge: infinite, always source-limited
                src_limited.append(v)
                feeds.append(v)
                continue
            if res.source_units(v) <= units:
                src_limited.append(v)
            if units >= 1:
                feeds.append(v)
        if not feeds:
            return None, 0
        excess += max(0, max(len(src_limited), 1) - budgets[j])
        assign[j] = src_limited[0] if src_limited else feeds[0]
    return assign, excess


def _max_batch(res: _Residual, tree: _UnitTree, k: int) -> int:
    """Largest multiplier lam with K(residual - lam*tree) == k - lam.

    The gap is concave in lam with value 0 at lam = 0, so the feasible set is
    an integer interval and binary search applies.
    """
    hi = k
    for v in tree.relay_set:
        hi = min(hi, res.source_units(v))
    for j, v in tree.assign.items():
        if v != j:
            hi = min(hi, res.ru[(v, j)])
    lo = 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if res.k_value(tree, mid) == k - mid:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _as_tree(unit: _UnitTree, rate: float) -> Tree:
    branches: dict[str, list[str]] = {}
    direct: list[str] = []
    for j, v in unit.assign.items():
        if v == j:
            direct.append(j)
        else:
            branches.setdefault(v, []).append(j)
    return Tree(
        rate=rate,
        branches={v: tuple(sorted(js)) for v, js in sorted(branches.items())},
        direct=tuple(sorted(direct)),
    )


def pack_trees(g: SessionGraph, quantum: float = 1.0) -> TreeSet:
    """Pack 2-hop trees up to the quantized min-min-cut.

    Capacities are quantized down to multiples of ``quantum``; the result is
    empty when the quantized min-min-cut is zero.  Whenever the capacity
    vector is a sum of valid trees (in particular any allocation the packer
    itself produced) the packed total equals the quantized min-min-cut; for
    adversarial capacity patterns that no tree decomposition can realize the
    total falls short of the cut, which then merely upper-bounds the rate.
    """
    if quantum <= 0:
        raise ValueError("quantum must be positive")
    res = _Residual(g, quantum)
    trees: list[Tree] = []
    k = res.k_value()
    guard = k
    while k >= 1 and guard >= 0:
        guard -= 1
        pick = _choose_tree(res)
        if pick is None:
            break
        unit, exact = pick
        lam = _max_batch(res, unit, k) if exact else 1
        res.consume(unit, lam)
        trees.append(_as_tree(unit, lam * quantum))
        k = res.k_value()
    return TreeSet(trees=trees, quantum=quantum)
