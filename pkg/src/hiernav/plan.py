"""Candidate routes at both levels and the classical next-hop baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .netgraph import Path, RoadNetwork, free_flow_time, shortest_path, yen_k_shortest
from .observe import FINAL
from .partition import Partition, RegionGraph

DEFAULT_M = 5
DEFAULT_K = 10
EWMA_ALPHA = 0.3
_SINK = "sink"


@dataclass(frozen=True)
class GlobalRoutePlan:
    regions: tuple[int, ...]
    cost: float

    def describe(self) -> str:
        return "regions " + " -> ".join(str(z) for z in self.regions)


@dataclass(frozen=True)
class LocalRoutePlan:
    edges: tuple[int, ...]
    free_flow: float
    terminal: int

    def describe(self) -> str:
        return f"edges {' '.join(str(e) for e in self.edges)} | free-flow {self.free_flow:.2f}s"


def candidate_global_routes(
    region_graph: RegionGraph,
    region_costs: Sequence[float] | None,
    z_o: int,
    z_d: int,
    m: int = DEFAULT_M,
) -> list[GlobalRoutePlan]:
    """The ``m`` cheapest simple region sequences, cost = sum of per-region costs."""
    if m < 1:
        raise ValueError("m must be >= 1")
    for z in (z_o, z_d):
        if not 0 <= z < region_graph.k:
            raise ValueError(f"unknown region {z}")
    costs = [1.0] * region_graph.k if region_costs is None else [float(c) for c in region_costs]
    if z_o == z_d:
        return [GlobalRoutePlan((z_o,), costs[z_o])]
    ids = region_graph.pair_ids()
    pair_of = {i: p for p, i in ids.items()}
    adj: dict[int, list] = {z: [] for z in range(region_graph.k)}
    for (a, b), i in sorted(ids.items(), key=lambda kv: kv[1]):
        adj[a].append((i, b, costs[b]))
    out = []
    for _, pairs in yen_k_shortest(adj, z_o, z_d, m):
        regions = (z_o,) + tuple(pair_of[i][1] for i in pairs)
        total = 0.0
        for z in regions:
            total += costs[z]
        out.append(GlobalRoutePlan(regions, total))
    return out


class LocalPlanner:
    """Intra-region k-shortest exits under free-flow time, cached per query."""

    def __init__(self, net: RoadNetwork, partition: Partition, region_graph: RegionGraph, k: int = DEFAULT_K) -> None:
        self.net = net
        self.partition = partition
        self.region_graph = region_graph
        self.k = k
        self._adj: dict[int, dict] = {}
        self._cache: dict[tuple, list[LocalRoutePlan]] = {}

    def _region_adj(self, z: int) -> dict:
        adj = self._adj.get(z)
        if adj is None:
            ro = self.partition.region_of
            adj = {}
            for nid in self.net.node_ids():
                if ro[nid] != z:
                    continue
                adj[nid] = [
                    (eid, self.net.edges[eid].dst, free_flow_time(self.net.edges[eid]))
                    for eid in self.net.out_edges[nid]
                    if ro[self.net.edges[eid].dst] == z
                ]
            self._adj[z] = adj
        return adj

    def candidates(self, position: int, next_region: int, dest: int, k: int | None = None) -> list[LocalRoutePlan]:
        k = self.k if k is None else k
        key = (position, next_region, dest if next_region == FINAL else None, k)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        z = self.partition.region_of[position]
        base = self._region_adj(z)
        if next_region == FINAL:
            if self.partition.region_of[dest] != z:
                res: list[LocalRoutePlan] = []
            else:
                res = [
                    LocalRoutePlan(p, c, FINAL) for c, p in yen_k_shortest(base, position, dest, k)
                ]
        else:
            adj = dict(base)
            bound = self.region_graph.boundary_edges(z, next_region)
            extra: dict[int, list] = {}
            for eid in bound:
                e = self.net.edges[eid]
                extra.setdefault(e.src, []).append((eid, _SINK, free_flow_time(e)))
            for nid, lst in extra.items():
                adj[nid] = sorted(adj.get(nid, []) + lst, key=lambda t: t[0])
            res = [LocalRoutePlan(p, c, p[-1]) for c, p in yen_k_shortest(adj, position, _SINK, k)]
        self._cache[key] = res
        return res


def candidate_local_routes(
    net: RoadNetwork,
    partition: Partition,
    region_graph: RegionGraph,
    position: int,
    next_region: int,
    dest: int,
    k: int = DEFAULT_K,
) -> list[LocalRoutePlan]:
    """Top-``k`` free-flow paths from ``position`` to the exits toward ``next_region``.

    Pass ``next_region=FINAL`` to route to ``dest`` inside the current region.
    """
    return LocalPlanner(net, partition, region_graph, k).candidates(position, next_region, dest)


def dijkstra_route(net: RoadNetwork, origin: int, dest: int) -> Path | None:
    return shortest_path(net, origin, dest, free_flow_time)


def min_dits_next_hop(net: RoadNetwork, dist_field: dict[int, float], current_node: int) -> int | None:
    """Outgoing edge whose head is closest to the destination; ties -> smallest id."""
    best = None
    best_d = math.inf
    for eid in net.out_edges[current_node]:
        d = dist_field[net.edges[eid].dst]
        if d < best_d:
            best, best_d = eid, d
    return best


class LatencyPredictor:
    """Per-edge exponentially weighted moving average of observed traversal times."""

    def __init__(self, net: RoadNetwork, alpha: float = EWMA_ALPHA) -> None:
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.estimate = {eid: e.free_flow_time for eid, e in net.edges.items()}

    def observe(self, eid: int, seconds: float) -> None:
        self.estimate[eid] = self.alpha * seconds + (1 - self.alpha) * self.estimate[eid]

    def predict(self, eid: int) -> float:
        return self.estimate[eid]


def min_lat_next_hop(
    net: RoadNetwork, predictor: LatencyPredictor, dist_field: dict[int, float], current_node: int
) -> int | None:
    """Edge minimising predicted latency plus free-flow remainder.

    Only edges that strictly reduce the free-flow remainder are eligible, so
    the walk cannot cycle.
    """
    here = dist_field[current_node]
    best = None
    best_c = math.inf
    for eid in net.out_edges[current_node]:
        d = dist_field[net.edges[eid].dst]
        if not d < here:
            continue
        c = predictor.predict(eid) + d
        if c < best_c:
            best, best_c = eid, c
    return best
