"""Louvain partitioning of the road network and the region abstraction graph."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .netgraph import RoadNetwork

_GAIN_EPS = 1e-12


@dataclass(frozen=True)
class Partition:
    """Node -> region assignment with contiguous region ids ``0..K-1``."""

    region_of: dict[int, int]

    @property
    def k(self) -> int:
        return (max(self.region_of.values()) + 1) if self.region_of else 0

    def members(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.k)]
        for n in sorted(self.region_of):
            out[self.region_of[n]].append(n)
        return out

    @classmethod
    def from_groups(cls, groups) -> "Partition":
        """Canonical partition from node groups (ids ordered by smallest member)."""
        groups = [sorted(g) for g in groups if len(g)]
        groups.sort(key=lambda g: g[0])
        return cls({n: rid for rid, g in enumerate(groups) for n in g})

    @classmethod
    def single(cls, net: RoadNetwork) -> "Partition":
        return cls({n: 0 for n in net.nodes})


@dataclass
class RegionGraph:
    k: int
    boundary: dict[tuple[int, int], tuple[int, ...]]
    succ: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self) -> None:
        succ: dict[int, list[int]] = {z: [] for z in range(self.k)}
        for a, b in sorted(self.boundary):
            succ[a].append(b)
        self.succ = {z: tuple(v) for z, v in succ.items()}

    @property
    def adjacency(self) -> list[tuple[int, int]]:
        return sorted(self.boundary)

    def boundary_edges(self, za: int, zb: int) -> tuple[int, ...]:
        return self.boundary.get((za, zb), ())

    def pair_ids(self) -> dict[tuple[int, int], int]:
        """Dense ids for ordered adjacent pairs, in lexicographic pair order."""
        return {pair: i for i, pair in enumerate(sorted(self.boundary))}


def undirected_weights(net: RoadNetwork) -> dict[tuple[int, int], float]:
    """Undirected projection: weight = number of directed edges between the pair."""
    w: dict[tuple[int, int], float] = defaultdict(float)
    for e in net.edges.values():
        a, b = (e.src, e.dst) if e.src < e.dst else (e.dst, e.src)
        w[(a, b)] += 1.0
    return dict(w)


def modularity(net: RoadNetwork, partition: Partition, resolution: float = 1.0) -> float:
    return _modularity(net.node_ids(), undirected_weights(net), partition.region_of, resolution)


def _modularity(nodes, weights, region_of, resolution: float = 1.0) -> float:
    m = sum(weights.values())
    if m == 0:
        return 0.0
    intra: dict[int, float] = defaultdict(float)
    deg: dict[int, float] = defaultdict(float)
    for (a, b), w in weights.items():
        deg[region_of[a]] += w
        deg[region_of[b]] += w
        if region_of[a] == region_of[b]:
            intra[region_of[a]] += w
    q = 0.0
    for c in set(region_of[n] for n in nodes):
        q += intra[c] / m - resolution * (deg[c] / (2.0 * m)) ** 2
    return q


def _one_level(n: int, nbrs: list[dict[int, float]], loops: list[float], order, resolution: float):
    """Local moving phase. Returns (community per node, improved flag)."""
    k = [loops[i] * 2.0 + sum(nbrs[i].values()) for i in range(n)]
    two_m = sum(k)
    comm = list(range(n))
    tot = list(k)
    improved = False
    if two_m == 0:
        return comm, False
    moved = True
    while moved:
        moved = False
        for i in order:
            ci = comm[i]
            links: dict[int, float] = defaultdict(float)
            for j, w in nbrs[i].items():
                links[comm[j]] += w
            tot[ci] -= k[i]
            best_c = ci
            best_gain = links.get(ci, 0.0) - resolution * tot[ci] * k[i] / two_m
            for c in sorted(links):
                if c == ci:
                    continue
                gain = links[c] - resolution * tot[c] * k[i] / two_m
                if gain > best_gain + _GAIN_EPS:
                    best_gain, best_c = gain, c
            tot[best_c] += k[i]
            if best_c != ci:
                comm[i] = best_c
                moved = True
                improved = True
    return comm, improved


def louvain_partition(net: RoadNetwork, resolution: float = 1.0, seed: int = 0) -> Partition:
    """Greedy Louvain modularity maximisation followed by contiguity repair."""
    if not net.nodes:
        raise ValueError("network has no nodes")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    rng = np.random.default_rng(seed)
    node_ids = net.node_ids()
    index = {nid: i for i, nid in enumerate(node_ids)}
    n = len(node_ids)
    nbrs: list[dict[int, float]] = [defaultdict(float) for _ in range(n)]
    for (a, b), w in undirected_weights(net).items():
        nbrs[index[a]][index[b]] += w
        nbrs[index[b]][index[a]] += w
    loops = [0.0] * n
    # members[i] = original node indices inside level node i
    members: list[list[int]] = [[i] for i in range(n)]

    while True:
        order = list(range(n))
        rng.shuffle(order)
        comm, improved = _one_level(n, nbrs, loops, order, resolution)
        if not improved:
            break
        first: dict[int, int] = {}
        for i in range(n):
            m0 = min(members[i])
            if comm[i] not in first or m0 < first[comm[i]]:
                first[comm[i]] = m0
        labels = sorted(first, key=first.get)
        relabel = {c: r for r, c in enumerate(labels)}
        new_n = len(labels)
        new_members: list[list[int]] = [[] for _ in range(new_n)]
        new_nbrs: list[dict[int, float]] = [defaultdict(float) for _ in range(new_n)]
        new_loops = [0.0] * new_n
        for i in range(n):
            ci = relabel[comm[i]]
            new_members[ci].extend(members[i])
            new_loops[ci] += loops[i]
            for j, w in nbrs[i].items():
                cj = relabel[comm[j]]
                if ci == cj:
                    # each intra pair is visited from both ends
                    new_loops[ci] += w / 2.0
                else:
                    new_nbrs[ci][cj] += w
        n, nbrs, loops, members = new_n, new_nbrs, new_loops, new_members

    groups = [[node_ids[i] for i in grp] for grp in members]
    return Partition.from_groups(_split_disconnected(net, groups))


def _split_disconnected(net: RoadNetwork, groups: list[list[int]]) -> list[list[int]]:
    und: dict[int, set[int]] = defaultdict(set)
    for e in net.edges.values():
        und[e.src].add(e.dst)
        und[e.dst].add(e.src)
    out = []
    for grp in groups:
        remaining = set(grp)
        while remaining:
            start = min(remaining)
            comp = {start}
            stack = [start]
            while stack:
                u = stack.pop()
                for v in und[u]:
                    if v in remaining and v not in comp:
                        comp.add(v)
                        stack.append(v)
            remaining -= comp
            out.append(sorted(comp))
    return out


def build_region_graph(net: RoadNetwork, partition: Partition) -> RegionGraph:
    boundary: dict[tuple[int, int], list[int]] = defaultdict(list)
    for eid in net.edge_ids():
        e = net.edges[eid]
        za, zb = partition.region_of[e.src], partition.region_of[e.dst]
        if za != zb:
            boundary[(za, zb)].append(eid)
    return RegionGraph(partition.k, {p: tuple(v) for p, v in boundary.items()})


def region_centroids(net: RoadNetwork, partition: Partition) -> list[tuple[float, float]]:
    sums = [[0.0, 0.0, 0] for _ in range(partition.k)]
    for nid, z in partition.region_of.items():
        node = net.nodes[nid]
        sums[z][0] += node.x
        sums[z][1] += node.y
        sums[z][2] += 1
    return [(sx / c, sy / c) if c else (math.nan, math.nan) for sx, sy, c in sums]
