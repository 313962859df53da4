"""Road network representation, file loading and path search.

Paths are sequences of edge ids. Every search breaks cost ties by the
lexicographic order of the edge-id sequence so results are reproducible.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Callable, Iterable, Mapping

JAM_SPACING_M = 7.5
OUTFLOW_PER_LANE_VPS = 0.5

Weight = Callable[["Edge"], float]


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network files."""


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: int
    src: int
    dst: int
    length: float
    speed_limit: float
    lanes: int = 1
    capacity: int = 1
    outflow_rate: int = 1

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


def free_flow_time(edge: Edge) -> float:
    """Seconds to traverse ``edge`` at its speed limit."""
    return edge.length / edge.speed_limit


def length_weight(edge: Edge) -> float:
    return edge.length


def default_capacity(length: float, lanes: int) -> int:
    return max(1, math.ceil(length * lanes / JAM_SPACING_M))


def default_outflow(lanes: int, step_length_s: float) -> int:
    return max(1, math.floor(lanes * step_length_s * OUTFLOW_PER_LANE_VPS))


@dataclass(frozen=True)
class Path:
    edges: tuple[int, ...]
    cost: float

    def __len__(self) -> int:
        return len(self.edges)


@dataclass
class RoadNetwork:
    """Directed multigraph with per-edge attributes.

    Treated as immutable once built; ``out_edges`` and ``in_edges`` are
    kept sorted by edge id.
    """

    nodes: dict[int, Node]
    edges: dict[int, Edge]
    out_edges: dict[int, tuple[int, ...]] = field(init=False)
    in_edges: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self) -> None:
        out: dict[int, list[int]] = {n: [] for n in self.nodes}
        inc: dict[int, list[int]] = {n: [] for n in self.nodes}
        for eid in sorted(self.edges):
            e = self.edges[eid]
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise NetworkError(f"edge {eid}: endpoint missing ({e.src}->{e.dst})")
            if e.src == e.dst:
                raise NetworkError(f"edge {eid}: self loop at node {e.src}")
            if not (e.length > 0 and math.isfinite(e.length)):
                raise NetworkError(f"edge {eid}: length must be positive, got {e.length}")
            if not (e.speed_limit > 0 and math.isfinite(e.speed_limit)):
                raise NetworkError(f"edge {eid}: speed must be positive, got {e.speed_limit}")
            if e.lanes < 1 or e.capacity < 1 or e.outflow_rate < 1:
                raise NetworkError(f"edge {eid}: lanes, capacity and outflow must be >= 1")
            out[e.src].append(eid)
            inc[e.dst].append(eid)
        for n in self.nodes.values():
            if not (math.isfinite(n.x) and math.isfinite(n.y)):
                raise NetworkError(f"node {n.id}: non-finite coordinates")
        self.out_edges = {n: tuple(v) for n, v in out.items()}
        self.in_edges = {n: tuple(v) for n, v in inc.items()}

    @classmethod
    def build(
        cls,
        nodes: Iterable[tuple[int, float, float]],
        edges: Iterable[tuple],
        step_length_s: float = 1.0,
    ) -> "RoadNetwork":
        """Build from plain tuples.

        Edge tuples are ``(id, src, dst, length, speed[, lanes[, capacity[, outflow]]])``;
        missing capacity/outflow fall back to the jam-spacing defaults.
        """
        node_map: dict[int, Node] = {}
        for nid, x, y in nodes:
            if nid in node_map:
                raise NetworkError(f"node {nid}: duplicate id")
            node_map[int(nid)] = Node(int(nid), float(x), float(y))
        edge_map: dict[int, Edge] = {}
        for row in edges:
            eid, src, dst, length, speed, *rest = row
            lanes = int(rest[0]) if len(rest) > 0 and rest[0] is not None else 1
            cap = rest[1] if len(rest) > 1 else None
            outflow = rest[2] if len(rest) > 2 else None
            if eid in edge_map:
                raise NetworkError(f"edge {eid}: duplicate id")
            edge_map[int(eid)] = Edge(
                id=int(eid),
                src=int(src),
                dst=int(dst),
                length=float(length),
                speed_limit=float(speed),
                lanes=lanes,
                capacity=int(cap) if cap is not None else default_capacity(float(length), lanes),
                outflow_rate=int(outflow) if outflow is not None else default_outflow(lanes, step_length_s),
            )
        return cls(node_map, edge_map)

    def edge_ids(self) -> list[int]:
        return sorted(self.edges)

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def path_cost(self, edges: Iterable[int], weight: Weight) -> float:
        total = 0.0
        for eid in edges:
            total += weight(self.edges[eid])
        return total

    def is_chained(self, edges: Iterable[int]) -> bool:
        prev = None
        for eid in edges:
            e = self.edges.get(eid)
            if e is None:
                return False
            if prev is not None and prev.dst != e.src:
                return False
            prev = e
        return True

    def path_nodes(self, src: int, edges: Iterable[int]) -> list[int]:
        nodes = [src]
        for eid in edges:
            nodes.append(self.edges[eid].dst)
        return nodes


# ---------------------------------------------------------------------------
# file format


def _section_name(line: str) -> str | None:
    token = line.strip().strip("[]").rstrip(":").strip().lower()
    return token if token in ("nodes", "edges") else None


def load_network(path: str | FilePath, step_length_s: float = 1.0) -> RoadNetwork:
    """Parse a two-section network CSV (``nodes`` then ``edges``)."""
    path = FilePath(path)
    if not path.exists():
        raise FileNotFoundError(path)
    section = None
    header: list[str] | None = None
    nodes: list[tuple[int, float, float]] = []
    edges: list[tuple] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name = _section_name(line)
            if name is not None:
                section, header = name, None
                continue
            if section is None:
                raise NetworkError(f"{path}:{lineno}: data before a 'nodes' or 'edges' section")
            row = next(csv.reader([line]))
            row = [c.strip() for c in row]
            if header is None:
                header = row
                _check_header(section, header, path, lineno)
                continue
            rec = dict(zip(header, row))
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                if section == "nodes":
                    nodes.append((int(rec["id"]), float(rec["x"]), float(rec["y"])))
                else:
                    edges.append(
                        (
                            int(rec["id"]),
                            int(rec["from"]),
                            int(rec["to"]),
                            float(rec["length_m"]),
                            float(rec["speed_mps"]),
                            int(rec["lanes"]),
                            _opt_int(rec.get("capacity")),
                            _opt_int(rec.get("outflow")),
                        )
                    )
            except (ValueError, KeyError) as exc:
                raise NetworkError(f"{path}:{lineno}: malformed {section[:-1]} row {row!r}: {exc}") from None
    return RoadNetwork.build(nodes, edges, step_length_s=step_length_s)


def _opt_int(value: str | None) -> int | None:
    if value is None or value == "":
        return None
    return int(value)


_REQUIRED = {
    "nodes": ["id", "x", "y"],
    "edges": ["id", "from", "to", "length_m", "speed_mps", "lanes"],
}


def _check_header(section: str, header: list[str], path, lineno: int) -> None:
    missing = [c for c in _REQUIRED[section] if c not in header]
    if missing:
        raise NetworkError(f"{path}:{lineno}: {section} header missing columns {missing}")


def save_network(net: RoadNetwork, path: str | FilePath) -> None:
    path = FilePath(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write("nodes:\n")
        w.writerow(["id", "x", "y"])
        for nid in net.node_ids():
            n = net.nodes[nid]
            w.writerow([n.id, repr(n.x), repr(n.y)])
        fh.write("edges:\n")
        w.writerow(["id", "from", "to", "length_m", "speed_mps", "lanes", "capacity", "outflow"])
        for eid in net.edge_ids():
            e = net.edges[eid]
            w.writerow([e.id, e.src, e.dst, repr(e.length), repr(e.speed_limit), e.lanes, e.capacity, e.outflow_rate])


# ---------------------------------------------------------------------------
# search on a generic adjacency
#
# ``adj`` maps node -> sequence of (edge_id, head, weight), sorted by edge id.

Adjacency = Mapping[object, list[tuple[int, object, float]]]


def _dijkstra(
    adj: Adjacency,
    src,
    dst,
    banned_nodes: frozenset | set = frozenset(),
    banned_edges: frozenset | set = frozenset(),
) -> tuple[float, tuple[int, ...]] | None:
    heap: list[tuple[float, tuple[int, ...], object]] = [(0.0, (), src)]
    settled = set()
    best: dict = {src: (0.0, ())}
    while heap:
        cost, path, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return cost, path
        for eid, head, w in adj.get(node, ()):
            if eid in banned_edges or head in banned_nodes or head in settled:
                continue
            cand = (cost + w, path + (eid,))
            cur = best.get(head)
            if cur is None or cand < cur:
                best[head] = cand
                heapq.heappush(heap, (cand[0], cand[1], head))
    return None


def _path_cost(edge_weight: Mapping[int, float], edges: Iterable[int]) -> float:
    total = 0.0
    for eid in edges:
        total += edge_weight[eid]
    return total


def yen_k_shortest(adj: Adjacency, src, dst, k: int) -> list[tuple[float, tuple[int, ...]]]:
    """Loopless k-shortest paths by deviation search.

    Returns ``(cost, edge_ids)`` pairs ordered by ``(cost, edge_ids)``.
    Costs are re-summed left to right along the path.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    weight: dict[int, float] = {}
    head_of: dict[int, object] = {}
    tail_of: dict[int, object] = {}
    for u, lst in adj.items():
        for eid, v, w in lst:
            weight[eid] = w
            head_of[eid] = v
            tail_of[eid] = u
    if src == dst:
        return [(0.0, ())]
    first = _dijkstra(adj, src, dst)
    if first is None:
        return []
    accepted: list[tuple[float, tuple[int, ...]]] = [(_path_cost(weight, first[1]), first[1])]
    seen = {first[1]}
    candidates: list[tuple[float, tuple[int, ...]]] = []
    while len(accepted) < k:
        _, last = accepted[-1]
        nodes = [src] + [head_of[e] for e in last]
        for i in range(len(last)):
            spur_node = nodes[i]
            root = last[:i]
            banned_edges = {p[i] for _, p in accepted if len(p) > i and p[:i] == root}
            banned_nodes = set(nodes[:i])
            spur = _dijkstra(adj, spur_node, dst, banned_nodes, banned_edges)
            if spur is None:
                continue
            total = root + spur[1]
            if total in seen:
                continue
            seen.add(total)
            heapq.heappush(candidates, (_path_cost(weight, total), total))
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates))
    return accepted


# ---------------------------------------------------------------------------
# network-level wrappers


def adjacency(net: RoadNetwork, weight: Weight, edge_filter: Callable[[Edge], bool] | None = None) -> dict:
    adj: dict[int, list[tuple[int, int, float]]] = {}
    for nid in net.nodes:
        lst = []
        for eid in net.out_edges[nid]:
            e = net.edges[eid]
            if edge_filter is not None and not edge_filter(e):
                continue
            w = weight(e)
            if w < 0:
                raise ValueError(f"negative weight on edge {eid}")
            lst.append((eid, e.dst, w))
        adj[nid] = lst
    return adj


def _check_node(net: RoadNetwork, nid: int) -> None:
    if nid not in net.nodes:
        raise KeyError(f"unknown node {nid}")


def shortest_path(net: RoadNetwork, src: int, dst: int, weight: Weight = free_flow_time) -> Path | None:
    """Minimum-weight path from ``src`` to ``dst``; ``None`` when unreachable."""
    _check_node(net, src)
    _check_node(net, dst)
    if src == dst:
        return Path((), 0.0)
    found = _dijkstra(adjacency(net, weight), src, dst)
    if found is None:
        return None
    return Path(found[1], net.path_cost(found[1], weight))


def k_shortest_paths(
    net: RoadNetwork, src: int, dst: int, k: int, weight: Weight = free_flow_time
) -> list[Path]:
    _check_node(net, src)
    _check_node(net, dst)
    return [Path(p, c) for c, p in yen_k_shortest(adjacency(net, weight), src, dst, k)]


def distance_field(net: RoadNetwork, dst: int, weight: Weight = free_flow_time) -> dict[int, float]:
    """Cost of the best path from every node to ``dst`` (inf if none)."""
    _check_node(net, dst)
    dist = {n: math.inf for n in net.nodes}
    dist[dst] = 0.0
    heap = [(0.0, dst)]
    done = set()
    while heap:
        d, v = heapq.heappop(heap)
        if v in done:
            continue
        done.add(v)
        for eid in net.in_edges[v]:
            e = net.edges[eid]
            w = weight(e)
            if w < 0:
                raise ValueError(f"negative weight on edge {eid}")
            nd = d + w
            if nd < dist[e.src]:
                dist[e.src] = nd
                heapq.heappush(heap, (nd, e.src))
    return dist
