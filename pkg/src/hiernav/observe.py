"""Global and local observations, and their text rendering for prompt-backed policies."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .mesosim import RegionStats, TrafficState, cong, congested_edges, occ, region_aggregates
from .partition import Partition, RegionGraph

FINAL = -1
OBS_VERSION = "obs-v1"
BUCKET_S = 300.0
MAX_LIST = 40


class StaleGlobalPlan(ValueError):
    """The next region of a global plan is not reachable from the current region."""


@dataclass(frozen=True)
class GlobalObservation:
    t: int
    bucket: int
    regions: tuple[RegionStats, ...]
    hotspot: tuple[float, ...]
    congested: tuple[int, ...]


@dataclass(frozen=True)
class EdgeDescriptor:
    edge: int
    cong: float
    occ: float
    free_flow: float


@dataclass(frozen=True)
class LocalObservation:
    t: int
    region: int
    node: int
    current_edge: int | None
    next_region: int
    edges: tuple[EdgeDescriptor, ...]
    boundary_demand: tuple[tuple[int, int], ...]

    def demand(self, eid: int) -> int:
        return dict(self.boundary_demand).get(eid, 0)


def hotspots(state: TrafficState, k: int) -> list[float]:
    """Share of active controlled vehicles whose remaining global plan includes each region."""
    active = state.active_controlled()
    if not active:
        return [0.0] * k
    counts = [0] * k
    for v in active:
        for z in set(v.remaining_global_plan()):
            counts[z] += 1
    n = len(active)
    return [c / n for c in counts]


def boundary_demand_counts(state: TrafficState) -> Counter:
    """Active controlled vehicles per terminal edge of their current local plan."""
    c: Counter = Counter()
    for v in state.active_controlled():
        if v.plan and (not v.plan_exhausted or v.edge == v.plan[-1]):
            c[v.plan[-1]] += 1
    return c


def build_global_observation(
    state: TrafficState, partition: Partition | None = None, region_graph: RegionGraph | None = None
) -> GlobalObservation:
    k = state.static.partition.k
    return GlobalObservation(
        t=state.t,
        bucket=int(state.t * state.dt // BUCKET_S),
        regions=tuple(region_aggregates(state, partition)),
        hotspot=tuple(hotspots(state, k)),
        congested=tuple(congested_edges(state)),
    )


def next_region(global_plan: Sequence[int], region: int) -> int:
    if region not in global_plan:
        raise StaleGlobalPlan(f"region {region} not on global plan {list(global_plan)}")
    i = list(global_plan).index(region)
    return FINAL if i == len(global_plan) - 1 else global_plan[i + 1]


def build_local_observation(
    state: TrafficState,
    partition: Partition,
    region_graph: RegionGraph,
    vehicle,
    global_plan: Sequence[int],
    demand: Counter | None = None,
) -> LocalObservation:
    node = state.current_node(vehicle)
    z = partition.region_of[node]
    nxt = next_region(global_plan, z)
    net = state.net
    bound: tuple[int, ...] = ()
    if nxt != FINAL:
        bound = region_graph.boundary_edges(z, nxt)
        if not bound:
            raise StaleGlobalPlan(f"region {nxt} is not adjacent to region {z}")
    eids = list(state.static.intra_edges[z]) + list(bound)
    cur = vehicle.edge if vehicle.edge >= 0 else None
    if cur is not None and cur not in eids:
        eids.append(cur)
    descs = tuple(
        EdgeDescriptor(e, cong(state, e), occ(state, e), net.edges[e].free_flow_time) for e in sorted(eids)
    )
    if demand is None:
        demand = boundary_demand_counts(state)
    return LocalObservation(
        t=state.t,
        region=z,
        node=node,
        current_edge=cur,
        next_region=nxt,
        edges=descs,
        boundary_demand=tuple((b, demand.get(b, 0)) for b in bound),
    )


def _f(x: float) -> str:
    return f"{x:.2f}"


def _bounded(items: list[str], limit: int = MAX_LIST) -> list[str]:
    if len(items) <= limit:
        return items
    return items[:limit] + [f"... ({len(items) - limit} more)"]


def serialize_observation(obs, candidates, features=None) -> str:
    """Deterministic text rendering of an observation plus numbered options."""
    lines = [OBS_VERSION]
    if isinstance(obs, GlobalObservation):
        lines.append(f"level: global | step {obs.t} | bucket {obs.bucket}")
        lines.append("regions (congestion, occupancy, avg travel time s, hotspot):")
        for z, (s, h) in enumerate(zip(obs.regions, obs.hotspot)):
            lines.append(f"region {z}: cong={_f(s.cong)} occ={_f(s.occ)} avg_time={_f(s.avg_time)} hot={_f(h)}")
        cong_edges = ", ".join(_bounded([str(e) for e in obs.congested])) or "none"
        lines.append(f"congested edges: {cong_edges}")
    elif isinstance(obs, LocalObservation):
        target = "destination" if obs.next_region == FINAL else f"region {obs.next_region}"
        cur = "none (departing)" if obs.current_edge is None else str(obs.current_edge)
        lines.append(f"level: local | step {obs.t} | region {obs.region} | node {obs.node} | current edge {cur} | target {target}")
        lines.append("edges (congestion, occupancy, free-flow s):")
        lines.extend(
            _bounded([f"edge {d.edge}: cong={_f(d.cong)} occ={_f(d.occ)} ff={_f(d.free_flow)}" for d in obs.edges], 3 * MAX_LIST)
        )
        demand = ", ".join(f"{b}:{n}" for b, n in obs.boundary_demand) or "none"
        lines.append(f"boundary demand: {demand}")
    else:
        raise TypeError(f"unsupported observation {type(obs).__name__}")
    lines.append("options:")
    for i, cand in enumerate(candidates, start=1):
        desc = cand.describe()
        if features is not None:
            f = features[i - 1]
            desc += f" | time={_f(f[0])} cong={_f(f[1])} load={_f(f[2])} len={_f(f[3])}"
        lines.append(f"{i}. {desc}")
    return "\n".join(lines)
