"""Queue-based mesoscopic traffic simulator.

Each edge is a point queue: a vehicle entering edge ``e`` at tick ``s``
traverses it for ``n(e) = ceil(free-flow time / step)`` ticks, joins the
exit queue at tick ``s + n(e)`` and can be served from the following tick
on. Service is FIFO, limited by the edge outflow rate and by residual
capacity on the next edge. A tick runs, in order: injection of due
departures, traversal completions, queue service.

Idle steps are counted lazily: a queued vehicle that was eligible for
service but not served accrues one idle step per tick.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path as FilePath
from typing import Callable, Iterable, Protocol

import numpy as np

from .netgraph import RoadNetwork, distance_field, free_flow_time, shortest_path
from .partition import Partition, region_centroids

log = logging.getLogger(__name__)

PENDING = "pending"
TRAVERSING = "traversing"
QUEUED = "queued"
ARRIVED = "arrived"
UNFINISHED = "unfinished"


@dataclass
class SimConfig:
    step_length_s: float = 1.0
    horizon_s: float = 3600.0
    congestion_threshold: float = 0.8
    aggregation_window_s: float = 300.0
    seed: int = 0
    record_aggregates: bool = True
    incident_threshold: int | None = None

    def __post_init__(self) -> None:
        if self.step_length_s <= 0:
            raise ValueError("step_length_s must be positive")
        if self.horizon_s <= 0:
            raise ValueError("horizon_s must be positive")

    @property
    def horizon_steps(self) -> int:
        return int(math.ceil(self.horizon_s / self.step_length_s - 1e-9))

    @property
    def window_steps(self) -> int:
        return max(1, int(round(self.aggregation_window_s / self.step_length_s)))

    @classmethod
    def from_dict(cls, d: dict | None) -> "SimConfig":
        d = dict(d or {})
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        if d:
            raise ValueError(f"unknown sim config keys: {sorted(d)}")
        return cls(**known)


@dataclass(frozen=True)
class Trip:
    vehicle_id: int
    origin: int
    dest: int
    depart_s: float
    controlled: bool = True


@dataclass(frozen=True)
class Plan:
    """A plan update handed to the simulator at a decision point."""

    edges: tuple[int, ...]
    global_plan: tuple[int, ...] | None = None


@dataclass
class Vehicle:
    id: int
    origin: int
    dest: int
    depart_step: int
    controlled: bool
    status: str = PENDING
    edge: int = -1
    enter_step: int = -1
    ready_at: int = -1
    queued_at: int = -1
    plan: list[int] = field(default_factory=list)
    next_idx: int = 0
    planned: bool = False
    global_plan: tuple[int, ...] = ()
    gp_idx: int = 0
    n_decisions: int = 0
    n_idle: int = 0
    wait_steps: int = 0
    inject_step: int = -1
    arrive_step: int = -1
    path: list[int] = field(default_factory=list)
    fft_so_far: float = 0.0
    planned_fft: float = 0.0
    region: int = -1
    region_enter: int = -1

    def copy(self) -> "Vehicle":
        v = Vehicle.__new__(Vehicle)
        v.__dict__.update(self.__dict__)
        v.plan = list(self.plan)
        v.path = list(self.path)
        return v

    @property
    def active(self) -> bool:
        return self.status in (TRAVERSING, QUEUED) or (self.status == PENDING and self.planned)

    @property
    def plan_exhausted(self) -> bool:
        return self.next_idx >= len(self.plan)

    def remaining_global_plan(self) -> tuple[int, ...]:
        return self.global_plan[self.gp_idx :]


@dataclass
class EdgeState:
    traversing: int
    queue: tuple[int, ...]
    passes: int


class StaticContext:
    """Per-episode immutable data plus deterministic lazily filled caches.

    Shared between a state and its clones.
    """

    def __init__(self, net: RoadNetwork, partition: Partition, config: SimConfig) -> None:
        self.net = net
        self.partition = partition
        self.region_of = partition.region_of
        self.config = config
        dt = config.step_length_s
        self.n_steps = {
            eid: max(1, int(math.ceil(e.free_flow_time / dt - 1e-9))) for eid, e in net.edges.items()
        }
        self.fft = {eid: e.free_flow_time for eid, e in net.edges.items()}
        self.edge_order = net.edge_ids()
        self.intra_edges: list[list[int]] = [[] for _ in range(partition.k)]
        for eid in self.edge_order:
            e = net.edges[eid]
            za = self.region_of[e.src]
            if za == self.region_of[e.dst]:
                self.intra_edges[za].append(eid)
        self.region_capacity = [sum(net.edges[e].capacity for e in lst) for lst in self.intra_edges]
        self.free_flow_fallback = []
        for z in range(partition.k):
            lst = self.intra_edges[z] or [
                eid for eid in self.edge_order if self.region_of[net.edges[eid].src] == z
            ]
            self.free_flow_fallback.append(
                sum(self.fft[e] for e in lst) / len(lst) if lst else 0.0
            )
        self._dist: dict[int, dict[int, float]] = {}
        self._routes: dict[tuple[int, int], tuple[int, ...] | None] = {}

    def ff_distance(self, dest: int) -> dict[int, float]:
        d = self._dist.get(dest)
        if d is None:
            d = distance_field(self.net, dest, free_flow_time)
            self._dist[dest] = d
        return d

    def ff_route(self, origin: int, dest: int) -> tuple[int, ...] | None:
        key = (origin, dest)
        if key not in self._routes:
            p = shortest_path(self.net, origin, dest, free_flow_time)
            self._routes[key] = None if p is None else p.edges
        return self._routes[key]


class TrafficState:
    """Mutable simulator state at tick ``t``."""

    def __init__(self, static: StaticContext) -> None:
        self.static = static
        self.t = 0
        self.vehicles: dict[int, Vehicle] = {}
        self.pending: list[tuple[int, int]] = []
        self.occupants: dict[int, int] = {eid: 0 for eid in static.edge_order}
        self.queues: dict[int, deque] = {}
        self.ready: dict[int, list[int]] = defaultdict(list)
        self.passes: dict[int, int] = {eid: 0 for eid in static.edge_order}
        self.completions: list[deque] = [deque() for _ in range(static.partition.k)]
        self.exits: list[tuple[int, float]] = []
        self.needs_plan: set[int] = set()
        self.incidents: list[str] = []
        self.n_arrived = 0
        self.finished = False

    # -- construction -----------------------------------------------------

    @classmethod
    def initial(
        cls, net: RoadNetwork, partition: Partition, trips: Iterable[Trip], config: SimConfig
    ) -> "TrafficState":
        state = cls(StaticContext(net, partition, config))
        dt = config.step_length_s
        for trip in trips:
            if trip.vehicle_id in state.vehicles:
                raise ValueError(f"duplicate vehicle id {trip.vehicle_id}")
            if trip.origin not in net.nodes or trip.dest not in net.nodes:
                raise ValueError(f"vehicle {trip.vehicle_id}: unknown origin/destination node")
            step = int(math.floor(trip.depart_s / dt + 1e-9))
            state.vehicles[trip.vehicle_id] = Vehicle(
                trip.vehicle_id, trip.origin, trip.dest, step, bool(trip.controlled)
            )
            state.pending.append((step, trip.vehicle_id))
        state.pending.sort()
        return state

    def clone(self) -> "TrafficState":
        c = TrafficState.__new__(TrafficState)
        c.static = self.static
        c.t = self.t
        c.vehicles = {vid: v.copy() for vid, v in self.vehicles.items()}
        c.pending = list(self.pending)
        c.occupants = dict(self.occupants)
        c.queues = {e: deque(q) for e, q in self.queues.items()}
        c.ready = defaultdict(list, {k: list(v) for k, v in self.ready.items()})
        c.passes = dict(self.passes)
        c.completions = [deque(d) for d in self.completions]
        c.exits = list(self.exits)
        c.needs_plan = set(self.needs_plan)
        c.incidents = list(self.incidents)
        c.n_arrived = self.n_arrived
        c.finished = self.finished
        return c

    # -- queries -----------------------------------------------------------

    @property
    def net(self) -> RoadNetwork:
        return self.static.net

    @property
    def config(self) -> SimConfig:
        return self.static.config

    @property
    def dt(self) -> float:
        return self.static.config.step_length_s

    def edge_state(self, eid: int) -> EdgeState:
        q = tuple(self.queues.get(eid, ()))
        return EdgeState(self.occupants[eid] - len(q), q, self.passes[eid])

    def current_node(self, v: Vehicle) -> int:
        if v.status == PENDING:
            return v.origin
        if v.status in (ARRIVED, UNFINISHED) and v.edge < 0:
            return v.origin
        return self.net.edges[v.edge].dst

    def idle_steps(self, v: Vehicle) -> int:
        """Idle steps including the currently open queue spell."""
        extra = 0
        if v.status == QUEUED:
            extra = max(0, self.t - (v.queued_at + 1))
        return v.n_idle + extra

    def decision_points(self) -> list[int]:
        """Controlled vehicles that need a plan before the next tick."""
        out = set(self.needs_plan)
        i = 0
        while i < len(self.pending) and self.pending[i][0] <= self.t:
            vid = self.pending[i][1]
            v = self.vehicles[vid]
            if v.controlled and not v.planned:
                out.add(vid)
            i += 1
        return sorted(out)

    def active_controlled(self) -> list[Vehicle]:
        return [v for v in self.vehicles.values() if v.controlled and v.active]

    def counts(self) -> dict[str, int]:
        c = {PENDING: 0, TRAVERSING: 0, QUEUED: 0, ARRIVED: 0, UNFINISHED: 0}
        for v in self.vehicles.values():
            c[v.status] += 1
        return c

    def log_incident(self, msg: str) -> None:
        self.incidents.append(f"t={self.t} {msg}")
        log.debug("incident: %s", msg)

    # -- plans --------------------------------------------------------------

    def assign_plan(self, vid: int, plan: Plan) -> bool:
        """Validate and install a plan; on rejection keep or repair the old one."""
        v = self.vehicles[vid]
        node = self.current_node(v)
        net = self.net
        edges = tuple(plan.edges)
        ok = bool(edges) and net.is_chained(edges) and net.edges[edges[0]].src == node
        if not ok:
            self.log_incident(f"vehicle {vid}: rejected plan {list(edges)} at node {node}")
            if v.planned and not v.plan_exhausted:
                return False
            fallback = self.static.ff_route(node, v.dest)
            if not fallback:
                self.log_incident(f"vehicle {vid}: unroutable from node {node}")
                return False
            edges = fallback
            plan = Plan(edges, plan.global_plan)
        v.plan = list(edges)
        v.next_idx = 0
        v.planned = True
        v.n_decisions += 1
        if plan.global_plan is not None:
            v.global_plan = tuple(plan.global_plan)
        zone = self.static.region_of[node]
        if zone in v.global_plan:
            v.gp_idx = v.global_plan.index(zone)
        end = net.edges[edges[-1]].dst
        fft = self.static.fft
        v.planned_fft = v.fft_so_far + sum(fft[e] for e in edges) + self.static.ff_distance(v.dest)[end]
        self.needs_plan.discard(vid)
        return True

    def _ensure_plan(self, v: Vehicle) -> bool:
        if v.planned and not v.plan_exhausted:
            return True
        node = self.current_node(v)
        route = self.static.ff_route(node, v.dest)
        if route is None:
            return False
        if v.controlled:
            self.log_incident(f"vehicle {v.id}: no decision supplied, free-flow fallback")
        zone = self.static.region_of[node]
        self.assign_plan(v.id, Plan(route, v.global_plan or (zone,)))
        v.n_decisions -= 1
        return True

    # -- movement -------------------------------------------------------------

    def _enter(self, v: Vehicle, eid: int) -> None:
        t = self.t
        e = self.net.edges[eid]
        z = self.static.region_of[e.src]
        if v.region < 0:
            v.region, v.region_enter = z, t
        elif z != v.region:
            self._complete_region(v.region, t, (t - v.region_enter) * self.dt)
            v.region, v.region_enter = z, t
        self.occupants[eid] += 1
        self.passes[eid] += 1
        v.status = TRAVERSING
        v.edge = eid
        v.enter_step = t
        v.ready_at = t + self.static.n_steps[eid]
        v.next_idx += 1
        v.path.append(eid)
        v.fft_so_far += self.static.fft[eid]
        self.ready[v.ready_at].append(v.id)

    def _complete_region(self, z: int, t: int, duration: float) -> None:
        self.completions[z].append((t, duration))

    def _arrive(self, v: Vehicle) -> None:
        t = self.t
        v.status = ARRIVED
        v.arrive_step = t
        if v.region >= 0:
            self._complete_region(v.region, t, (t - v.region_enter) * self.dt)
        self.n_arrived += 1
        self.needs_plan.discard(v.id)


def step(state: TrafficState, decisions: dict[int, Plan] | None = None) -> TrafficState:
    """Advance ``state`` by one tick in place and return it."""
    if state.finished:
        raise RuntimeError("episode already finalised")
    for vid in sorted(decisions or {}):
        v = state.vehicles.get(vid)
        if v is None or v.status in (ARRIVED, UNFINISHED):
            state.log_incident(f"decision for inactive vehicle {vid} ignored")
            continue
        state.assign_plan(vid, decisions[vid])

    t = state.t
    net = state.net
    occ = state.occupants
    state.exits = []

    # 1. injection, in (depart step, id) order
    still: list[tuple[int, int]] = []
    i = 0
    pend = state.pending
    while i < len(pend) and pend[i][0] <= t:
        item = pend[i]
        v = state.vehicles[item[1]]
        i += 1
        if v.origin == v.dest:
            v.planned = True
            v.inject_step = t
            v.wait_steps += t - v.depart_step
            state._arrive(v)
            continue
        if not state._ensure_plan(v):
            still.append(item)
            continue
        eid = v.plan[v.next_idx]
        if occ[eid] < net.edges[eid].capacity:
            v.inject_step = t
            v.wait_steps += t - v.depart_step
            state._enter(v, eid)
        else:
            still.append(item)
    state.pending = still + pend[i:]

    # 2. traversal completions
    for vid in state.ready.pop(t, ()):
        v = state.vehicles[vid]
        v.status = QUEUED
        v.queued_at = t
        state.queues.setdefault(v.edge, deque()).append(vid)
        if v.controlled and v.plan_exhausted and net.edges[v.edge].dst != v.dest:
            state.needs_plan.add(vid)

    # 3. queue service
    for eid in sorted(state.queues):
        q = state.queues[eid]
        e = net.edges[eid]
        served = 0
        while q and served < e.outflow_rate:
            v = state.vehicles[q[0]]
            if v.queued_at >= t:
                break
            if e.dst == v.dest:
                nxt = None
            else:
                if v.plan_exhausted:
                    state._ensure_plan(v)
                if v.plan_exhausted:
                    break
                nxt = v.plan[v.next_idx]
                if net.edges[nxt].src != e.dst:
                    state.log_incident(f"vehicle {v.id}: plan does not chain at edge {eid}, repaired")
                    v.plan = v.plan[: v.next_idx]
                    if not state._ensure_plan(v):
                        break
                    nxt = v.plan[v.next_idx]
                if occ[nxt] >= net.edges[nxt].capacity:
                    break
            q.popleft()
            served += 1
            occ[eid] -= 1
            v.n_idle += t - (v.queued_at + 1)
            v.wait_steps += t - (v.queued_at + 1)
            state.exits.append((eid, (t - v.enter_step) * state.dt))
            if nxt is None:
                v.edge = eid
                state._arrive(v)
            else:
                state._enter(v, nxt)
        if not q:
            del state.queues[eid]

    state.t = t + 1
    return state


def finalize(state: TrafficState) -> None:
    """Close open waiting spells and mark remaining vehicles unfinished."""
    if state.finished:
        return
    t = state.t
    for v in state.vehicles.values():
        if v.status == QUEUED:
            extra = max(0, t - (v.queued_at + 1))
            v.n_idle += extra
            v.wait_steps += extra
        elif v.status == PENDING and v.depart_step < t:
            v.wait_steps += t - v.depart_step
        if v.status != ARRIVED:
            v.status = UNFINISHED
    state.needs_plan.clear()
    state.finished = True


# ---------------------------------------------------------------------------
# congestion measures


def occ(state: TrafficState, eid: int) -> float:
    """Occupancy rate: (traversing + queued) / capacity."""
    return state.occupants[eid] / state.net.edges[eid].capacity


def cong(state: TrafficState, eid: int) -> float:
    return min(1.0, occ(state, eid))


def congested_edges(state: TrafficState, threshold: float | None = None) -> list[int]:
    thr = state.config.congestion_threshold if threshold is None else threshold
    return [eid for eid in state.static.edge_order if cong(state, eid) >= thr]


@dataclass(frozen=True)
class RegionStats:
    cong: float
    occ: float
    avg_time: float


def region_aggregates(state: TrafficState, partition: Partition | None = None) -> list[RegionStats]:
    """Per-region capacity-weighted congestion/occupancy and windowed mean traversal time."""
    st = state.static
    if partition is not None and partition.region_of != st.region_of:
        raise ValueError("partition differs from the one the state was built with")
    net = state.net
    cutoff = state.t - st.config.window_steps
    out = []
    for z in range(st.partition.k):
        dq = state.completions[z]
        while dq and dq[0][0] <= cutoff:
            dq.popleft()
        if dq:
            tau = sum(d for _, d in dq) / len(dq)
        else:
            tau = st.free_flow_fallback[z]
        cap = st.region_capacity[z]
        if cap == 0:
            out.append(RegionStats(0.0, 0.0, tau))
            continue
        occ_sum = 0.0
        cong_sum = 0.0
        for eid in st.intra_edges[z]:
            c = net.edges[eid].capacity
            o = state.occupants[eid]
            occ_sum += o
            cong_sum += min(float(c), float(o))
        out.append(RegionStats(cong_sum / cap, occ_sum / cap, tau))
    return out


# ---------------------------------------------------------------------------
# episode orchestration


class Navigator(Protocol):
    name: str

    def decide(self, state: TrafficState, vehicle_ids: list[int]) -> dict[int, Plan]: ...

    def after_step(self, state: TrafficState) -> None: ...


@dataclass
class VehicleRecord:
    id: int
    origin: int
    dest: int
    controlled: bool
    depart_s: float
    arrive_s: float | None
    status: str
    idle_steps: int
    waiting_steps: int
    planned_fft_s: float
    route: list[int]
    global_plan: list[int]
    final_plan: list[int]


@dataclass
class EpisodeLog:
    method: str
    seed: int
    step_length_s: float
    horizon_s: float
    config: dict
    vehicles: list[VehicleRecord]
    region_series: list[list[list[float]]]
    pass_counts: list[list[int]]
    incidents: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "EpisodeLog":
        d = json.loads(text)
        d["vehicles"] = [VehicleRecord(**r) for r in d["vehicles"]]
        return cls(**d)

    def controlled(self) -> list[VehicleRecord]:
        return [r for r in self.vehicles if r.controlled]


def build_log(state: TrafficState, method: str, region_series=None) -> EpisodeLog:
    finalize(state)
    dt = state.dt
    cfg = state.config
    recs = []
    for vid in sorted(state.vehicles):
        v = state.vehicles[vid]
        recs.append(
            VehicleRecord(
                id=v.id,
                origin=v.origin,
                dest=v.dest,
                controlled=v.controlled,
                depart_s=v.depart_step * dt,
                arrive_s=v.arrive_step * dt if v.status == ARRIVED else None,
                status=v.status,
                idle_steps=v.n_idle,
                waiting_steps=v.wait_steps,
                planned_fft_s=v.planned_fft,
                route=list(v.path),
                global_plan=list(v.global_plan),
                final_plan=list(v.plan),
            )
        )
    return EpisodeLog(
        method=method,
        seed=cfg.seed,
        step_length_s=dt,
        horizon_s=state.t * dt,
        config=asdict(cfg),
        vehicles=recs,
        region_series=region_series or [],
        pass_counts=[[eid, state.passes[eid]] for eid in state.static.edge_order],
        incidents=list(state.incidents),
    )


def simulate_tick(state: TrafficState, navigator: Navigator | None) -> dict[int, Plan]:
    """Query the navigator at decision points, then advance one tick."""
    dps = state.decision_points()
    decisions: dict[int, Plan] = {}
    if dps and navigator is not None:
        try:
            decisions = navigator.decide(state, dps)
        except Exception as exc:  # policy failures never abort an episode
            state.log_incident(f"navigator {getattr(navigator, 'name', '?')} failed: {exc!r}; free-flow fallback")
            decisions = {}
    step(state, decisions)
    if navigator is not None:
        navigator.after_step(state)
    return decisions


def check_connected(state: TrafficState) -> None:
    for v in state.vehicles.values():
        if v.controlled and v.origin != v.dest and state.static.ff_route(v.origin, v.dest) is None:
            raise ValueError(f"controlled vehicle {v.id}: destination {v.dest} unreachable from {v.origin}")


def run_episode(
    net: RoadNetwork,
    partition: Partition,
    demand: Iterable[Trip],
    navigator: Navigator | None,
    config: SimConfig,
    on_tick: Callable[[TrafficState], None] | None = None,
) -> EpisodeLog:
    """Simulate from t=0 to the horizon and return the episode log."""
    state = TrafficState.initial(net, partition, demand, config)
    check_connected(state)
    if hasattr(navigator, "reset"):
        navigator.reset(state)
    series = []
    horizon = config.horizon_steps
    while state.t < horizon:
        simulate_tick(state, navigator)
        if config.record_aggregates:
            series.append([[round(s.cong, 6), round(s.occ, 6), round(s.avg_time, 6)] for s in region_aggregates(state)])
        if on_tick is not None:
            on_tick(state)
    name = getattr(navigator, "name", "free-flow")
    return build_log(state, name, series)


# ---------------------------------------------------------------------------
# demand


def load_demand(path: str | FilePath) -> list[Trip]:
    trips = []
    with FilePath(path).open(encoding="utf-8", newline="") as fh:
        rows = (line for line in fh if line.strip() and not line.lstrip().startswith("#"))
        for lineno, rec in enumerate(csv.DictReader(rows), start=2):
            try:
                trips.append(
                    Trip(
                        int(rec["vehicle_id"]),
                        int(rec["origin_node"]),
                        int(rec["dest_node"]),
                        float(rec["depart_s"]),
                        rec["controlled"].strip() == "1",
                    )
                )
            except (KeyError, ValueError, AttributeError) as exc:
                raise ValueError(f"{path}: malformed demand row {lineno}: {exc}") from None
    return trips


def save_demand(trips: Iterable[Trip], path: str | FilePath) -> None:
    with FilePath(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vehicle_id", "origin_node", "dest_node", "depart_s", "controlled"])
        for t in trips:
            w.writerow([t.vehicle_id, t.origin, t.dest, repr(float(t.depart_s)), int(t.controlled)])


def gravity_rates(
    net: RoadNetwork, partition: Partition, activities, gamma: float, theta: float
) -> np.ndarray:
    """Expected trips per bucket between ordered region pairs (zero diagonal)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    k = partition.k
    act = np.zeros(k)
    items = activities.items() if isinstance(activities, dict) else enumerate(activities)
    for z, a in items:
        z = int(z)
        if not 0 <= z < k:
            raise ValueError(f"activity given for unknown region {z}")
        if not (a >= 0 and math.isfinite(a)):
            raise ValueError("activities must be finite and >= 0")
        act[z] = a
    cent = region_centroids(net, partition)
    rates = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            d = math.hypot(cent[i][0] - cent[j][0], cent[i][1] - cent[j][1])
            # coincident centroids would blow up the decay term
            d = max(d, 1.0)
            rates[i, j] = theta * act[i] * act[j] * d ** (-gamma)
    return rates


def generate_background_demand(
    net: RoadNetwork,
    partition: Partition,
    activities,
    gamma: float,
    theta: float,
    horizon_s: float,
    seed: int,
    bucket_s: float = 300.0,
    start_id: int = 100_000,
) -> list[Trip]:
    """Gravity-model background trips, Poisson counts per 5-minute bucket."""
    rates = gravity_rates(net, partition, activities, gamma, theta)
    rng = np.random.default_rng(seed)
    members = partition.members()
    static_dist: dict[int, dict[int, float]] = {}
    trips: list[Trip] = []
    n_buckets = int(math.ceil(horizon_s / bucket_s - 1e-9))
    k = partition.k
    for b in range(n_buckets):
        lo = b * bucket_s
        span = min(bucket_s, horizon_s - lo)
        for i in range(k):
            for j in range(k):
                lam = rates[i, j]
                if lam <= 0:
                    continue
                if not members[i] or not members[j]:
                    log.warning("skipping empty region pair %d->%d", i, j)
                    continue
                for _ in range(int(rng.poisson(lam))):
                    trip = _sample_od(net, members[i], members[j], rng, static_dist)
                    depart = lo + float(rng.integers(0, max(1, int(span))))
                    if trip is None:
                        continue
                    trips.append(Trip(start_id + len(trips), trip[0], trip[1], depart, False))
    trips.sort(key=lambda tr: (tr.depart_s, tr.vehicle_id))
    return [Trip(start_id + n, tr.origin, tr.dest, tr.depart_s, False) for n, tr in enumerate(trips)]


def _sample_od(net, src_nodes, dst_nodes, rng, cache, attempts: int = 10):
    for _ in range(attempts):
        o = int(src_nodes[int(rng.integers(len(src_nodes)))])
        d = int(dst_nodes[int(rng.integers(len(dst_nodes)))])
        if d not in cache:
            cache[d] = distance_field(net, d, free_flow_time)
        if o != d and math.isfinite(cache[d][o]):
            return o, d
    return None


def background_signature(log_: EpisodeLog) -> list[tuple]:
    """Method-independent part of background traffic (OD, departure, route)."""
    return [(r.id, r.origin, r.dest, r.depart_s, tuple(r.final_plan)) for r in log_.vehicles if not r.controlled]
