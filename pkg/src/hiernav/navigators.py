"""Routing methods plugged into the simulator: classical baselines and the two-level navigator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .mesosim import Plan, TrafficState
from .netgraph import RoadNetwork, distance_field, length_weight
from .observe import (
    FINAL,
    StaleGlobalPlan,
    boundary_demand_counts,
    build_global_observation,
    build_local_observation,
)
from .partition import Partition, RegionGraph
from .plan import (
    DEFAULT_K,
    DEFAULT_M,
    LatencyPredictor,
    LocalPlanner,
    candidate_global_routes,
    min_dits_next_hop,
    min_lat_next_hop,
)
from .policy import GLOBAL, LOCAL, Decision, DecisionContext, GreedyPolicy, global_features, local_features


class _Base:
    name = "base"

    def reset(self, state: TrafficState) -> None:
        pass

    def after_step(self, state: TrafficState) -> None:
        pass

    @staticmethod
    def _region(state: TrafficState, node: int) -> tuple[int, ...]:
        return (state.static.region_of[node],)


class DijkstraNavigator(_Base):
    """Full free-flow shortest path at departure, never revised."""

    name = "dijkstra"

    def decide(self, state: TrafficState, vids: list[int]) -> dict[int, Plan]:
        out = {}
        for vid in vids:
            v = state.vehicles[vid]
            node = state.current_node(v)
            route = state.static.ff_route(node, v.dest)
            if route:
                out[vid] = Plan(route, v.global_plan or self._region(state, node))
        return out


class MinDitsNavigator(_Base):
    """Next hop toward the successor closest (by road length) to the destination."""

    name = "mindits"

    def __init__(self, weight=length_weight) -> None:
        self.weight = weight
        self._fields: dict[int, dict[int, float]] = {}

    def _field(self, net: RoadNetwork, dest: int) -> dict[int, float]:
        f = self._fields.get(dest)
        if f is None:
            f = self._fields[dest] = distance_field(net, dest, self.weight)
        return f

    def decide(self, state: TrafficState, vids: list[int]) -> dict[int, Plan]:
        out = {}
        for vid in vids:
            v = state.vehicles[vid]
            node = state.current_node(v)
            eid = min_dits_next_hop(state.net, self._field(state.net, v.dest), node)
            if eid is not None:
                out[vid] = Plan((eid,), v.global_plan or self._region(state, node))
        return out


class MinLatNavigator(_Base):
    """Next hop minimising EWMA-predicted latency plus free-flow remainder."""

    name = "minlat"

    def __init__(self, alpha: float = 0.3) -> None:
        self.alpha = alpha
        self.predictor: LatencyPredictor | None = None

    def reset(self, state: TrafficState) -> None:
        self.predictor = LatencyPredictor(state.net, self.alpha)

    def decide(self, state: TrafficState, vids: list[int]) -> dict[int, Plan]:
        if self.predictor is None:
            self.reset(state)
        out = {}
        for vid in vids:
            v = state.vehicles[vid]
            node = state.current_node(v)
            eid = min_lat_next_hop(state.net, self.predictor, state.static.ff_distance(v.dest), node)
            if eid is not None:
                out[vid] = Plan((eid,), v.global_plan or self._region(state, node))
        return out

    def after_step(self, state: TrafficState) -> None:
        if self.predictor is None:
            return
        for eid, seconds in state.exits:
            self.predictor.observe(eid, seconds)


@dataclass
class DecisionRecord:
    """A decision point as seen by the trainer."""

    vehicle_id: int
    decision_no: int
    level: str
    t: int
    context: DecisionContext
    decision: Decision
    region_times: tuple[float, ...]


Recorder = Callable[[TrafficState, DecisionRecord], None]


class HierarchicalNavigator(_Base):
    """Region sequence at departure, intra-region path at each region entry.

    ``forced`` maps ``(vehicle, decision_no, level)`` to a candidate index and
    ``replay`` maps ``(vehicle, decision_no)`` to a plan to reuse verbatim;
    both exist for counterfactual rollouts.
    """

    def __init__(
        self,
        net: RoadNetwork,
        partition: Partition,
        region_graph: RegionGraph,
        policy=None,
        name: str | None = None,
        m_global: int = DEFAULT_M,
        k_local: int = DEFAULT_K,
        recorder: Recorder | None = None,
        forced: dict | None = None,
        replay: dict | None = None,
    ) -> None:
        self.net = net
        self.partition = partition
        self.region_graph = region_graph
        self.policy = policy if policy is not None else GreedyPolicy()
        self.name = name or f"{self.policy.name}-hier"
        self.m_global = m_global
        self.k_local = k_local
        self.recorder = recorder
        self.forced = forced or {}
        self.replay = replay or {}
        self.local = LocalPlanner(net, partition, region_graph, k_local)

    def _choose(self, state: TrafficState, ctxs: list[DecisionContext], region_times) -> list[Decision]:
        out: list[Decision | None] = [None] * len(ctxs)
        todo = []
        for i, c in enumerate(ctxs):
            key = (c.vehicle_id, c.decision_no, c.level)
            if key in self.forced:
                idx = min(self.forced[key], len(c.candidates) - 1)
                out[i] = Decision(idx, 0.0, "forced")
            else:
                todo.append(i)
        if todo:
            for i, d in zip(todo, self.policy.choose_many([ctxs[i] for i in todo])):
                out[i] = d
                if d.policy.endswith("fallback"):
                    c = ctxs[i]
                    state.log_incident(f"vehicle {c.vehicle_id}: {c.level} decision {c.decision_no} fell back to greedy")
        if self.recorder is not None:
            for c, d in zip(ctxs, out):
                self.recorder(state, DecisionRecord(c.vehicle_id, c.decision_no, c.level, c.t, c, d, region_times))
        return out  # type: ignore[return-value]

    def _global_contexts(self, state, vids, gobs, start_regions):
        times = [s.avg_time for s in gobs.regions]
        ctxs = []
        for vid in vids:
            v = state.vehicles[vid]
            zd = self.partition.region_of[v.dest]
            cands = candidate_global_routes(self.region_graph, times, start_regions[vid], zd, self.m_global)
            if not cands:
                continue
            ctxs.append(
                DecisionContext(
                    vid, v.n_decisions, GLOBAL, state.t, cands, global_features(cands, gobs),
                    [c.cost for c in cands], gobs,
                )
            )
        return ctxs

    def decide(self, state: TrafficState, vids: list[int]) -> dict[int, Plan]:
        out: dict[int, Plan] = {}
        work = []
        for vid in vids:
            v = state.vehicles[vid]
            rec = self.replay.get((vid, v.n_decisions))
            if rec is not None:
                out[vid] = rec
            else:
                work.append(vid)
        if not work:
            return out

        ro = self.partition.region_of
        gobs = build_global_observation(state)
        times = tuple(s.avg_time for s in gobs.regions)
        demand = boundary_demand_counts(state)

        plans: dict[int, tuple[int, ...]] = {}
        need_global = [vid for vid in work if not state.vehicles[vid].planned or not state.vehicles[vid].global_plan]
        start = {vid: ro[state.current_node(state.vehicles[vid])] for vid in work}
        gctx = self._global_contexts(state, need_global, gobs, start)
        for c, d in zip(gctx, self._choose(state, gctx, times)):
            plans[c.vehicle_id] = c.candidates[d.index].regions

        lctx = []
        replan = []
        for vid in work:
            v = state.vehicles[vid]
            gp = plans.get(vid, v.global_plan)
            ctx = self._local_context(state, v, gp, demand) if gp else None
            if ctx is None:
                replan.append(vid)
            else:
                plans[vid] = gp
                lctx.append(ctx)

        # stale or infeasible global plans: replan from the current region once
        if replan:
            gctx = self._global_contexts(state, replan, gobs, start)
            for c, d in zip(gctx, self._choose(state, gctx, times)):
                v = state.vehicles[c.vehicle_id]
                order = [d.index] + [i for i in range(len(c.candidates)) if i != d.index]
                for i in order:
                    gp = c.candidates[i].regions
                    ctx = self._local_context(state, v, gp, demand)
                    if ctx is not None:
                        plans[c.vehicle_id] = gp
                        lctx.append(ctx)
                        break
        lctx.sort(key=lambda c: c.vehicle_id)

        for c, d in zip(lctx, self._choose(state, lctx, times)):
            out[c.vehicle_id] = Plan(c.candidates[d.index].edges, plans[c.vehicle_id])
        for vid in work:
            if vid not in out:
                v = state.vehicles[vid]
                node = state.current_node(v)
                route = state.static.ff_route(node, v.dest)
                state.log_incident(f"vehicle {vid}: no hierarchical candidate at node {node}, free-flow fallback")
                if route:
                    out[vid] = Plan(route, plans.get(vid) or v.global_plan or (ro[node],))
        return out

    def _local_context(self, state, v, gp, demand) -> DecisionContext | None:
        try:
            obs = build_local_observation(state, self.partition, self.region_graph, v, gp, demand)
        except StaleGlobalPlan:
            return None
        cands = self.local.candidates(obs.node, obs.next_region, v.dest)
        if not cands:
            return None
        return DecisionContext(
            v.id, v.n_decisions, LOCAL, state.t, cands, local_features(cands, obs),
            [c.free_flow for c in cands], obs,
        )


def make_navigator(method: str, net, partition, region_graph, **kw):
    """Factory for the method names used by the benchmark and the command line."""
    if method == "dijkstra":
        return DijkstraNavigator()
    if method == "mindits":
        return MinDitsNavigator()
    if method == "minlat":
        return MinLatNavigator()
    if method in ("greedy-hier", "softmax-hier", "llm-hier"):
        return HierarchicalNavigator(net, partition, region_graph, policy=kw.get("policy"), name=method)
    raise ValueError(f"unknown method {method!r}")
