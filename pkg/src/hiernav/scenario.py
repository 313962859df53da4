"""Scenario definitions: YAML loading and the two built-in synthetic networks."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path as FilePath

import numpy as np
import yaml

from .mesosim import SimConfig, Trip, generate_background_demand, load_demand
from .netgraph import RoadNetwork, load_network
from .partition import Partition, RegionGraph, build_region_graph, louvain_partition


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    net: RoadNetwork
    partition: Partition
    controlled: list[Trip]
    sim: SimConfig
    background: dict | None = None
    methods: list[str] = field(default_factory=lambda: ["dijkstra", "greedy-hier"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    trainer: dict = field(default_factory=dict)
    policy_params: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    # background trips are drawn over this partition, so swapping the
    # navigation partition leaves the traffic unchanged
    background_partition: Partition | None = None

    def __post_init__(self) -> None:
        self.region_graph: RegionGraph = build_region_graph(self.net, self.partition)

    def with_partition(self, partition: Partition) -> "Scenario":
        return Scenario(
            self.name, self.net, partition, self.controlled, self.sim, self.background,
            self.methods, self.seeds, self.trainer, self.policy_params, self.inputs, self.raw,
            self.background_partition or self.partition,
        )

    def sim_config(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=seed)

    def demand(self, seed: int) -> list[Trip]:
        """Controlled trips plus seeded gravity background (identical for every method)."""
        trips = list(self.controlled)
        bg = self.background
        if bg and float(bg.get("theta", 0)) > 0:
            part = self.background_partition or self.partition
            start = max([t.vehicle_id for t in trips], default=-1) + 1
            trips += generate_background_demand(
                self.net,
                part,
                bg.get("activities") or [1.0] * part.k,
                float(bg.get("gamma", 1.0)),
                float(bg["theta"]),
                float(bg.get("horizon_s", self.sim.horizon_s)),
                seed=int(bg.get("seed_offset", 1000)) + seed,
                bucket_s=float(bg.get("bucket_s", 300.0)),
                start_id=max(start, int(bg.get("start_id", 100_000))),
            )
        return trips

    def regional_free_flow(self) -> float:
        """Mean over regions of the free-flow per-edge traversal time inside each region."""
        ro = self.partition.region_of
        per = []
        for z in range(self.partition.k):
            ts = [e.free_flow_time for e in self.net.edges.values() if ro[e.src] == z and ro[e.dst] == z]
            if ts:
                per.append(sum(ts) / len(ts))
        return float(np.mean(per)) if per else 1.0


def _digest(path: FilePath) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_partition(net: RoadNetwork, spec: dict | None, base: FilePath | None = None) -> Partition:
    spec = dict(spec or {"method": "louvain"})
    method = spec.get("method", "louvain")
    if method == "louvain":
        return louvain_partition(net, float(spec.get("resolution", 1.0)), int(spec.get("seed", 0)))
    if method == "single":
        return Partition.single(net)
    if method == "groups":
        return Partition.from_groups(spec["groups"])
    if method == "file":
        p = FilePath(spec["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        return load_partition(p)
    raise ScenarioError(f"unknown partition method {method!r}")


def load_partition(path) -> Partition:
    region_of = {}
    with FilePath(path).open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["node_id", "region"]:
            raise ScenarioError(f"{path}: expected header node_id,region")
        for line in fh:
            if line.strip():
                n, z = line.strip().split(",")
                region_of[int(n)] = int(z)
    groups: dict[int, list[int]] = {}
    for n, z in region_of.items():
        groups.setdefault(z, []).append(n)
    return Partition.from_groups(list(groups.values()))


def save_partition(partition: Partition, path) -> None:
    with FilePath(path).open("w", encoding="utf-8") as fh:
        fh.write("node_id,region\n")
        for n in sorted(partition.region_of):
            fh.write(f"{n},{partition.region_of[n]}\n")


def set_dotted(d: dict, key: str, value) -> None:
    """Assign ``value`` at a dotted path, parsing it as YAML (so ``3`` is an int)."""
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ScenarioError(f"cannot set {key}: {p} is not a mapping")
    cur[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) else value


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    path = FilePath(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: invalid YAML: {exc}") from None
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        set_dotted(raw, k, v)
    return scenario_from_dict(raw, path.parent, inputs={str(path): _digest(path)})


def scenario_from_dict(raw: dict, base: FilePath, inputs: dict | None = None) -> Scenario:
    inputs = dict(inputs or {})
    if "builtin" in raw:
        sc = builtin_scenario(raw["builtin"], **(raw.get("builtin_args") or {}))
        for key in ("methods", "seeds"):
            if key in raw:
                setattr(sc, key, list(raw[key]))
        if "trainer" in raw:
            sc.trainer.update(raw["trainer"])
        if "sim" in raw:
            sc.sim = SimConfig.from_dict({**sc.sim.__dict__, **raw["sim"]})
        if "policy_params" in raw:
            sc.policy_params = str(base / raw["policy_params"])
        sc.raw = raw
        sc.inputs = inputs
        return sc
    try:
        sim = SimConfig.from_dict(raw.get("sim"))
        net_path = base / raw["network"]
        net = load_network(net_path, sim.step_length_s)
        inputs[str(net_path)] = _digest(net_path)
        partition = make_partition(net, raw.get("partition"), base)
        dem = raw.get("demand") or {}
        if "path" in dem:
            dpath = base / dem["path"]
            controlled = [t for t in load_demand(dpath)]
            inputs[str(dpath)] = _digest(dpath)
        else:
            controlled = []
        params = raw.get("policy_params")
        return Scenario(
            name=str(raw.get("name", base.name)),
            net=net,
            partition=partition,
            controlled=controlled,
            sim=sim,
            background=raw.get("background"),
            methods=list(raw.get("methods", ["dijkstra", "greedy-hier"])),
            seeds=[int(s) for s in raw.get("seeds", [0, 1, 2, 3, 4])],
            trainer=dict(raw.get("trainer") or {}),
            policy_params=str(base / params) if params else None,
            inputs=inputs,
            raw=raw,
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario missing required key {exc}") from None
    except (OSError, ValueError) as exc:
        raise ScenarioError(str(exc)) from None


# ---------------------------------------------------------------------------
# built-in synthetic scenarios


def _bidirected(edges, eid, a, b, length, speed, lanes, cap, out):
    edges.append((eid, a, b, length, speed, lanes, cap, out))
    edges.append((eid + 1, b, a, length, speed, lanes, cap, out))
    return eid + 2


def corridor_network() -> RoadNetwork:
    """Two four-node clusters joined by a short narrow corridor and a longer wide one."""
    nodes = [(0, 0, 0), (1, 100, 50), (2, 100, -50), (3, 0, 100),
             (4, 1000, 0), (5, 900, 50), (6, 900, -50), (7, 1000, 100)]
    edges: list[tuple] = []
    eid = 0
    for a, b in [(0, 1), (0, 2), (0, 3), (1, 3), (1, 2)]:
        eid = _bidirected(edges, eid, a, b, 100.0, 10.0, 3, 40, 4)
    for a, b in [(4, 5), (4, 6), (4, 7), (5, 7), (5, 6)]:
        eid = _bidirected(edges, eid, a, b, 100.0, 10.0, 3, 40, 4)
    eid = _bidirected(edges, eid, 1, 5, 300.0, 10.0, 1, 40, 1)  # fast, one vehicle per second out
    _bidirected(edges, eid, 2, 6, 550.0, 10.0, 3, 120, 4)  # slower, wide
    return RoadNetwork.build(nodes, edges)


def corridor_scenario(n_vehicles: int = 100, spread_s: int = 25, horizon_s: float = 600.0) -> Scenario:
    net = corridor_network()
    part = Partition.from_groups([[0, 1, 2, 3], [4, 5, 6, 7]])
    trips = [Trip(i, 0, 4, float(i * spread_s // n_vehicles), True) for i in range(n_vehicles)]
    return Scenario(
        name="corridor",
        net=net,
        partition=part,
        controlled=trips,
        sim=SimConfig(horizon_s=horizon_s),
        methods=["dijkstra", "mindits", "minlat", "greedy-hier", "softmax-hier"],
        seeds=[0],
    )


def grid_network(n: int = 6, block_m: float = 150.0, avenues: bool = True) -> RoadNetwork:
    """n x n bidirected grid.

    With ``avenues`` the two middle rows and columns are faster but narrow;
    otherwise every street is identical.
    """
    nodes = [(r * n + c, c * block_m, r * block_m) for r in range(n) for c in range(n)]
    edges: list[tuple] = []
    eid = 0
    mid = n // 2

    def street(u: int, v: int, line: int) -> int:
        if not avenues:
            return _bidirected(edges, eid, u, v, block_m, 10.0, 1, 40, 1)
        fast = line in (mid - 1, mid)
        return _bidirected(edges, eid, u, v, block_m, 15.0 if fast else 10.0, 1, 20 if fast else 40, 1 if fast else 2)

    for r in range(n):
        for c in range(n):
            u = r * n + c
            if c + 1 < n:
                eid = street(u, u + 1, r)
            if r + 1 < n:
                eid = street(u, u + n, c)
    return RoadNetwork.build(nodes, edges)


def grid_quadrants(n: int = 6) -> Partition:
    h = n // 2
    groups: list[list[int]] = [[], [], [], []]
    for r in range(n):
        for c in range(n):
            groups[(r >= h) * 2 + (c >= h)].append(r * n + c)
    return Partition.from_groups(groups)


def grid_scenario(
    n: int = 6, n_vehicles: int = 120, spread_s: int = 120, horizon_s: float = 400.0, seed: int = 7, avenues: bool = True
) -> Scenario:
    net = grid_network(n, avenues=avenues)
    part = grid_quadrants(n)
    rng = np.random.default_rng(seed)
    corners = [0, n - 1, n * (n - 1), n * n - 1]
    opposite = {0: n * n - 1, n - 1: n * (n - 1), n * (n - 1): n - 1, n * n - 1: 0}
    trips = []
    for i in range(n_vehicles):
        o = corners[int(rng.integers(4))]
        trips.append(Trip(i, o, opposite[o], float(rng.integers(0, spread_s)), True))
    trips.sort(key=lambda t: (t.depart_s, t.vehicle_id))
    return Scenario(
        name="grid",
        net=net,
        partition=part,
        controlled=trips,
        sim=SimConfig(horizon_s=horizon_s),
        background={"activities": [1.0, 1.0, 1.0, 1.0], "gamma": 1.0, "theta": 400.0, "horizon_s": horizon_s},
        methods=["dijkstra", "mindits", "minlat", "greedy-hier", "softmax-hier"],
        seeds=[0, 1],
    )


BUILTINS = {"corridor": corridor_scenario, "grid": grid_scenario}


def builtin_scenario(name: str, **kw) -> Scenario:
    if name not in BUILTINS:
        raise ScenarioError(f"unknown built-in scenario {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name](**kw)
