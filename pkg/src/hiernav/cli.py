"""Command-line entry point: ``hiernav {partition,run,train,bench,gen-demand}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path as FilePath

from . import __version__
from .bench import METHODS, compute_metrics, export_heatmap, run_benchmark, run_cell, write_metrics_csv
from .coop_opt import TrainerConfig, TrainingDiverged, train, write_history
from .mesosim import generate_background_demand, save_demand
from .netgraph import NetworkError, load_network
from .partition import build_region_graph, louvain_partition
from .policy import PolicyParams
from .scenario import ScenarioError, load_partition, load_scenario, save_partition

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4, 5

log = logging.getLogger("hiernav")


class ConfigError(ValueError):
    pass


def _digest(path) -> str:
    return hashlib.sha256(FilePath(path).read_bytes()).hexdigest()


def write_manifest(out: FilePath, command: str, config: dict, seed, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "output_dir": str(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--config expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _scenario(args):
    return load_scenario(args.scenario, parse_overrides(args.config))


# -- commands -------------------------------------------------------------


def cmd_partition(args) -> int:
    if args.resolution <= 0:
        raise ConfigError("--resolution must be > 0 (try 1.0)")
    net = load_network(args.network)
    out = FilePath(args.out)
    write_manifest(out, "partition", {"resolution": args.resolution}, args.seed, {str(args.network): _digest(args.network)})
    part = louvain_partition(net, args.resolution, args.seed)
    rg = build_region_graph(net, part)
    save_partition(part, out / "partition.csv")
    graph = {
        "k": part.k,
        "adjacency": [list(p) for p in rg.adjacency],
        "boundary": [{"from": a, "to": b, "edges": list(e)} for (a, b), e in sorted(rg.boundary.items())],
    }
    (out / "region_graph.json").write_text(json.dumps(graph, indent=2) + "\n", encoding="utf-8")
    print(f"{part.k} regions written to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    sc = _scenario(args)
    inputs = dict(sc.inputs)
    params = None
    if args.params:
        inputs[args.params] = _digest(args.params)
        params = PolicyParams.load(args.params)
    out = FilePath(args.out)
    write_manifest(out, "run", {"method": args.method, "scenario": sc.raw or sc.name, "sim": asdict(sc.sim)}, args.seed, inputs)
    lg = run_cell(sc, args.method, args.seed, params)
    report = compute_metrics(lg)
    (out / "episode.json").write_text(lg.to_json() + "\n", encoding="utf-8")
    write_metrics_csv([report], out / "metrics.csv")
    export_heatmap(lg, out / f"heatmap_{args.method}.csv")
    print(f"{args.method} seed {args.seed}: TP {report.TP} ATT {report.ATT:.2f} AWT {report.AWT:.2f} ADT {report.ADT:.2f}")
    limit = sc.sim.incident_threshold
    if limit is not None and len(lg.incidents) > limit:
        print(f"error: {len(lg.incidents)} incidents exceed threshold {limit}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    sc = _scenario(args)
    cfg = TrainerConfig.from_dict(sc.trainer)
    out = FilePath(args.out)
    write_manifest(out, "train", {"scenario": sc.raw or sc.name, "trainer": asdict(cfg)}, cfg.seed, dict(sc.inputs))
    history: list[dict] = []
    try:
        params, history = train(sc, cfg, on_iter=history.append)
    except TrainingDiverged as exc:
        write_history(history, out / "history.csv")
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    params.save(out / "params.json")
    write_history(history, out / "history.csv")
    print(f"trained {len(history)} iterations; params in {out / 'params.json'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    sc = _scenario(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()] if args.methods is not None else sc.methods
    if not methods:
        raise ConfigError("empty methods list")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}")
    seeds = _int_list(args.seeds) if args.seeds else sc.seeds
    if not seeds:
        raise ConfigError("empty seeds list")
    inputs = dict(sc.inputs)
    params = None
    if args.params:
        inputs[args.params] = _digest(args.params)
        params = PolicyParams.load(args.params)
    out = FilePath(args.out)
    write_manifest(out, "bench", {"methods": methods, "seeds": seeds, "scenario": sc.raw or sc.name}, seeds, inputs)
    res = run_benchmark(sc, methods, seeds, out, params=params, workers=args.workers)
    for row in res.summary:
        if row["runs"]:
            print(f"{row['method']:>14}: TP {row['TP_mean']:.1f}±{row['TP_std']:.1f}  ATT {row['ATT_mean']:.2f}±{row['ATT_std']:.2f}")
        else:
            print(f"{row['method']:>14}: failed")
    return EXIT_PARTIAL if res.failed else EXIT_OK


def cmd_gen_demand(args) -> int:
    if args.gamma < 0 or args.theta < 0:
        raise ConfigError("gamma and theta must be >= 0")
    if args.horizon <= 0:
        raise ConfigError("--horizon must be > 0")
    net = load_network(args.network)
    inputs = {str(args.network): _digest(args.network)}
    if args.partition:
        part = load_partition(args.partition)
        inputs[str(args.partition)] = _digest(args.partition)
    else:
        part = louvain_partition(net, args.resolution, args.seed)
    try:
        acts = [float(a) for a in args.activities.split(",")] if args.activities else [1.0] * part.k
    except ValueError:
        raise ConfigError(f"bad --activities {args.activities!r}") from None
    if len(acts) != part.k:
        raise ConfigError(f"{len(acts)} activities given for {part.k} regions")
    out = FilePath(args.out)
    cfg = {"gamma": args.gamma, "theta": args.theta, "horizon_s": args.horizon, "activities": acts, "bucket_s": args.bucket}
    write_manifest(out, "gen-demand", cfg, args.seed, inputs)
    trips = generate_background_demand(net, part, acts, args.gamma, args.theta, args.horizon, args.seed, args.bucket, start_id=0)
    if args.controlled:
        trips = [type(t)(t.vehicle_id, t.origin, t.dest, t.depart_s, True) for t in trips]
    save_demand(trips, out / "demand.csv")
    print(f"{len(trips)} trips written to {out / 'demand.csv'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiernav", description="Hierarchical multi-vehicle navigation on a queue simulator.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("partition", help="split a network into regions")
    sp.add_argument("--network", required=True)
    sp.add_argument("--resolution", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_partition)

    def scenario_args(q):
        q.add_argument("--scenario", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config", action="append", metavar="KEY=VALUE", help="override a scenario key (dotted path)")

    sp = sub.add_parser("run", help="simulate one episode")
    scenario_args(sp)
    sp.add_argument("--method", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--params", help="policy parameters JSON for softmax-hier")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("train", help="train the softmax policy")
    scenario_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", help="compare methods over seeds")
    scenario_args(sp)
    sp.add_argument("--methods", help="comma-separated; defaults to the scenario list")
    sp.add_argument("--seeds", help="comma-separated; defaults to the scenario list")
    sp.add_argument("--params", help="policy parameters JSON for softmax-hier")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gen-demand", help="gravity-model background demand")
    sp.add_argument("--network", required=True)
    sp.add_argument("--partition", help="partition CSV; Louvain when omitted")
    sp.add_argument("--resolution", type=float, default=1.0)
    sp.add_argument("--activities", help="comma-separated activity per region")
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--theta", type=float, default=1.0)
    sp.add_argument("--horizon", type=float, default=3600.0)
    sp.add_argument("--bucket", type=float, default=300.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--controlled", action="store_true", help="mark generated trips as controlled")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_demand)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, NetworkError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
