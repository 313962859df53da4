"""Metrics, benchmark orchestration and exports."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path as FilePath
from typing import Sequence

import numpy as np

from .mesosim import EpisodeLog, Trip, background_signature, run_episode
from .navigators import make_navigator
from .policy import LLMClient, LLMConfig, LLMPolicy, PolicyParams, SoftmaxPolicy, StubTransport
from .scenario import Scenario

log = logging.getLogger(__name__)

METHODS = ("dijkstra", "mindits", "minlat", "greedy-hier", "softmax-hier", "llm-hier")
METRIC_FIELDS = ("TP", "ATT", "AWT", "ADT")


@dataclass
class MetricsReport:
    method: str
    seed: int
    TP: int
    ATT: float
    AWT: float
    ADT: float
    n_controlled: int = 0
    n_departed: int = 0
    empty: list[str] = field(default_factory=list)
    status: str = "ok"


def compute_metrics(log_: EpisodeLog) -> MetricsReport:
    """Throughput and mean travel, waiting and delay times over controlled vehicles."""
    dt = log_.step_length_s
    horizon = log_.horizon_s
    ctl = log_.controlled()
    done = [r for r in ctl if r.arrive_s is not None]
    departed = [r for r in ctl if r.depart_s < horizon or r.arrive_s is not None]
    empty = []
    if done:
        att = math.fsum(r.arrive_s - r.depart_s for r in done) / len(done)
    else:
        att = 0.0
        empty.append("ATT")
    if departed:
        awt = math.fsum(r.waiting_steps * dt for r in departed) / len(departed)
        adt = math.fsum(
            ((r.arrive_s if r.arrive_s is not None else horizon) - r.depart_s) - r.planned_fft_s for r in departed
        ) / len(departed)
    else:
        awt = adt = 0.0
        empty += ["AWT", "ADT"]
    return MetricsReport(log_.method, log_.seed, len(done), att, awt, adt, len(ctl), len(departed), empty)


def check_identities(log_: EpisodeLog, report: MetricsReport, tol: float = 1e-9) -> None:
    """Raise if the report disagrees with the raw log."""
    done = [r for r in log_.controlled() if r.arrive_s is not None]
    if report.TP != len(done):
        raise AssertionError(f"TP {report.TP} != arrivals {len(done)}")
    total = math.fsum(r.arrive_s - r.depart_s for r in done)
    if abs(report.TP * report.ATT - total) > tol * max(1.0, abs(total)):
        raise AssertionError(f"TP*ATT {report.TP * report.ATT} != sum of durations {total}")
    passes = sum(n for _, n in log_.pass_counts)
    if passes != sum(len(r.route) for r in log_.vehicles):
        raise AssertionError("pass counts disagree with routes")


def arrival_rate_stats(demand: Sequence[Trip], bucket_s: float = 300.0, horizon_s: float | None = None) -> tuple[float, float, float, float]:
    """Mean, std, max and min departures per bucket; empty trailing buckets count."""
    if not demand:
        raise ValueError("empty demand")
    last = max(t.depart_s for t in demand)
    horizon = horizon_s if horizon_s is not None else last + 1e-9
    n = max(1, int(math.ceil(horizon / bucket_s - 1e-12)))
    counts = np.zeros(n)
    for t in demand:
        b = int(t.depart_s // bucket_s)
        if b < n:
            counts[b] += 1
    return float(counts.mean()), float(counts.std()), float(counts.max()), float(counts.min())


def export_heatmap(log_: EpisodeLog, path=None) -> list[tuple[int, int]]:
    rows = sorted((int(e), int(n)) for e, n in log_.pass_counts)
    if path is not None:
        with FilePath(path).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["edge_id", "pass_count"])
            w.writerows(rows)
    return rows


def build_navigator(method: str, scenario: Scenario, seed: int, params: PolicyParams | None = None, llm: LLMClient | None = None):
    policy = None
    if method == "softmax-hier":
        if params is None:
            params = PolicyParams.load(scenario.policy_params) if scenario.policy_params else PolicyParams()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        policy = SoftmaxPolicy(params, rng)
    elif method == "llm-hier":
        policy = LLMPolicy(llm if llm is not None else default_llm_client())
    return make_navigator(method, scenario.net, scenario.partition, scenario.region_graph, policy=policy)


def default_llm_client() -> LLMClient:
    """Client from the environment; a ``stub:<reply>`` URL gives an offline fixed-reply endpoint."""
    cfg = LLMConfig.from_env()
    if cfg.url and cfg.url.startswith("stub:"):
        return LLMClient(cfg, StubTransport(cfg.url[len("stub:"):]))
    return LLMClient(cfg)


def run_cell(scenario: Scenario, method: str, seed: int, params=None, llm=None) -> EpisodeLog:
    nav = build_navigator(method, scenario, seed, params, llm)
    return run_episode(scenario.net, scenario.partition, scenario.demand(seed), nav, scenario.sim_config(seed))


@dataclass
class BenchResult:
    reports: list[MetricsReport]
    logs: dict[tuple[str, int], EpisodeLog]
    summary: list[dict]

    @property
    def failed(self) -> list[MetricsReport]:
        return [r for r in self.reports if r.status != "ok"]


def summarize(reports: Sequence[MetricsReport], methods: Sequence[str]) -> list[dict]:
    out = []
    for m in methods:
        rs = [r for r in reports if r.method == m and r.status == "ok"]
        row: dict = {"method": m, "runs": len(rs)}
        for f in METRIC_FIELDS:
            vals = np.array([getattr(r, f) for r in rs], dtype=float)
            row[f"{f}_mean"] = float(vals.mean()) if len(vals) else None
            row[f"{f}_std"] = float(vals.std()) if len(vals) else None
        out.append(row)
    return out


def dedupe_methods(methods: Sequence[str]) -> list[str]:
    seen: list[str] = []
    for m in methods:
        if m in seen:
            log.warning("duplicate method %r ignored", m)
            continue
        seen.append(m)
    return seen


def run_benchmark(
    scenario: Scenario,
    methods: Sequence[str],
    seeds: Sequence[int],
    out_dir=None,
    params: PolicyParams | None = None,
    llm: LLMClient | None = None,
    workers: int = 1,
) -> BenchResult:
    """One episode per (method, seed); failures are recorded, not raised."""
    methods = dedupe_methods(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    cells = [(m, s) for m in methods for s in seeds]

    def run(cell):
        m, s = cell
        try:
            lg = run_cell(scenario, m, s, params, llm)
            return compute_metrics(lg), lg
        except Exception as exc:  # a failing method must not sink the table
            log.error("method %s seed %d failed: %s", m, s, exc)
            return MetricsReport(m, s, 0, math.nan, math.nan, math.nan, status=f"failed: {exc}"), None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, cells))
    else:
        results = [run(c) for c in cells]

    reports = [r for r, _ in results]
    logs = {(r.method, r.seed): lg for r, lg in results if lg is not None}
    for s in seeds:
        sigs = [background_signature(lg) for (_, s2), lg in logs.items() if s2 == s]
        if any(sig != sigs[0] for sig in sigs):
            log.warning("background traffic differs across methods for seed %d", s)
    res = BenchResult(reports, logs, summarize(reports, methods))
    if out_dir is not None:
        write_outputs(res, FilePath(out_dir), methods, seeds)
    return res


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def write_outputs(res: BenchResult, out: FilePath, methods: Sequence[str], seeds: Sequence[int]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(res.reports, out / "metrics.csv")
    with (out / "summary.csv").open("w", encoding="utf-8", newline="") as fh:
        cols = ["method", "runs"] + [f"{f}_{s}" for f in METRIC_FIELDS for s in ("mean", "std")]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in res.summary:
            w.writerow([_fmt(row[c]) if row[c] is not None else "" for c in cols])
    (out / "summary.json").write_text(
        json.dumps({"summary": res.summary, "cells": [asdict(r) for r in res.reports]}, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )
    for m in methods:
        for s in seeds:
            lg = res.logs.get((m, s))
            if lg is not None:
                export_heatmap(lg, out / f"heatmap_{m}.csv")
                break


def write_metrics_csv(reports: Sequence[MetricsReport], path) -> None:
    with FilePath(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "TP", "ATT", "AWT", "ADT", "status"])
        for r in reports:
            w.writerow([r.method, r.seed, r.TP, _fmt(r.ATT), _fmt(r.AWT), _fmt(r.ADT), r.status])
