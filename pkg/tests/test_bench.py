import csv
import json
import math

import pytest

from hiernav import bench
from hiernav.bench import (
    arrival_rate_stats,
    check_identities,
    compute_metrics,
    dedupe_methods,
    export_heatmap,
    run_benchmark,
)
from hiernav.mesosim import EpisodeLog, Trip, VehicleRecord
from hiernav.scenario import corridor_scenario


def record(vid, depart, arrive, waiting=0, fft=0.0, controlled=True, route=()):
    return VehicleRecord(
        id=vid, origin=0, dest=1, controlled=controlled, depart_s=depart, arrive_s=arrive,
        status="arrived" if arrive is not None else "unfinished", idle_steps=waiting,
        waiting_steps=waiting, planned_fft_s=fft, route=list(route), global_plan=[], final_plan=[],
    )


def episode(vehicles, horizon=500.0, dt=1.0):
    return EpisodeLog("m", 0, dt, horizon, {}, vehicles, [], [], [])


def test_single_vehicle_hand_trace():
    r = compute_metrics(episode([record(0, 0.0, 100.0, waiting=10, fft=60.0)]))
    assert (r.TP, r.ATT, r.AWT, r.ADT) == (1, 100.0, 10.0, 40.0)
    assert r.empty == []


def test_waiting_scales_with_step_length():
    r = compute_metrics(episode([record(0, 0.0, 100.0, waiting=5, fft=60.0)], dt=2.0))
    assert r.AWT == 10.0


def test_no_completed_trips_flags_empty():
    r = compute_metrics(episode([record(0, 10.0, None, fft=50.0)], horizon=200.0))
    assert r.TP == 0 and r.ATT == 0.0 and "ATT" in r.empty
    # an unfinished vehicle is charged its residence up to the horizon
    assert r.ADT == 200.0 - 10.0 - 50.0
    empty = compute_metrics(episode([]))
    assert empty.TP == 0 and set(empty.empty) == {"ATT", "AWT", "ADT"}


def test_background_vehicles_excluded():
    r = compute_metrics(episode([record(0, 0.0, 50.0, fft=40.0), record(1, 0.0, 400.0, controlled=False)]))
    assert (r.TP, r.ATT) == (1, 50.0)


def test_not_yet_departed_vehicles_excluded():
    r = compute_metrics(episode([record(0, 0.0, 50.0, fft=40.0), record(1, 600.0, None, fft=40.0)], horizon=500.0))
    assert r.n_departed == 1 and r.ADT == 10.0


def test_identities_catch_mismatch():
    lg = episode([record(0, 0.0, 100.0, route=[1, 2])])
    lg.pass_counts = [[1, 1], [2, 1]]
    rep = compute_metrics(lg)
    check_identities(lg, rep)
    rep.ATT += 1
    with pytest.raises(AssertionError):
        check_identities(lg, rep)


def test_arrival_rate_stats():
    trips = [Trip(i, 0, 1, t, True) for i, t in enumerate([0, 10, 299, 300, 650])]
    mean, std, mx, mn = arrival_rate_stats(trips, 300.0, horizon_s=900.0)
    assert (mx, mn) == (3.0, 1.0)
    assert mean == pytest.approx(5 / 3)
    assert std == pytest.approx(math.sqrt(((3 - 5 / 3) ** 2 + 2 * (1 - 5 / 3) ** 2) / 3))
    with pytest.raises(ValueError):
        arrival_rate_stats([])


def test_heatmap_export(tmp_path):
    lg = episode([])
    lg.pass_counts = [[5, 2], [1, 0], [3, 7]]
    rows = export_heatmap(lg, tmp_path / "h.csv")
    assert rows == [(1, 0), (3, 7), (5, 2)]
    assert (tmp_path / "h.csv").read_text().splitlines() == ["edge_id,pass_count", "1,0", "3,7", "5,2"]


def test_dedupe_methods_warns(caplog):
    assert dedupe_methods(["dijkstra", "minlat", "dijkstra"]) == ["dijkstra", "minlat"]
    assert "duplicate" in caplog.text


def test_benchmark_grid_and_identities(tmp_path):
    sc = corridor_scenario(n_vehicles=30, horizon_s=300)
    res = run_benchmark(sc, ["dijkstra", "greedy-hier"], [0, 1], tmp_path)
    assert len(res.reports) == 4 and not res.failed
    for (m, s), lg in res.logs.items():
        check_identities(lg, next(r for r in res.reports if (r.method, r.seed) == (m, s)))
    with (tmp_path / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["method"], r["seed"]) for r in rows] == [("dijkstra", "0"), ("dijkstra", "1"), ("greedy-hier", "0"), ("greedy-hier", "1")]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [row["method"] for row in summary["summary"]] == ["dijkstra", "greedy-hier"]
    assert (tmp_path / "heatmap_dijkstra.csv").exists()


def test_failing_method_is_recorded(monkeypatch, tmp_path):
    real = bench.run_cell

    def flaky(scenario, method, seed, params=None, llm=None):
        if method == "minlat":
            raise RuntimeError("boom")
        return real(scenario, method, seed, params, llm)

    monkeypatch.setattr(bench, "run_cell", flaky)
    res = run_benchmark(corridor_scenario(n_vehicles=10, horizon_s=200), ["dijkstra", "minlat"], [0], tmp_path)
    assert [r.method for r in res.failed] == ["minlat"]
    assert res.summary[1]["runs"] == 0
    text = (tmp_path / "metrics.csv").read_text()
    assert "dijkstra,0" in text and "failed: boom" in text


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        run_benchmark(corridor_scenario(n_vehicles=5), ["teleport"], [0])


def test_llm_method_with_stub(monkeypatch):
    monkeypatch.setenv("CITYNAV_LLM_URL", "stub:REASONING: first is fine\nCHOICE: 1")
    res = run_benchmark(corridor_scenario(n_vehicles=10, horizon_s=200), ["llm-hier", "greedy-hier"], [0])
    assert not res.failed
    a, b = res.reports
    assert (a.TP, a.ATT) == (b.TP, b.ATT)
