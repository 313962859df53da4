import numpy as np
import pytest

from hiernav.netgraph import RoadNetwork
from hiernav.partition import (
    Partition,
    build_region_graph,
    louvain_partition,
    modularity,
    undirected_weights,
)
from oracles import best_modularity, modularity_oracle, random_graph


def bidirected(nodes, pairs):
    edges = []
    for a, b in pairs:
        edges.append((len(edges), a, b, 100.0, 10.0))
        edges.append((len(edges), b, a, 100.0, 10.0))
    return RoadNetwork.build([(n, float(n), 0.0) for n in nodes], edges)


def clique_pairs(ns):
    return [(a, b) for i, a in enumerate(ns) for b in ns[i + 1 :]]


@pytest.fixture
def two_cliques():
    return bidirected(range(8), clique_pairs([0, 1, 2, 3]) + clique_pairs([4, 5, 6, 7]) + [(3, 4)])


def test_two_cliques_oracle(two_cliques):
    part = louvain_partition(two_cliques, seed=0)
    assert part.members() == [[0, 1, 2, 3], [4, 5, 6, 7]]
    q = modularity(two_cliques, part)
    assert q == pytest.approx(best_modularity(two_cliques, undirected_weights(two_cliques)), abs=1e-12)


def test_single_node():
    net = RoadNetwork.build([(4, 0, 0)], [])
    assert louvain_partition(net).k == 1


def test_disconnected_triangles():
    net = bidirected(range(6), clique_pairs([0, 1, 2]) + clique_pairs([3, 4, 5]))
    part = louvain_partition(net, seed=3)
    assert part.members() == [[0, 1, 2], [3, 4, 5]]
    # brute-force optimum and hand value: 2 * (1/2 - 1/4) = 0.5
    assert modularity(net, part) == pytest.approx(0.5, abs=1e-12)
    assert best_modularity(net, undirected_weights(net)) == pytest.approx(0.5, abs=1e-12)


def test_modularity_trivial_and_singletons():
    tri = bidirected(range(3), clique_pairs([0, 1, 2]))
    assert modularity(tri, Partition.single(tri)) == pytest.approx(0.0, abs=1e-15)
    singles = Partition.from_groups([[0], [1], [2]])
    q = modularity(tri, singles)
    assert q == pytest.approx(modularity_oracle([0, 1, 2], undirected_weights(tri), [[0], [1], [2]]), abs=1e-12)
    assert q == pytest.approx(-1.0 / 3.0, abs=1e-12)


def test_modularity_matches_pairwise_definition():
    rng = np.random.default_rng(5)
    for _ in range(30):
        net = random_graph(rng, 8, 20)
        labels = rng.integers(0, 3, size=len(net.nodes))
        groups = [[n for n in net.node_ids() if labels[n] == g] for g in range(3)]
        part = Partition.from_groups(groups)
        assert modularity(net, part) == pytest.approx(
            modularity_oracle(net.node_ids(), undirected_weights(net), [g for g in groups if g]), abs=1e-12
        )


def test_region_graph_two_regions():
    net = RoadNetwork.build([(0, 0, 0), (1, 1, 0)], [(1, 0, 1, 10, 1), (2, 1, 0, 10, 1)])
    rg = build_region_graph(net, Partition.from_groups([[0], [1]]))
    assert rg.boundary_edges(0, 1) == (1,) and rg.boundary_edges(1, 0) == (2,)


def test_region_graph_single_region(two_cliques):
    rg = build_region_graph(two_cliques, Partition.single(two_cliques))
    assert rg.adjacency == []


def test_region_graph_line():
    net = bidirected(range(3), [(0, 1), (1, 2)])
    rg = build_region_graph(net, Partition.from_groups([[0], [1], [2]]))
    und = {tuple(sorted(p)) for p in rg.adjacency}
    assert und == {(0, 1), (1, 2)}


def test_cover_and_boundary_invariants():
    rng = np.random.default_rng(8)
    for seed in range(25):
        net = random_graph(rng, 10, 30)
        part = louvain_partition(net, seed=seed)
        assert sorted(part.region_of) == net.node_ids()
        assert sorted(set(part.region_of.values())) == list(range(part.k))
        rg = build_region_graph(net, part)
        listed = [e for edges in rg.boundary.values() for e in edges]
        assert len(listed) == len(set(listed))
        crossing = {e.id for e in net.edges.values() if part.region_of[e.src] != part.region_of[e.dst]}
        assert set(listed) == crossing


def test_regions_connected():
    rng = np.random.default_rng(2)
    for seed in range(20):
        net = random_graph(rng, 10, 12)
        part = louvain_partition(net, seed=seed)
        adj = {n: set() for n in net.nodes}
        for e in net.edges.values():
            adj[e.src].add(e.dst)
            adj[e.dst].add(e.src)
        for grp in part.members():
            seen, stack = {grp[0]}, [grp[0]]
            while stack:
                u = stack.pop()
                for v in adj[u]:
                    if v in grp and v not in seen:
                        seen.add(v)
                        stack.append(v)
            assert seen == set(grp)


def test_louvain_deterministic():
    rng = np.random.default_rng(1)
    net = random_graph(rng, 10, 30)
    assert louvain_partition(net, seed=4) == louvain_partition(net, seed=4)


def test_rejects_bad_resolution(two_cliques):
    with pytest.raises(ValueError):
        louvain_partition(two_cliques, resolution=0)
