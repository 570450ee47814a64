import numpy as np
import pytest

from hetkit.hetgraph import GraphDataError, LabelTable
from hetkit.homophily import (
    BucketScheme,
    LocalMetricVector,
    aggregate_rows,
    bucket_nodes,
    edge_dirichlet_energy,
    edge_label_homophily,
    mde,
    mlh,
    node_dirichlet_energy,
    node_label_homophily,
)
from hetkit.metapath import InducedGraph, Metapath

from conftest import make_graph


def induced(n, pairs, node_type="x"):
    pairs = np.array(sorted((min(u, v), max(u, v)) for u, v in pairs), dtype=np.int64)
    return InducedGraph(
        node_type=node_type,
        node_count=n,
        pairs=pairs.reshape(-1, 2),
        metapath=Metapath(steps=("r", "rev_r"), types=(node_type, "y", node_type)),
    )


def labtab(classes, assignments, multilabel=False, target="x"):
    return LabelTable(
        target_type=target, num_classes=classes, assignments=assignments, multilabel=multilabel
    )


def dense_normalized_laplacian(n, pairs):
    """Oracle: L = I - D^-1/2 A D^-1/2 restricted to non-isolated nodes."""
    a = np.zeros((n, n))
    for u, v in pairs:
        a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1)
    dinv = np.zeros(n)
    dinv[deg > 0] = deg[deg > 0] ** -0.5
    lap = np.diag((deg > 0).astype(float)) - dinv[:, None] * a * dinv[None, :]
    return lap


def random_regular_graph(d, n, rng, max_tries=200):
    """Pairing-model d-regular simple graph (n*d must be even)."""
    assert (n * d) % 2 == 0
    for _ in range(max_tries):
        stubs = np.repeat(np.arange(n), d)
        rng.shuffle(stubs)
        pairs = {(min(a, b), max(a, b)) for a, b in zip(stubs[::2], stubs[1::2])}
        if len(pairs) == n * d // 2 and all(u != v for u, v in pairs):
            return sorted(pairs)
    raise RuntimeError("failed to draw a simple regular graph")


# ---------------------------------------------------------------------------
# Label homophily
# ---------------------------------------------------------------------------


def test_edge_homophily_triangle_uniform():
    ig = induced(3, [(0, 1), (1, 2), (0, 2)])
    assert edge_label_homophily(ig, labtab(2, {0: 0, 1: 0, 2: 0})) == 1.0


def test_edge_homophily_single_disagreeing_edge():
    ig = induced(2, [(0, 1)])
    assert edge_label_homophily(ig, labtab(2, {0: 0, 1: 1})) == 0.0


def test_edge_homophily_path():
    ig = induced(4, [(0, 1), (1, 2), (2, 3)])
    labels = labtab(2, {0: 0, 1: 0, 2: 1, 3: 1})
    # oracle: brute force over the 3 edges
    y = {0: 0, 1: 0, 2: 1, 3: 1}
    expected = sum(y[u] == y[v] for u, v in [(0, 1), (1, 2), (2, 3)]) / 3
    assert edge_label_homophily(ig, labels) == pytest.approx(expected)
    assert expected == pytest.approx(2 / 3)


def test_edge_homophily_excludes_unlabeled():
    ig = induced(3, [(0, 1), (1, 2)])
    # node 2 unlabeled: only edge (0,1) qualifies
    assert edge_label_homophily(ig, labtab(2, {0: 0, 1: 0})) == 1.0


def test_edge_homophily_absent_value():
    ig = induced(3, [])
    assert edge_label_homophily(ig, labtab(2, {0: 0})) is None


def test_edge_homophily_multilabel_intersection():
    ig = induced(3, [(0, 1), (1, 2)])
    labels = labtab(4, {0: (0, 1), 1: (1, 2), 2: (3,)}, multilabel=True)
    assert edge_label_homophily(ig, labels) == pytest.approx(0.5)


def test_node_homophily_path():
    ig = induced(4, [(0, 1), (1, 2), (2, 3)])
    mean, vec = node_label_homophily(ig, labtab(2, {0: 0, 1: 0, 2: 1, 3: 1}))
    # hand enumeration: H = [1, 1/2, 1/2, 1]
    assert np.allclose(vec.values, [1.0, 0.5, 0.5, 1.0])
    assert mean == pytest.approx((1 + 0.5 + 0.5 + 1) / 4) == pytest.approx(0.75)


def test_node_homophily_isolated_absent():
    ig = induced(1, [])
    mean, vec = node_label_homophily(ig, labtab(2, {0: 0}))
    assert mean is None
    assert vec.isolated.all()


@pytest.mark.parametrize("seed", range(5))
def test_regular_graph_node_equals_edge(seed):
    rng = np.random.default_rng(seed)
    n = 20
    pairs = random_regular_graph(3, n, rng)
    ig = induced(n, pairs)
    labels = labtab(3, {u: int(rng.integers(3)) for u in range(n)})
    edge_val = edge_label_homophily(ig, labels)
    node_val, _ = node_label_homophily(ig, labels)
    assert node_val == pytest.approx(edge_val, abs=1e-12)


# ---------------------------------------------------------------------------
# Dirichlet energy
# ---------------------------------------------------------------------------


def test_energy_identical_features_regular():
    rng = np.random.default_rng(0)
    pairs = random_regular_graph(3, 12, rng)
    x = np.tile([1.5, -2.0], (12, 1))
    assert edge_dirichlet_energy(induced(12, pairs), x) == pytest.approx(0.0)


def test_energy_single_edge():
    ig = induced(2, [(0, 1)])
    x = np.array([[1.0], [0.0]])
    val = edge_dirichlet_energy(ig, x)
    assert val == pytest.approx(0.5)
    # oracle: 1/2 x^T L x with L = [[1,-1],[-1,1]]
    lap = dense_normalized_laplacian(2, [(0, 1)])
    assert val == pytest.approx(0.5 * float(x[:, 0] @ lap @ x[:, 0]))


def test_energy_zero_features():
    ig = induced(4, [(0, 1), (2, 3)])
    assert edge_dirichlet_energy(ig, np.zeros((4, 3))) == 0.0


def test_energy_dimension_mismatch():
    ig = induced(2, [(0, 1)])
    with pytest.raises(ValueError, match="feature matrix"):
        edge_dirichlet_energy(ig, np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_energy_trace_identity(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(5, 40))
    all_pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    take = rng.random(len(all_pairs)) < 0.2
    pairs = [p for p, t in zip(all_pairs, take) if t]
    x = rng.standard_normal((n, 4))
    ig = induced(n, pairs)
    lap = dense_normalized_laplacian(n, pairs)
    assert edge_dirichlet_energy(ig, x) == pytest.approx(
        0.5 * float(np.trace(x.T @ lap @ x)), abs=1e-9
    )


def test_energy_scale_bound_frobenius(rng):
    # energy <= ||L||_op/2 * ||X||_F^2 <= 1 when the Frobenius norm is <= 1;
    # the spectral-norm version fails already for X = I (energy = trace(L)/2)
    n = 30
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.3]
    x = rng.standard_normal((n, 5))
    x /= np.linalg.norm(x)
    assert edge_dirichlet_energy(induced(n, pairs), x) <= 1.0 + 1e-12


def test_energy_scale_bound_single_column(rng):
    # with one feature column the spectral and Frobenius norms coincide
    n = 20
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.4]
    x = rng.standard_normal((n, 1))
    x /= np.linalg.norm(x, 2)
    assert edge_dirichlet_energy(induced(n, pairs), x) <= 1.0 + 1e-12


def test_node_energy_single_edge():
    ig = induced(2, [(0, 1)])
    mean, vec = node_dirichlet_energy(ig, np.array([[1.0], [0.0]]))
    assert np.allclose(vec.values, [0.25, 0.25])
    assert mean == pytest.approx(0.25)


def test_node_energy_identical_features():
    rng = np.random.default_rng(1)
    pairs = random_regular_graph(4, 10, rng)
    mean, vec = node_dirichlet_energy(induced(10, pairs), np.ones((10, 3)))
    assert mean == pytest.approx(0.0)
    assert np.allclose(vec.values[~vec.isolated], 0.0)


@pytest.mark.parametrize("seed", range(8))
def test_node_energy_row_norm_bound(seed):
    # E(u) <= M^2 where M is the max row l2 norm
    rng = np.random.default_rng(200 + seed)
    n = int(rng.integers(4, 30))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.3]
    if not pairs:
        pytest.skip("empty draw")
    x = rng.standard_normal((n, 3)) * rng.uniform(0.1, 3.0)
    m = float(np.linalg.norm(x, axis=1).max())
    _, vec = node_dirichlet_energy(induced(n, pairs), x)
    assert np.all(vec.values[~vec.isolated] <= m * m + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_metric_ranges(seed):
    rng = np.random.default_rng(300 + seed)
    n = 15
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.25]
    if not pairs:
        pytest.skip("empty draw")
    ig = induced(n, pairs)
    labels = labtab(3, {u: int(rng.integers(3)) for u in range(n)})
    e = edge_label_homophily(ig, labels)
    assert 0.0 <= e <= 1.0
    nmean, nvec = node_label_homophily(ig, labels)
    assert 0.0 <= nmean <= 1.0
    active = nvec.values[~nvec.isolated]
    assert np.all((active >= 0.0) & (active <= 1.0))
    x = rng.standard_normal((n, 3))
    assert edge_dirichlet_energy(ig, x) >= 0.0
    emean, evec = node_dirichlet_energy(ig, x)
    assert emean >= 0.0
    assert np.all(evec.values[~evec.isolated] >= 0.0)


# ---------------------------------------------------------------------------
# MLH / MDE reports
# ---------------------------------------------------------------------------


def test_aggregate_rows_mean_and_absent():
    assert aggregate_rows([0.81, 0.64, 0.33]) == pytest.approx((0.81 + 0.64 + 0.33) / 3)
    assert aggregate_rows([0.5, None]) == pytest.approx(0.5)
    assert aggregate_rows([None, None]) is None


def labeled_bipartite():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.5]])
    return make_graph(
        {"item": 4, "ctx": 3},
        [("of", "ctx", "item", [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3)], True)],
        labels=("item", 2, {0: 0, 1: 0, 2: 1, 3: 1}, False),
        features={"item": feats},
    )


def test_mlh_report_single_metapath():
    g = labeled_bipartite()
    report = mlh(g, "item")
    assert len(report.rows) == 1
    # single metapath: aggregate equals that metapath's homophily
    assert report.aggregate == report.rows[0].value
    # oracle: induced edges are {0,1},{1,2},{2,3}; agreements 1,0,1
    assert report.aggregate == pytest.approx(2 / 3)


def test_mde_report_matches_direct_energy():
    from hetkit.metapath import enumerate_length2, induce_subgraph

    g = labeled_bipartite()
    report = mde(g, "item")
    p = enumerate_length2(g, "item")[0]
    direct = edge_dirichlet_energy(induce_subgraph(g, p), g.node_type("item").features)
    assert report.aggregate == pytest.approx(direct)


def test_mlh_node_level():
    g = labeled_bipartite()
    report = mlh(g, "item", level="node")
    assert report.level == "node"
    # path 0-1-2-3 with labels [0,0,1,1]: node mean 0.75
    assert report.aggregate == pytest.approx(0.75)


def test_mlh_no_metapaths_raises():
    g = make_graph({"a": 2, "b": 2}, [("r", "a", "b", [(0, 0)])],
                   labels=("a", 2, {0: 0, 1: 1}, False))
    with pytest.raises(GraphDataError, match="no length-2 metapaths"):
        mlh(g, "a")


def test_mde_featureless_raises():
    g = make_graph(
        {"a": 2, "b": 2},
        [("r", "a", "b", [(0, 0)], True)],
        labels=("a", 2, {0: 0, 1: 1}, False),
    )
    with pytest.raises(GraphDataError, match="no features"):
        mde(g, "a")


def test_report_json_roundtrip():
    import json

    g = labeled_bipartite()
    d = json.loads(mlh(g, "item").to_json())
    assert d["aggregate"] == pytest.approx(2 / 3)
    assert d["rows"][0]["steps"] == "rev_of,of"


# ---------------------------------------------------------------------------
# Bucketing
# ---------------------------------------------------------------------------


def vec(values, isolated=None):
    values = np.asarray(values, dtype=np.float64)
    if isolated is None:
        isolated = np.zeros(len(values), dtype=bool)
    return LocalMetricVector(values=values, isolated=np.asarray(isolated, dtype=bool))


def test_bucket_all_equal_quantiles():
    buckets, _ = bucket_nodes(vec([0.5] * 8), BucketScheme(quantiles=5))
    occupied = [b for b in buckets if b.node_ids.size]
    assert len(buckets) == 5 and len(occupied) == 1
    assert occupied[0].node_ids.size == 8


def test_bucket_fixed_edges():
    buckets, _ = bucket_nodes(
        vec([0.1, 0.3, 0.6, 0.9]), BucketScheme(fixed_edges=[0.0, 0.5, 1.0])
    )
    assert [sorted(b.node_ids.tolist()) for b in buckets] == [[0, 1], [2, 3]]


def test_bucket_boundary_to_lower():
    buckets, _ = bucket_nodes(
        vec([0.0, 0.5, 1.0]), BucketScheme(fixed_edges=[0.0, 0.5, 1.0])
    )
    assert sorted(buckets[0].node_ids.tolist()) == [0, 1]
    assert buckets[1].node_ids.tolist() == [2]


def test_bucket_exhaustive_and_isolated(rng):
    values = rng.random(50)
    isolated = rng.random(50) < 0.2
    v = vec(values, isolated)
    buckets, iso_ids = bucket_nodes(v, BucketScheme(quantiles=4))
    union = np.concatenate([b.node_ids for b in buckets])
    assert sorted(union.tolist()) == sorted(v.active_ids().tolist())
    assert sorted(iso_ids.tolist()) == sorted(np.nonzero(isolated)[0].tolist())


def test_bucket_empty_input():
    with pytest.raises(ValueError, match="no non-isolated"):
        bucket_nodes(vec([1.0], isolated=[True]), BucketScheme(quantiles=2))
