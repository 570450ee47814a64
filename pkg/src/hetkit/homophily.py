"""Label-homophily and Dirichlet-energy metrics over metapath-induced graphs.

Conventions:
  * Edge label homophily: fraction of unordered edges whose endpoints agree
    (multilabel: label sets intersect). Edges with an unlabeled endpoint are
    excluded from the denominator.
  * Node label homophily: per-node agreeing-neighbor fraction H(u), averaged
    over non-isolated labeled nodes.
  * Edge Dirichlet energy: (1/4) * sum over ordered edge pairs of
    ||x_u/sqrt(d_u) - x_v/sqrt(d_v)||^2, identical to
    (1/2) * trace(X^T L X) with L the symmetric-normalized Laplacian
    restricted to non-isolated nodes. Degrees are induced-graph degrees.
  * Node Dirichlet energy: E(u) = (1/(4 d_u)) * sum over neighbors of the
    same normalized difference, averaged over non-isolated nodes.
  * The metapath-level aggregate (MLH / MDE) is the plain arithmetic mean of
    per-metapath values; metapaths with undefined values are skipped.

All computations are pure and read-only; per-metapath rows may be computed
concurrently by a caller and reduced afterwards.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .hetgraph import GraphDataError, HetGraph, LabelTable
from .metapath import InducedGraph, enumerate_length2, induce_subgraph

log = logging.getLogger(__name__)


@dataclass
class LocalMetricVector:
    """Per-node values of a local metric; NaN where a node is excluded."""

    values: np.ndarray
    isolated: np.ndarray  # True where the node has no qualifying neighbors

    @property
    def mean(self) -> float | None:
        active = ~self.isolated
        if not active.any():
            return None
        return float(self.values[active].mean())

    def active_ids(self) -> np.ndarray:
        return np.nonzero(~self.isolated)[0]


@dataclass
class MetricRow:
    metapath: str
    steps: str
    value: float | None
    n_edges: int = 0
    n_excluded_edges: int = 0
    n_isolated: int = 0


@dataclass
class MetricReport:
    """Per-metapath metric rows plus their arithmetic-mean aggregate."""

    target_type: str
    kind: str  # "label_homophily" | "dirichlet_energy"
    level: str  # "edge" | "node"
    rows: list

    @property
    def aggregate(self) -> float | None:
        return aggregate_rows(r.value for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "target_type": self.target_type,
            "kind": self.kind,
            "level": self.level,
            "rows": [
                {
                    "metapath": r.metapath,
                    "steps": r.steps,
                    "value": r.value,
                    "n_edges": r.n_edges,
                    "n_excluded_edges": r.n_excluded_edges,
                    "n_isolated": r.n_isolated,
                }
                for r in self.rows
            ],
            "aggregate": self.aggregate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def aggregate_rows(values) -> float | None:
    """Arithmetic mean of the defined per-metapath values (None if all absent)."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def _label_array(labels: LabelTable, n: int):
    """(labeled mask, agreement closure) over node ids 0..n-1."""
    labeled = np.zeros(n, dtype=bool)
    for u in labels.assignments:
        labeled[u] = True
    if labels.multilabel:
        sets = {u: frozenset(labels.assignments[u]) for u in labels.assignments}

        def agree(u, v):
            return bool(sets[u] & sets[v])

    else:
        arr = np.full(n, -1, dtype=np.int64)
        for u, c in labels.assignments.items():
            arr[u] = c

        def agree(u, v):
            return arr[u] == arr[v]

    return labeled, agree


def edge_label_homophily(ig: InducedGraph, labels: LabelTable) -> float | None:
    """Fraction of (unordered) induced edges whose endpoints share a label.

    Returns None when no qualifying edge exists.
    """
    labeled, agree = _label_array(labels, ig.node_count)
    qualifying = 0
    agreeing = 0
    for u, v in ig.pairs:
        if labeled[u] and labeled[v]:
            qualifying += 1
            if agree(u, v):
                agreeing += 1
    excluded = ig.n_edges - qualifying
    if excluded:
        log.debug("edge_label_homophily: excluded %d edges with unlabeled endpoints", excluded)
    if qualifying == 0:
        return None
    return agreeing / qualifying


def node_label_homophily(
    ig: InducedGraph, labels: LabelTable
) -> tuple[float | None, LocalMetricVector]:
    """Per-node agreeing-neighbor fraction H(u) and its mean.

    Unlabeled nodes and nodes with no labeled neighbors are excluded from the
    mean and flagged isolated.
    """
    n = ig.node_count
    labeled, agree = _label_array(labels, n)
    values = np.full(n, np.nan)
    isolated = np.ones(n, dtype=bool)
    for u in range(n):
        if not labeled[u]:
            continue
        nbrs = [v for v in ig.neighbors(u) if labeled[v]]
        if not nbrs:
            continue
        values[u] = sum(agree(u, v) for v in nbrs) / len(nbrs)
        isolated[u] = False
    vec = LocalMetricVector(values=values, isolated=isolated)
    return vec.mean, vec


def _normalized_rows(ig: InducedGraph, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != ig.node_count:
        raise ValueError(
            f"feature matrix must be ({ig.node_count}, d); got {x.shape}"
        )
    deg = ig.degrees().astype(np.float64)
    scale = np.zeros_like(deg)
    nz = deg > 0
    scale[nz] = 1.0 / np.sqrt(deg[nz])
    return x * scale[:, None], deg


def edge_dirichlet_energy(ig: InducedGraph, x: np.ndarray) -> float:
    """Degree-normalized feature roughness over induced edges (>= 0)."""
    xn, _ = _normalized_rows(ig, x)
    if ig.n_edges == 0:
        return 0.0
    diff = xn[ig.pairs[:, 0]] - xn[ig.pairs[:, 1]]
    # each unordered pair stands for two ordered pairs: 1/4 * 2 = 1/2
    return float(0.5 * np.sum(diff * diff))


def node_dirichlet_energy(
    ig: InducedGraph, x: np.ndarray
) -> tuple[float | None, LocalMetricVector]:
    """Per-node local energy E(u) and its mean over non-isolated nodes."""
    xn, deg = _normalized_rows(ig, x)
    n = ig.node_count
    values = np.full(n, np.nan)
    isolated = deg == 0
    for u in range(n):
        if isolated[u]:
            continue
        nbrs = ig.neighbors(u)
        diff = xn[u][None, :] - xn[nbrs]
        values[u] = float(np.sum(diff * diff) / (4.0 * deg[u]))
    vec = LocalMetricVector(values=values, isolated=isolated)
    return vec.mean, vec


def _metric_rows(g: HetGraph, target: str, kind: str, level: str) -> list:
    paths = enumerate_length2(g, target)
    if not paths:
        raise GraphDataError(f"no length-2 metapaths start and end at type {target!r}")
    if kind == "dirichlet_energy":
        x = g.node_type(target).features
        if x is None:
            raise GraphDataError(f"type {target!r} has no features; energy undefined")
    rows = []
    for p in paths:
        ig = induce_subgraph(g, p)
        n_excluded = 0
        n_isolated = 0
        if kind == "label_homophily":
            if g.labels is None or g.labels.target_type != target:
                raise GraphDataError(f"type {target!r} is not labeled")
            if level == "edge":
                value = edge_label_homophily(ig, g.labels)
            else:
                value, vec = node_label_homophily(ig, g.labels)
                n_isolated = int(vec.isolated.sum())
        else:
            if level == "edge":
                value = edge_dirichlet_energy(ig, x)
            else:
                value, vec = node_dirichlet_energy(ig, x)
                n_isolated = int(vec.isolated.sum())
        rows.append(
            MetricRow(
                metapath=p.label,
                steps=p.text,
                value=value,
                n_edges=ig.n_edges,
                n_excluded_edges=n_excluded,
                n_isolated=n_isolated,
            )
        )
    return rows


def mlh(g: HetGraph, target: str, level: str = "edge") -> MetricReport:
    """Metapath-based label homophily: mean per-metapath agreement."""
    if level not in ("edge", "node"):
        raise ValueError("level must be 'edge' or 'node'")
    return MetricReport(
        target_type=target,
        kind="label_homophily",
        level=level,
        rows=_metric_rows(g, target, "label_homophily", level),
    )


def mde(g: HetGraph, target: str, level: str = "edge") -> MetricReport:
    """Metapath-based Dirichlet energy: mean per-metapath feature roughness."""
    if level not in ("edge", "node"):
        raise ValueError("level must be 'edge' or 'node'")
    return MetricReport(
        target_type=target,
        kind="dirichlet_energy",
        level=level,
        rows=_metric_rows(g, target, "dirichlet_energy", level),
    )


# ---------------------------------------------------------------------------
# Bucketing
# ---------------------------------------------------------------------------


@dataclass
class Bucket:
    lo: float
    hi: float
    node_ids: np.ndarray


@dataclass
class BucketScheme:
    """Either explicit boundary values or a quantile count."""

    fixed_edges: list | None = None
    quantiles: int | None = None

    def __post_init__(self):
        if (self.fixed_edges is None) == (self.quantiles is None):
            raise ValueError("specify exactly one of fixed_edges / quantiles")
        if self.fixed_edges is not None and len(self.fixed_edges) < 2:
            raise ValueError("fixed_edges needs at least two boundaries")
        if self.quantiles is not None and self.quantiles < 1:
            raise ValueError("quantiles must be >= 1")


def bucket_nodes(
    values: LocalMetricVector, scheme: BucketScheme
) -> tuple[list, np.ndarray]:
    """Partition non-isolated nodes into disjoint value buckets.

    Boundary values are assigned to the lower bucket. Returns
    (buckets, isolated_node_ids); bucket node sets are exhaustive over the
    non-isolated nodes.
    """
    active = values.active_ids()
    if active.size == 0:
        raise ValueError("no non-isolated nodes to bucket")
    vals = values.values[active]
    if scheme.fixed_edges is not None:
        edges = [float(e) for e in scheme.fixed_edges]
        if sorted(edges) != edges:
            raise ValueError("fixed_edges must be non-decreasing")
    else:
        k = scheme.quantiles
        edges = [float(q) for q in np.quantile(vals, np.linspace(0.0, 1.0, k + 1))]
    k = len(edges) - 1
    members: list[list[int]] = [[] for _ in range(k)]
    for node, v in zip(active, vals):
        idx = bisect.bisect_left(edges, v) - 1
        idx = min(max(idx, 0), k - 1)
        members[idx].append(int(node))
    buckets = [
        Bucket(lo=edges[i], hi=edges[i + 1], node_ids=np.array(members[i], dtype=np.int64))
        for i in range(k)
    ]
    isolated_ids = np.nonzero(values.isolated)[0]
    return buckets, isolated_ids


def write_bucket_assignments(path, buckets, values: LocalMetricVector) -> None:
    """CSV of per-node bucket assignment: node_id,bucket_index,value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_id,bucket_index,value\n")
        for i, b in enumerate(buckets):
            for u in b.node_ids:
                fh.write(f"{u},{i},{values.values[u]:.17g}\n")
