"""Metapath algebra: enumeration, induced subgraphs, and mask/negative sampling.

A metapath is a type-compatible sequence of relations. Composing the step
adjacencies (boolean sparse product) and symmetrizing yields the induced
homogeneous graph on the endpoint type. Walk-based masking removes the
traversed edges (plus reverse twins) from the graph, producing the visible
graph and the positive pair targets for reconstruction.

Everything here is a pure function over an immutable graph; sampling is
sequential under one explicit generator so identical seeds give identical
plans.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .hetgraph import GraphDataError, HetGraph, Relation, build_relation

log = logging.getLogger(__name__)

MAX_INDUCTION_STEPS = 4


@dataclass(frozen=True)
class Metapath:
    """A type-compatible relation sequence with its node-type trail."""

    steps: tuple
    types: tuple

    def __post_init__(self):
        if len(self.types) != len(self.steps) + 1:
            raise ValueError("type trail length must be len(steps)+1")

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def symmetric(self) -> bool:
        return self.types[0] == self.types[-1]

    @property
    def text(self) -> str:
        """CLI/config form: comma-separated relation names."""
        return ",".join(self.steps)

    @property
    def label(self) -> str:
        """Short display form from type-name initials, e.g. APA."""
        return "".join(t[:1].upper() for t in self.types)

    def __str__(self) -> str:
        return self.text


def metapath_from_steps(g: HetGraph, steps) -> Metapath:
    """Build a Metapath from relation names, checking consecutive compatibility."""
    steps = tuple(steps)
    if not steps:
        raise GraphDataError("empty metapath")
    rels = [g.relation(s) for s in steps]
    for a, b in zip(rels, rels[1:]):
        if a.dst_type != b.src_type:
            raise GraphDataError(
                f"incompatible metapath: {a.name!r} ends at {a.dst_type!r} "
                f"but {b.name!r} starts at {b.src_type!r}"
            )
    types = tuple([rels[0].src_type] + [r.dst_type for r in rels])
    return Metapath(steps=steps, types=types)


def parse_metapath(g: HetGraph, text: str) -> Metapath:
    return metapath_from_steps(g, [t.strip() for t in text.split(",") if t.strip()])


def _reverse_steps(g: HetGraph, p: Metapath) -> tuple | None:
    """Relation names of the reversed metapath, or None if a step has no twin."""
    rev = []
    for s in reversed(p.steps):
        twin = g.relation(s).reverse_of
        if twin is None or twin not in g.relations:
            return None
        rev.append(twin)
    return tuple(rev)


def enumerate_length2(g: HetGraph, target: str) -> list:
    """All length-2 metapaths from `target` back to `target`.

    Metapaths that are step-by-step reverses of one another induce the same
    undirected subgraph, so only the lexicographically first of each such
    pair is kept. Output order is lexicographic over relation-name pairs.
    """
    g.node_type(target)  # raises on unknown type
    rels = list(g.relations.values())
    found: list[Metapath] = []
    seen: set[tuple] = set()
    for r1 in sorted(rels, key=lambda r: r.name):
        if r1.src_type != target:
            continue
        for r2 in sorted(rels, key=lambda r: r.name):
            if r2.src_type != r1.dst_type or r2.dst_type != target:
                continue
            p = metapath_from_steps(g, (r1.name, r2.name))
            if p.steps in seen:
                continue
            seen.add(p.steps)
            twin = _reverse_steps(g, p)
            if twin is not None:
                seen.add(twin)
            found.append(p)
    return found


@dataclass(eq=False)
class InducedGraph:
    """Undirected simple graph induced on a metapath's endpoint type.

    `pairs` holds each edge once as (u, v) with u < v, lexicographically
    sorted.
    """

    node_type: str
    node_count: int
    pairs: np.ndarray
    metapath: Metapath
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_edges(self) -> int:
        return int(self.pairs.shape[0])

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric boolean CSR adjacency (cached)."""
        if self._csr is None:
            n = self.node_count
            u, v = self.pairs[:, 0], self.pairs[:, 1]
            data = np.ones(2 * len(u), dtype=np.float64)
            a = sp.coo_matrix(
                (data, (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(n, n)
            ).tocsr()
            a.sort_indices()
            self._csr = a
        return self._csr

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        np.add.at(deg, self.pairs[:, 0], 1)
        np.add.at(deg, self.pairs[:, 1], 1)
        return deg

    def neighbors(self, u: int) -> np.ndarray:
        a = self.adjacency()
        return a.indices[a.indptr[u] : a.indptr[u + 1]]


def _rel_csr(g: HetGraph, name: str) -> sp.csr_matrix:
    rel = g.relation(name)
    m = sp.csr_matrix(
        (np.ones(rel.n_edges, dtype=np.float64), rel.indices, rel.indptr),
        shape=(g.count(rel.src_type), g.count(rel.dst_type)),
    )
    return m


def induce_subgraph(g: HetGraph, p: Metapath) -> InducedGraph:
    """Induced subgraph: edge {u,v}, u != v, iff at least one path follows `p`.

    Implemented as boolean sparse composition of the step adjacencies, then
    self-loop removal and symmetrization.
    """
    if not p.symmetric:
        raise GraphDataError(f"metapath {p.text!r} has asymmetric endpoints; cannot induce")
    if p.length > MAX_INDUCTION_STEPS:
        raise GraphDataError(
            f"metapath {p.text!r} exceeds the induction bound of {MAX_INDUCTION_STEPS} steps"
        )
    m = _rel_csr(g, p.steps[0])
    for s in p.steps[1:]:
        m = m @ _rel_csr(g, s)
        m.data[:] = 1.0  # boolean composition: keep reachability, not path counts
    m = m.tocsr()
    m.setdiag(0)
    m.eliminate_zeros()
    sym = m + m.T
    upper = sp.triu(sym, k=1).tocoo()
    pairs = np.stack([upper.row, upper.col], axis=1).astype(np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return InducedGraph(
        node_type=p.types[0], node_count=g.count(p.types[0]), pairs=pairs[order], metapath=p
    )


def induced_to_tsv(ig: InducedGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in ig.pairs:
            fh.write(f"{u}\t{v}\n")


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MaskPlan:
    """Per-epoch structure mask: positives, removed edges, and the visible graph.

    rho_plus / rho_minus entries are (relation_name, u, v) triples; positives
    are stored in canonical orientation (base relation rather than its
    synthesized reverse twin) and deduplicated.
    """

    seed_state: str
    rho_plus: list
    rho_minus: list
    masked_edges: dict
    g_vis: HetGraph
    skipped_starts: int = 0


def _canonical(g: HetGraph, rel_name: str, u: int, v: int) -> tuple:
    rel = g.relation(rel_name)
    if rel.reverse_of is not None and rel.reverse_of in g.relations:
        twin = g.relations[rel.reverse_of]
        if rel.synthesized and not twin.synthesized:
            return (twin.name, v, u)
        if not rel.synthesized and not twin.synthesized and twin.name < rel.name:
            return (twin.name, v, u)
    return (rel_name, u, v)


def _remove_edges(g: HetGraph, masked: dict) -> HetGraph:
    relations = {}
    for name, rel in g.relations.items():
        gone = masked.get(name)
        if not gone:
            relations[name] = rel
            continue
        gone_set = set(gone)
        src, dst = rel.edge_array()
        keep = np.array([(int(a), int(b)) not in gone_set for a, b in zip(src, dst)], dtype=bool)
        pairs = np.stack([src[keep], dst[keep]], axis=1)
        relations[name], _ = build_relation(
            name,
            rel.src_type,
            rel.dst_type,
            g.count(rel.src_type),
            g.count(rel.dst_type),
            pairs,
            reverse_of=rel.reverse_of,
            synthesized=rel.synthesized,
        )
    return g.with_relations(relations)


def sample_mask(
    g: HetGraph,
    paths,
    mask_ratio: float,
    walk_len: int = 2,
    rng: np.random.Generator | None = None,
) -> MaskPlan:
    """Sample a walk-based edge mask over the metapath set.

    Draws ceil(mask_ratio * count(start_type)) start nodes without
    replacement; from each, walks up to `walk_len` repetitions of one
    uniformly chosen metapath, picking a uniform neighbor at every step.
    Every traversed edge (and its reverse twin) is removed from the visible
    graph; consecutive traversed pairs become rho_plus.
    """
    if rng is None:
        rng = np.random.default_rng()
    if not paths:
        raise GraphDataError("sample_mask requires a nonempty metapath set")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError("mask_ratio must lie in [0, 1]")
    if walk_len < 1:
        raise ValueError("walk_len must be positive")
    start_type = paths[0].types[0]
    if any(p.types[0] != start_type for p in paths):
        raise GraphDataError("all metapaths in the mask set must share a start type")
    n = g.count(start_type)
    if n == 0:
        raise GraphDataError(f"start type {start_type!r} has zero nodes")

    n_starts = math.ceil(mask_ratio * n)
    starts = rng.choice(n, size=n_starts, replace=False) if n_starts else np.array([], dtype=int)

    masked: dict[str, set] = {}
    rho_plus: list[tuple] = []
    rho_seen: set[tuple] = set()
    skipped = 0
    for s in starts:
        p = paths[int(rng.integers(len(paths)))]
        node = int(s)
        traversed = False
        stuck = False
        for _ in range(walk_len):
            for step in p.steps:
                rel = g.relation(step)
                nbrs = rel.neighbors(node)
                if nbrs.size == 0:
                    stuck = True
                    break
                v = int(nbrs[int(rng.integers(nbrs.size))])
                masked.setdefault(step, set()).add((node, v))
                if rel.reverse_of is not None and rel.reverse_of in g.relations:
                    masked.setdefault(rel.reverse_of, set()).add((v, node))
                key = _canonical(g, step, node, v)
                if key not in rho_seen:
                    rho_seen.add(key)
                    rho_plus.append(key)
                node = v
                traversed = True
            if stuck:
                break
        if not traversed:
            skipped += 1
    if skipped:
        log.debug("sample_mask: %d start nodes had no admissible walk", skipped)

    g_vis = _remove_edges(g, masked) if masked else g.with_relations(dict(g.relations))
    masked_arrays = {
        name: np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
        for name, pairs in masked.items()
    }
    return MaskPlan(
        seed_state=str(rng.bit_generator.state.get("state", "")),
        rho_plus=rho_plus,
        rho_minus=[],
        masked_edges=masked_arrays,
        g_vis=g_vis,
        skipped_starts=skipped,
    )


def sample_negatives(
    g: HetGraph, paths, count: int, rng: np.random.Generator | None = None
) -> list:
    """Sample `count` type-conforming non-adjacent pairs as (relation, u, v).

    Each attempt picks a metapath and step uniformly, then endpoint ids
    uniformly from the step's types, rejecting pairs that are edges of the
    step relation. Gives up after 100*count attempts and returns what was
    found (with a warning).
    """
    if rng is None:
        rng = np.random.default_rng()
    if count < 1:
        raise ValueError("count must be >= 1")
    if not paths:
        raise GraphDataError("sample_negatives requires a nonempty metapath set")
    out: list[tuple] = []
    attempts = 0
    budget = 100 * count
    while len(out) < count and attempts < budget:
        attempts += 1
        p = paths[int(rng.integers(len(paths)))]
        step = p.steps[int(rng.integers(len(p.steps)))]
        rel = g.relation(step)
        n_src = g.count(rel.src_type)
        n_dst = g.count(rel.dst_type)
        if n_src == 0 or n_dst == 0:
            continue
        u = int(rng.integers(n_src))
        v = int(rng.integers(n_dst))
        if not rel.has_edge(u, v):
            out.append((step, u, v))
    if len(out) < count:
        log.warning(
            "sample_negatives: found %d/%d non-adjacent pairs within the attempt budget "
            "(relations may be near-complete)",
            len(out),
            count,
        )
    return out
