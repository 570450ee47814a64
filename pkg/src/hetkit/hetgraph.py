"""Typed heterogeneous graph storage: ingestion, validation, neighbor access.

A graph is a set of typed node tables plus typed relations, each relation a
directed adjacency stored in CSR form (sorted, deduplicated rows). Graphs are
immutable after load and safe to share across readers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class GraphDataError(Exception):
    """Raised for malformed manifests, data files, or inconsistent graph data."""


@dataclass(eq=False)
class NodeTypeTable:
    """One node type: `count` nodes with ids 0..count-1 and optional features."""

    name: str
    count: int
    dim: int = 0
    features: np.ndarray | None = None  # (count, dim) float64

    def __post_init__(self):
        if self.count < 0:
            raise GraphDataError(f"node type {self.name!r}: negative count")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape != (self.count, self.dim):
                raise GraphDataError(
                    f"node type {self.name!r}: feature matrix shape "
                    f"{self.features.shape} != ({self.count}, {self.dim})"
                )


@dataclass(eq=False)
class Relation:
    """A directed typed relation stored as CSR over (src, dst) pairs.

    `indptr` has length count(src_type)+1; `indices[indptr[u]:indptr[u+1]]`
    are the sorted out-neighbors of u. `reverse_of` names the relation holding
    the transposed edge set, when one exists; `synthesized` marks reverse
    twins created by the loader rather than declared in the manifest.
    """

    name: str
    src_type: str
    dst_type: str
    indptr: np.ndarray
    indices: np.ndarray
    reverse_of: str | None = None
    synthesized: bool = False

    @property
    def n_edges(self) -> int:
        return int(self.indices.size)

    @property
    def n_src(self) -> int:
        return int(self.indptr.size) - 1

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        row = self.neighbors(u)
        i = np.searchsorted(row, v)
        return bool(i < row.size and row[i] == v)

    def edge_array(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the edge set as parallel (src, dst) arrays in row order."""
        src = np.repeat(np.arange(self.n_src, dtype=np.int64), np.diff(self.indptr))
        return src, self.indices.copy()


def build_relation(
    name: str,
    src_type: str,
    dst_type: str,
    n_src: int,
    n_dst: int,
    pairs: np.ndarray,
    reverse_of: str | None = None,
    synthesized: bool = False,
) -> tuple[Relation, int]:
    """Build a Relation from a (k, 2) pair array; returns (relation, n_duplicates).

    Pairs are bounds-checked, sorted, and deduplicated.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        if pairs.min() < 0:
            raise GraphDataError(f"relation {name!r}: negative node id")
        if pairs[:, 0].max() >= n_src or pairs[:, 1].max() >= n_dst:
            raise GraphDataError(f"relation {name!r}: id out of range")
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    if pairs.shape[0] > 1:
        keep = np.ones(pairs.shape[0], dtype=bool)
        keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
        dups = int((~keep).sum())
        pairs = pairs[keep]
    else:
        dups = 0
    indptr = np.zeros(n_src + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    rel = Relation(
        name=name,
        src_type=src_type,
        dst_type=dst_type,
        indptr=indptr,
        indices=pairs[:, 1].copy(),
        reverse_of=reverse_of,
        synthesized=synthesized,
    )
    return rel, dups


@dataclass(eq=False)
class LabelTable:
    """Class assignments on one target node type.

    `assignments` maps node id to a class index, or to a sorted tuple of class
    indices when `multilabel` is set.
    """

    target_type: str
    num_classes: int
    assignments: dict
    multilabel: bool = False

    def labeled_ids(self) -> np.ndarray:
        return np.array(sorted(self.assignments), dtype=np.int64)

    def classes_of(self, u: int) -> tuple[int, ...]:
        y = self.assignments[u]
        return tuple(y) if self.multilabel else (y,)

    def class_array(self, ids: np.ndarray) -> np.ndarray:
        """Single-label class indices for the given ids (single-label tables only)."""
        if self.multilabel:
            raise ValueError("class_array is undefined for multilabel tables")
        return np.array([self.assignments[int(u)] for u in ids], dtype=np.int64)

    def onehot(self, ids: np.ndarray) -> np.ndarray:
        """(len(ids), C) multi-hot matrix; unlabeled ids give zero rows."""
        out = np.zeros((len(ids), self.num_classes), dtype=np.float64)
        for i, u in enumerate(ids):
            for c in self.classes_of(int(u)) if int(u) in self.assignments else ():
                out[i, c] = 1.0
        return out


@dataclass(eq=False)
class SplitTable:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def of(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


@dataclass(eq=False)
class LoadStats:
    duplicates: dict = field(default_factory=dict)
    directed_edges: int = 0
    undirected_edges: int = 0


@dataclass(eq=False)
class HetGraph:
    """Immutable typed graph: node tables, relations, optional labels/splits."""

    node_types: dict
    relations: dict
    labels: LabelTable | None = None
    splits: SplitTable | None = None
    stats: LoadStats | None = None

    def __post_init__(self):
        for rel in self.relations.values():
            for t in (rel.src_type, rel.dst_type):
                if t not in self.node_types:
                    raise GraphDataError(
                        f"relation {rel.name!r} references undeclared node type {t!r}"
                    )
        if len(self.node_types) + len(self.relations) <= 2:
            log.warning(
                "homogeneity check: |A|+|R| must exceed 2 for a heterogeneous "
                "graph (got %d node types, %d relations); proceeding anyway",
                len(self.node_types),
                len(self.relations),
            )

    def node_type(self, name: str) -> NodeTypeTable:
        try:
            return self.node_types[name]
        except KeyError:
            raise GraphDataError(f"unknown node type {name!r}") from None

    def relation(self, name: str) -> Relation:
        try:
            return self.relations[name]
        except KeyError:
            raise GraphDataError(f"unknown relation {name!r}") from None

    def count(self, type_name: str) -> int:
        return self.node_type(type_name).count

    @property
    def target_type(self) -> str:
        if self.labels is None:
            raise GraphDataError("graph has no label table")
        return self.labels.target_type

    def with_relations(self, relations: dict) -> "HetGraph":
        """A view of this graph with a replaced relation dict (tables shared)."""
        return HetGraph(
            node_types=self.node_types,
            relations=relations,
            labels=self.labels,
            splits=self.splits,
            stats=None,
        )


def neighbors(g: HetGraph, rel: str, u: int) -> np.ndarray:
    """Sorted out-neighbors of node `u` under relation `rel`."""
    r = g.relation(rel)
    if not 0 <= u < r.n_src:
        raise GraphDataError(f"node id {u} out of range for type {r.src_type!r}")
    return r.neighbors(u)


# ---------------------------------------------------------------------------
# Manifest I/O
#
# Manifest: one JSON document referencing TSV payload files (paths relative
# to the manifest):
#   node_types: [{name, count, dim?, features?: path}]
#   relations:  [{name, src, dst, edges: path, add_reverse?: bool}]
#   labels:     {node_type, classes, file, multilabel?: bool}   (optional)
#   splits:     {file}                                          (optional)
# ---------------------------------------------------------------------------


def _read_lines(path: Path):
    if not path.is_file():
        raise GraphDataError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line:
                yield lineno, line


def _parse_int(tok: str, path: Path, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise GraphDataError(f"{path}:{lineno}: malformed integer {tok!r}") from None


def _load_edges(path: Path) -> np.ndarray:
    pairs = []
    for lineno, line in _read_lines(path):
        toks = line.split("\t")
        if len(toks) != 2:
            raise GraphDataError(f"{path}:{lineno}: malformed row (want 2 columns)")
        pairs.append((_parse_int(toks[0], path, lineno), _parse_int(toks[1], path, lineno)))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _load_features(path: Path, count: int, dim: int) -> np.ndarray:
    out = np.full((count, dim), np.nan, dtype=np.float64)
    seen = np.zeros(count, dtype=bool)
    for lineno, line in _read_lines(path):
        toks = line.split("\t")
        if len(toks) != dim + 1:
            raise GraphDataError(
                f"{path}:{lineno}: malformed row (want {dim + 1} columns, got {len(toks)})"
            )
        u = _parse_int(toks[0], path, lineno)
        if not 0 <= u < count:
            raise GraphDataError(f"{path}:{lineno}: id out of range")
        try:
            out[u] = [float(t) for t in toks[1:]]
        except ValueError:
            raise GraphDataError(f"{path}:{lineno}: malformed float") from None
        seen[u] = True
    if not seen.all():
        raise GraphDataError(f"{path}: missing feature rows for {int((~seen).sum())} nodes")
    return out


def _load_labels(path: Path, count: int, num_classes: int, multilabel: bool) -> dict:
    assignments = {}
    for lineno, line in _read_lines(path):
        toks = line.split("\t")
        if len(toks) != 2:
            raise GraphDataError(f"{path}:{lineno}: malformed row (want 2 columns)")
        u = _parse_int(toks[0], path, lineno)
        if not 0 <= u < count:
            raise GraphDataError(f"{path}:{lineno}: id out of range")
        if multilabel:
            cs = tuple(sorted(_parse_int(c, path, lineno) for c in toks[1].split(",")))
        else:
            cs = (_parse_int(toks[1], path, lineno),)
        for c in cs:
            if not 0 <= c < num_classes:
                raise GraphDataError(f"{path}:{lineno}: class {c} out of range")
        assignments[u] = cs if multilabel else cs[0]
    return assignments


def _load_splits(path: Path, labeled: set) -> SplitTable:
    buckets = {"train": [], "val": [], "test": []}
    seen = set()
    for lineno, line in _read_lines(path):
        toks = line.split("\t")
        if len(toks) != 2 or toks[1] not in buckets:
            raise GraphDataError(f"{path}:{lineno}: malformed row (want 'id<TAB>train|val|test')")
        u = _parse_int(toks[0], path, lineno)
        if u in seen:
            raise GraphDataError(f"{path}:{lineno}: node {u} assigned to multiple splits")
        if u not in labeled:
            raise GraphDataError(f"{path}:{lineno}: split member {u} unlabeled")
        seen.add(u)
        buckets[toks[1]].append(u)
    return SplitTable(
        train=np.array(sorted(buckets["train"]), dtype=np.int64),
        val=np.array(sorted(buckets["val"]), dtype=np.int64),
        test=np.array(sorted(buckets["test"]), dtype=np.int64),
    )


def load_graph(manifest_path) -> HetGraph:
    """Load and validate a HetGraph from a manifest JSON file.

    Relations declaring add_reverse get a synthesized twin named
    "rev_<name>" with transposed adjacency. Duplicate edges are dropped
    (counted in stats). Node types without a features file are legal; the
    model substitutes learnable per-node embeddings for them.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise GraphDataError(f"missing file: {manifest_path}")
    try:
        spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise GraphDataError(f"{manifest_path}: invalid JSON ({e})") from None
    base = manifest_path.parent

    node_types: dict[str, NodeTypeTable] = {}
    for nt in spec.get("node_types", []):
        name = nt["name"]
        if name in node_types:
            raise GraphDataError(f"duplicate node-type name {name!r}")
        count = int(nt["count"])
        dim = int(nt.get("dim", 0))
        features = None
        if "features" in nt:
            features = _load_features(base / nt["features"], count, dim)
        node_types[name] = NodeTypeTable(name=name, count=count, dim=dim, features=features)

    stats = LoadStats()
    relations: dict[str, Relation] = {}
    for rl in spec.get("relations", []):
        name = rl["name"]
        if name in relations:
            raise GraphDataError(f"duplicate relation name {name!r}")
        src, dst = rl["src"], rl["dst"]
        for t in (src, dst):
            if t not in node_types:
                raise GraphDataError(f"relation {name!r} references undeclared node type {t!r}")
        pairs = _load_edges(base / rl["edges"])
        rel, dups = build_relation(
            name, src, dst, node_types[src].count, node_types[dst].count, pairs
        )
        if dups:
            stats.duplicates[name] = dups
            log.info("relation %r: dropped %d duplicate edges", name, dups)
        relations[name] = rel
        if rl.get("add_reverse", False):
            rev_name = f"rev_{name}"
            if rev_name in relations:
                raise GraphDataError(f"duplicate relation name {rev_name!r}")
            rev, _ = build_relation(
                rev_name,
                dst,
                src,
                node_types[dst].count,
                node_types[src].count,
                pairs[:, ::-1],
                reverse_of=name,
                synthesized=True,
            )
            rel.reverse_of = rev_name
            relations[rev_name] = rev

    stats.directed_edges = sum(r.n_edges for r in relations.values())
    stats.undirected_edges = stats.directed_edges - sum(
        r.n_edges for r in relations.values() if r.synthesized
    )
    log.info(
        "loaded graph: %d directed edges (%d counting reverse twins once)",
        stats.directed_edges,
        stats.undirected_edges,
    )

    labels = None
    if "labels" in spec:
        ls = spec["labels"]
        tgt = ls["node_type"]
        if tgt not in node_types:
            raise GraphDataError(f"label target type {tgt!r} undeclared")
        multilabel = bool(ls.get("multilabel", False))
        assignments = _load_labels(
            base / ls["file"], node_types[tgt].count, int(ls["classes"]), multilabel
        )
        labels = LabelTable(
            target_type=tgt,
            num_classes=int(ls["classes"]),
            assignments=assignments,
            multilabel=multilabel,
        )

    splits = None
    if "splits" in spec:
        if labels is None:
            raise GraphDataError("splits require a label table")
        splits = _load_splits(base / spec["splits"]["file"], set(labels.assignments))

    return HetGraph(
        node_types=node_types, relations=relations, labels=labels, splits=splits, stats=stats
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_graph(g: HetGraph, out_dir) -> Path:
    """Serialize a graph back to manifest + TSV files; returns the manifest path.

    Synthesized reverse relations are written as add_reverse flags on their
    base relation, so load(save(g)) reproduces g exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec: dict = {"node_types": [], "relations": []}
    for nt in g.node_types.values():
        entry: dict = {"name": nt.name, "count": nt.count, "dim": nt.dim}
        if nt.features is not None:
            fname = f"features_{nt.name}.tsv"
            with open(out_dir / fname, "w", encoding="utf-8") as fh:
                for u in range(nt.count):
                    fh.write("\t".join([str(u)] + [_fmt(v) for v in nt.features[u]]) + "\n")
            entry["features"] = fname
        spec["node_types"].append(entry)
    for rel in g.relations.values():
        if rel.synthesized:
            continue
        fname = f"edges_{rel.name}.tsv"
        src, dst = rel.edge_array()
        with open(out_dir / fname, "w", encoding="utf-8") as fh:
            for u, v in zip(src, dst):
                fh.write(f"{u}\t{v}\n")
        entry = {"name": rel.name, "src": rel.src_type, "dst": rel.dst_type, "edges": fname}
        if rel.reverse_of is not None and rel.reverse_of in g.relations:
            if g.relations[rel.reverse_of].synthesized:
                entry["add_reverse"] = True
        spec["relations"].append(entry)
    if g.labels is not None:
        with open(out_dir / "labels.tsv", "w", encoding="utf-8") as fh:
            for u in sorted(g.labels.assignments):
                y = g.labels.assignments[u]
                text = ",".join(str(c) for c in y) if g.labels.multilabel else str(y)
                fh.write(f"{u}\t{text}\n")
        spec["labels"] = {
            "node_type": g.labels.target_type,
            "classes": g.labels.num_classes,
            "file": "labels.tsv",
            "multilabel": g.labels.multilabel,
        }
    if g.splits is not None:
        with open(out_dir / "splits.tsv", "w", encoding="utf-8") as fh:
            for split in ("train", "val", "test"):
                for u in g.splits.of(split):
                    fh.write(f"{u}\t{split}\n")
        spec["splits"] = {"file": "splits.tsv"}
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(spec, indent=2), encoding="utf-8")
    return manifest


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(g: HetGraph) -> ValidationReport:
    """Check structural invariants; returns a report (empty on loader output)."""
    v: list[str] = []
    for rel in g.relations.values():
        n_src = g.count(rel.src_type)
        n_dst = g.count(rel.dst_type)
        if rel.indptr.size != n_src + 1:
            v.append(f"{rel.name}: indptr length mismatch")
            continue
        if rel.indices.size and (rel.indices.min() < 0 or rel.indices.max() >= n_dst):
            v.append(f"{rel.name}: column id out of range")
        for u in range(n_src):
            row = rel.neighbors(u)
            if row.size > 1:
                if np.any(np.diff(row) < 0):
                    v.append(f"{rel.name}: row {u} not sorted")
                elif np.any(np.diff(row) == 0):
                    v.append(f"{rel.name}: row {u} has duplicates")
        if rel.reverse_of is not None:
            if rel.reverse_of not in g.relations:
                v.append(f"{rel.name}: reverse relation {rel.reverse_of!r} missing")
            else:
                rev = g.relations[rel.reverse_of]
                fwd = set(map(tuple, np.stack(rel.edge_array(), axis=1)))
                bwd = set(map(tuple, np.stack(rev.edge_array(), axis=1)[:, ::-1]))
                if fwd != bwd:
                    v.append(f"{rel.name}: reverse inconsistency with {rel.reverse_of!r}")
    if g.labels is not None:
        table = g.node_type(g.labels.target_type)
        for u, y in g.labels.assignments.items():
            if not 0 <= u < table.count:
                v.append(f"labels: node id {u} out of range")
            for c in (y if g.labels.multilabel else (y,)):
                if not 0 <= c < g.labels.num_classes:
                    v.append(f"labels: class {c} out of range for node {u}")
    if g.splits is not None:
        sets = [set(g.splits.of(s).tolist()) for s in ("train", "val", "test")]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            v.append("splits: sets not disjoint")
        if g.labels is not None:
            unlabeled = (sets[0] | sets[1] | sets[2]) - set(g.labels.assignments)
            if unlabeled:
                v.append(f"splits: {len(unlabeled)} members unlabeled")
    return ValidationReport(violations=v)
