import numpy as np
import pytest

from hetkit.hetgraph import (
    HetGraph,
    LabelTable,
    NodeTypeTable,
    SplitTable,
    build_relation,
)


def make_graph(counts, relations, labels=None, splits=None, features=None):
    """In-memory graph builder mirroring loader semantics (incl. reverse twins).

    counts: {type: n}; relations: (name, src, dst, pairs[, add_reverse]);
    labels: (target, num_classes, assignments, multilabel);
    splits: {"train": ids, "val": ids, "test": ids}; features: {type: array}.
    """
    features = features or {}
    node_types = {}
    for name, count in counts.items():
        feats = features.get(name)
        if feats is not None:
            feats = np.asarray(feats, dtype=np.float64)
        dim = feats.shape[1] if feats is not None else 0
        node_types[name] = NodeTypeTable(name=name, count=count, dim=dim, features=feats)
    rels = {}
    for spec in relations:
        name, src, dst, pairs = spec[:4]
        add_reverse = spec[4] if len(spec) > 4 else False
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rel, _ = build_relation(name, src, dst, counts[src], counts[dst], pairs)
        rels[name] = rel
        if add_reverse:
            rev, _ = build_relation(
                f"rev_{name}", dst, src, counts[dst], counts[src], pairs[:, ::-1],
                reverse_of=name, synthesized=True,
            )
            rel.reverse_of = rev.name
            rels[rev.name] = rev
    lt = None
    if labels is not None:
        target, num_classes, assignments, multilabel = labels
        lt = LabelTable(
            target_type=target,
            num_classes=num_classes,
            assignments=assignments,
            multilabel=multilabel,
        )
    st = None
    if splits is not None:
        st = SplitTable(
            train=np.array(sorted(splits.get("train", ())), dtype=np.int64),
            val=np.array(sorted(splits.get("val", ())), dtype=np.int64),
            test=np.array(sorted(splits.get("test", ())), dtype=np.int64),
        )
    return HetGraph(node_types=node_types, relations=rels, labels=lt, splits=st)


def random_hetgraph(rng, n_types=2, max_nodes=12, edge_prob=0.25, add_reverse=True):
    """Small random typed graph for property tests."""
    counts = {f"t{i}": int(rng.integers(2, max_nodes + 1)) for i in range(n_types)}
    relations = []
    names = list(counts)
    k = 0
    for i, src in enumerate(names):
        dst = names[(i + 1) % len(names)]
        pairs = [
            (u, v)
            for u in range(counts[src])
            for v in range(counts[dst])
            if rng.random() < edge_prob
        ]
        relations.append((f"r{k}", src, dst, pairs, add_reverse))
        k += 1
    return make_graph(counts, relations)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
