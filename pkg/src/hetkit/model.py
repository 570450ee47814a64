"""Two-channel relational network with masked-path reconstruction and
masked label injection.

Per relation view, a layer updates source nodes from self and mean-aggregated
neighbor representations; views sharing a source type are fused (mean, sum,
or concat). Two architecturally identical channels with separate parameters
produce the homophilic and heterophilic representations; their sum feeds the
classifier head. Channel semantics come only from the losses: an absolute
Pearson decorrelation between the channels, and a binary reconstruction loss
that scores masked adjacent pairs with the homophilic channel and sampled
non-adjacent pairs with the heterophilic one through a shared bias-free
two-layer decoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .hetgraph import GraphDataError, HetGraph, LabelTable
from .numcore import ParamStore, Tensor

log = logging.getLogger(__name__)

CHANNELS = ("homo", "hetero")
FUSE_MODES = ("mean", "sum", "concat")


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    layers: int = 2
    fuse: str = "mean"
    alpha: float = 0.0
    beta: float = 0.0
    label_mask_p: float = 0.0
    edge_mask_ratio: float = 0.5
    negatives_per_positive: int = 1
    contrastive_completion: bool = False
    multilabel: bool = False
    walk_len: int = 2
    mask_once: bool = False
    mask_loss_only: bool = False
    use_label_injection: bool = True
    separate_decoders: bool = False
    corr_reduction: str = "mean"  # reduction of the per-node correlations in the objective
    metapaths: list | None = None  # text forms; default: enumerate length-2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.label_mask_p <= 1.0:
            raise ValueError("label_mask_p must lie in [0, 1]")
        if not 0.0 <= self.edge_mask_ratio <= 1.0:
            raise ValueError("edge_mask_ratio must lie in [0, 1]")
        if self.fuse not in FUSE_MODES:
            raise ValueError(f"fuse must be one of {FUSE_MODES}")
        if self.corr_reduction not in ("mean", "sum"):
            raise ValueError("corr_reduction must be 'mean' or 'sum'")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _views_by_type(g: HetGraph) -> dict:
    """Relations grouped by source type, in declaration order."""
    views: dict[str, list] = {t: [] for t in g.node_types}
    for rel in g.relations.values():
        views[rel.src_type].append(rel.name)
    return views


def type_dims(g: HetGraph, cfg: ModelConfig) -> list:
    """Per-layer representation width of each node type.

    Index 0 is the width after input projection (always hidden_dim); types
    no view updates keep their previous width (identity fallback).
    """
    d = cfg.hidden_dim
    views = _views_by_type(g)
    dims = [{t: d for t in g.node_types}]
    for _ in range(cfg.layers):
        prev = dims[-1]
        cur = {}
        for t in g.node_types:
            k = len(views[t])
            if k == 0:
                cur[t] = prev[t]
            elif cfg.fuse == "concat":
                cur[t] = d * k
            else:
                cur[t] = d
        dims.append(cur)
    return dims


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(g: HetGraph, cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Initialize all learnable parameters for a labeled graph.

    Featureless node types receive learnable per-node embeddings instead of
    an input projection. Both channels are drawn independently.
    """
    if g.labels is None:
        raise GraphDataError("model requires a labeled graph")
    store = ParamStore()
    d = cfg.hidden_dim
    for t, table in g.node_types.items():
        if table.features is not None and table.dim > 0:
            store.add(f"in_proj.{t}", _xavier(rng, table.dim, d))
        else:
            store.add(f"embed.{t}", rng.normal(0.0, 0.01, size=(table.count, d)))
    target = g.labels.target_type
    target_table = g.node_type(target)
    d_in_target = target_table.dim if target_table.features is not None else d
    store.add("label_embed", _xavier(rng, g.labels.num_classes, d_in_target))
    dims = type_dims(g, cfg)
    for layer in range(1, cfg.layers + 1):
        prev = dims[layer - 1]
        for rel in g.relations.values():
            for c in CHANNELS:
                store.add(f"l{layer}.{rel.name}.{c}.self", _xavier(rng, prev[rel.src_type], d))
                store.add(f"l{layer}.{rel.name}.{c}.nbr", _xavier(rng, prev[rel.dst_type], d))
    dec_in = dims[-1][target]
    store.add("dec.w0", _xavier(rng, dec_in, d))
    store.add("dec.w1", _xavier(rng, d, 1))
    if cfg.separate_decoders:
        store.add("dec2.w0", _xavier(rng, dec_in, d))
        store.add("dec2.w1", _xavier(rng, d, 1))
    store.add("head", _xavier(rng, dims[-1][target], g.labels.num_classes))
    return store


# ---------------------------------------------------------------------------
# Masked label injection
# ---------------------------------------------------------------------------


def draw_label_mask(
    n_train: int, p: float, rng: np.random.Generator | None
) -> np.ndarray:
    """Per-train-node keep flags: keep ~ Bernoulli(1-p).

    `p` is a masking ratio, so p=0 keeps every training label (the inference
    setting) and p=1 hides them all. The opposite convention (keep with
    probability p) would make p=0 at inference hide everything and is
    rejected.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("masking ratio p must lie in [0, 1]")
    if p == 0.0:
        return np.ones(n_train, dtype=bool)
    if rng is None:
        raise ValueError("rng required when p > 0")
    return rng.random(n_train) < (1.0 - p)


def inject_labels(
    x: Tensor | np.ndarray,
    labels: LabelTable,
    train_ids: np.ndarray,
    p: float,
    rng: np.random.Generator | None,
    w_y: Tensor,
    keep: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Add embedded labels of kept training nodes to their input rows.

    Only training-split labels are ever read. Returns the augmented feature
    tensor and the keep mask m (m_u = 1 iff node u's label was injected).
    """
    if not isinstance(x, Tensor):
        x = nc.constant(x)
    n = x.shape[0]
    train_ids = np.asarray(train_ids, dtype=np.int64)
    if keep is None:
        keep = draw_label_mask(len(train_ids), p, rng)
    kept_ids = train_ids[keep]
    m = np.zeros(n, dtype=np.int8)
    m[kept_ids] = 1
    onehot = np.zeros((n, labels.num_classes), dtype=np.float64)
    for u in kept_ids:
        for c in labels.classes_of(int(u)):
            onehot[u, c] = 1.0
    x_hat = nc.add(x, nc.matmul(nc.constant(onehot), w_y))
    return x_hat, m


def build_inputs(
    g: HetGraph,
    params: ParamStore,
    cfg: ModelConfig,
    p: float,
    rng: np.random.Generator | None,
    keep: np.ndarray | None = None,
) -> tuple[dict, np.ndarray | None]:
    """Per-type input tensors, with labels injected on the target type.

    `p` is the label masking ratio for this pass (0 at inference). Returns
    (inputs, keep-mask m over target nodes, or None when injection is off).
    """
    x_hat: dict[str, Tensor] = {}
    m = None
    for t, table in g.node_types.items():
        if table.features is not None and table.dim > 0:
            base: Tensor = nc.constant(table.features)
        else:
            base = params[f"embed.{t}"]
        if (
            cfg.use_label_injection
            and g.labels is not None
            and t == g.labels.target_type
            and g.splits is not None
        ):
            x_hat[t], m = inject_labels(
                base, g.labels, g.splits.train, p, rng, params["label_embed"], keep=keep
            )
        else:
            x_hat[t] = base
    return x_hat, m


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ForwardOutput:
    h_homo: dict
    h_hetero: dict
    logits: Tensor
    target_type: str

    def probabilities(self, multilabel: bool = False) -> np.ndarray:
        z = self.logits.data
        if multilabel:
            return 1.0 / (1.0 + np.exp(-z))
        zmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - zmax)
        return e / e.sum(axis=1, keepdims=True)


def _fuse(tensors: list, mode: str) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    if mode == "concat":
        return nc.concat_cols(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = nc.add(out, t)
    if mode == "mean":
        out = nc.mul(out, 1.0 / len(tensors))
    return out


def forward(
    g_vis: HetGraph, x_hat: dict, params: ParamStore, cfg: ModelConfig
) -> ForwardOutput:
    """Run both channels over the visible graph and classify the target type.

    Only g_vis adjacency is ever traversed; masked edges are invisible here.
    """
    if g_vis.labels is None:
        raise GraphDataError("forward requires a labeled graph")
    target = g_vis.labels.target_type
    views = _views_by_type(g_vis)

    h0: dict[str, Tensor] = {}
    for t, table in g_vis.node_types.items():
        if table.features is not None and table.dim > 0:
            h0[t] = nc.matmul(x_hat[t], params[f"in_proj.{t}"])
        else:
            h0[t] = x_hat[t]

    channel_reps: dict[str, dict] = {}
    for c in CHANNELS:
        h = dict(h0)
        for layer in range(1, cfg.layers + 1):
            last = layer == cfg.layers
            new: dict[str, Tensor] = {}
            for t in g_vis.node_types:
                per_view = []
                for rel_name in views[t]:
                    rel = g_vis.relations[rel_name]
                    agg = nc.mean_aggregate(h[rel.dst_type], rel.indptr, rel.indices)
                    z = nc.add(
                        nc.matmul(h[t], params[f"l{layer}.{rel_name}.{c}.self"]),
                        nc.matmul(agg, params[f"l{layer}.{rel_name}.{c}.nbr"]),
                    )
                    per_view.append(z if last else nc.relu(z))
                if per_view:
                    new[t] = _fuse(per_view, cfg.fuse)
                else:
                    new[t] = h[t]  # identity fallback: no view updates this type
            h = new
        channel_reps[c] = h

    h_target = nc.add(channel_reps["homo"][target], channel_reps["hetero"][target])
    logits = nc.matmul(h_target, params["head"])
    return ForwardOutput(
        h_homo=channel_reps["homo"],
        h_hetero=channel_reps["hetero"],
        logits=logits,
        target_type=target,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CorrelationLoss:
    total: Tensor
    mean: Tensor
    n_nodes: int


def correlation_loss(h_homo: Tensor, h_hetero: Tensor) -> CorrelationLoss:
    """Sum (and per-node mean) of |Pearson correlation| between the channels,
    taken across the feature coordinates of each node."""
    if h_homo.shape != h_hetero.shape:
        raise ValueError("channel representations must have matching shapes")
    if h_homo.shape[1] < 2:
        raise ValueError("correlation needs at least 2 feature coordinates")
    per_node = nc.pearson_abs_rows(h_homo, h_hetero)
    return CorrelationLoss(
        total=nc.total_sum(per_node),
        mean=nc.total_mean(per_node),
        n_nodes=h_homo.shape[0],
    )


def _pair_logits(pairs, reps: dict, g: HetGraph, w0: Tensor, w1: Tensor) -> Tensor:
    by_rel: dict[str, list] = {}
    for rel_name, u, v in pairs:
        by_rel.setdefault(rel_name, []).append((u, v))
    prods = []
    for rel_name in sorted(by_rel):
        rel = g.relation(rel_name)
        uv = np.array(by_rel[rel_name], dtype=np.int64)
        if uv[:, 0].max() >= g.count(rel.src_type) or uv[:, 1].max() >= g.count(rel.dst_type):
            raise GraphDataError(f"pair endpoint out of range for relation {rel_name!r}")
        hu = nc.take_rows(reps[rel.src_type], uv[:, 0])
        hv = nc.take_rows(reps[rel.dst_type], uv[:, 1])
        if hu.shape[1] != w0.shape[0] or hv.shape[1] != w0.shape[0]:
            raise GraphDataError(
                f"decoder input width {w0.shape[0]} does not match representations of "
                f"types {rel.src_type!r}/{rel.dst_type!r}; with fuse='concat' all types "
                "appearing in reconstruction pairs must share a view count"
            )
        prods.append(nc.mul(hu, hv))
    prod = prods[0] if len(prods) == 1 else nc.concat_rows(prods)
    return nc.matmul(nc.relu(nc.matmul(prod, w0)), w1)


def reconstruction_loss(
    rho_plus,
    rho_minus,
    h_homo: dict,
    h_hetero: dict,
    params: ParamStore,
    g: HetGraph,
    contrastive_completion: bool = False,
    separate_decoders: bool = False,
) -> Tensor:
    """Binary reconstruction loss over masked adjacent and sampled
    non-adjacent pairs.

    L+ scores rho_plus with the homophilic channel, L- scores rho_minus with
    the heterophilic channel, both through log-sigmoid of the decoder; the
    loss is -(L+ + L-). With contrastive_completion, cross terms push the
    opposite channel's sigmoid toward zero on the other pair set, guarding
    against a constant-decoder collapse.
    """
    w0, w1 = params["dec.w0"], params["dec.w1"]
    if separate_decoders:
        w0n, w1n = params["dec2.w0"], params["dec2.w1"]
    else:
        w0n, w1n = w0, w1
    terms: list[Tensor] = []
    if rho_plus:
        z_plus = _pair_logits(rho_plus, h_homo, g, w0, w1)
        terms.append(nc.total_mean(nc.log_sigmoid(z_plus)))
        if contrastive_completion:
            z_plus_het = _pair_logits(rho_plus, h_hetero, g, w0n, w1n)
            terms.append(nc.total_mean(nc.log_sigmoid(nc.neg(z_plus_het))))
    else:
        log.warning("reconstruction_loss: empty rho_plus contributes 0")
    if rho_minus:
        z_minus = _pair_logits(rho_minus, h_hetero, g, w0n, w1n)
        terms.append(nc.total_mean(nc.log_sigmoid(z_minus)))
        if contrastive_completion:
            z_minus_hom = _pair_logits(rho_minus, h_homo, g, w0, w1)
            terms.append(nc.total_mean(nc.log_sigmoid(nc.neg(z_minus_hom))))
    else:
        log.warning("reconstruction_loss: empty rho_minus contributes 0")
    if not terms:
        return nc.constant(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = nc.add(acc, t)
    return nc.neg(acc)


def total_loss(l_cls: Tensor, l_corr: Tensor, l_rec: Tensor, alpha: float, beta: float) -> Tensor:
    """Combined objective: classification + alpha*correlation + beta*reconstruction."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    for name, t in (("l_cls", l_cls), ("l_corr", l_corr), ("l_rec", l_rec)):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"{name} is non-finite")
    return nc.add(l_cls, nc.add(nc.mul(l_corr, alpha), nc.mul(l_rec, beta)))


def classification_loss(
    out: ForwardOutput,
    labels: LabelTable,
    row_ids: np.ndarray,
    multilabel: bool,
) -> Tensor:
    """Cross-entropy (or multilabel BCE) over the given target rows."""
    rows = nc.take_rows(out.logits, row_ids)
    if multilabel:
        return nc.sigmoid_bce(rows, labels.onehot(row_ids))
    return nc.softmax_cross_entropy(rows, labels.class_array(row_ids))
