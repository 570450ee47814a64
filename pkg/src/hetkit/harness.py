"""Training loop, evaluation metrics, bucketed reporting, and the synthetic
planted-homophily generator.

A run is fully determined by its seed: parameter init, per-epoch edge
masking, negative sampling, and label masking all draw from one generator in
a fixed order, so identical invocations produce byte-identical artifacts.
Run directory layout: config.json, params.bin, curves.csv, metrics.json
(plus buckets.csv / assignments.csv from bucket reports).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numcore as nc
from .hetgraph import (
    GraphDataError,
    HetGraph,
    LabelTable,
    load_graph,
    save_graph,
    NodeTypeTable,
    SplitTable,
    build_relation,
)
from .homophily import (
    Bucket,
    BucketScheme,
    LocalMetricVector,
    bucket_nodes,
    node_dirichlet_energy,
    node_label_homophily,
    write_bucket_assignments,
)
from .metapath import MaskPlan, enumerate_length2, induce_subgraph, parse_metapath, sample_mask, sample_negatives
from .model import (
    ModelConfig,
    build_inputs,
    classification_loss,
    correlation_loss,
    forward,
    init_params,
    reconstruction_loss,
    total_loss,
)
from .numcore import NonFiniteGradientError, ParamStore, adam_step

log = logging.getLogger(__name__)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate(
    logits: np.ndarray,
    labels: LabelTable,
    ids: np.ndarray,
    multilabel: bool = False,
    with_ap: bool | None = None,
) -> dict:
    """Macro-F1 / Micro-F1 (and AP for binary targets) on the given node ids.

    Micro-F1 pools TP/FP/FN globally (equals accuracy in single-label
    multiclass); Macro-F1 is the unweighted mean of per-class F1 with absent
    classes contributing 0. AP ranks binary scores descending, node id
    breaking ties.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("evaluate requires a nonempty split")
    c = labels.num_classes
    z = logits[ids]
    binary = c == 2 and not multilabel
    if with_ap is None:
        with_ap = binary
    if with_ap and not binary:
        raise ValueError("AP is only defined for binary single-label targets")

    tp = np.zeros(c, dtype=np.int64)
    fp = np.zeros(c, dtype=np.int64)
    fn = np.zeros(c, dtype=np.int64)
    if multilabel:
        pred = z > 0.0  # sigmoid(z) > 0.5
        truth = labels.onehot(ids) > 0.5
        tp = (pred & truth).sum(axis=0)
        fp = (pred & ~truth).sum(axis=0)
        fn = (~pred & truth).sum(axis=0)
    else:
        pred = z.argmax(axis=1)
        truth = labels.class_array(ids)
        for k in range(c):
            tp[k] = int(((pred == k) & (truth == k)).sum())
            fp[k] = int(((pred == k) & (truth != k)).sum())
            fn[k] = int(((pred != k) & (truth == k)).sum())
    micro = _f1(int(tp.sum()), int(fp.sum()), int(fn.sum()))
    macro = float(np.mean([_f1(int(tp[k]), int(fp[k]), int(fn[k])) for k in range(c)]))
    out = {"micro_f1": micro, "macro_f1": macro}
    if with_ap:
        scores = z[:, 1] - z[:, 0]  # monotone in P(class 1)
        out["ap"] = average_precision(scores, truth == 1, ids)
    return out


def average_precision(scores: np.ndarray, positive: np.ndarray, ids: np.ndarray) -> float:
    """Precision-weighted sum over recall increments of the ranked positives."""
    n_pos = int(positive.sum())
    if n_pos == 0:
        return 0.0
    order = np.lexsort((ids, -scores))  # descending score, node id breaks ties
    hits = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        if positive[i]:
            hits += 1
            ap += hits / rank
    return ap / n_pos


# ---------------------------------------------------------------------------
# Synthetic planted-homophily graphs
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Generator spec: intermediates anchor a class and wire to targets.

    Each intermediate node picks an anchor class uniformly, then draws
    `edges_per_intermediate` target endpoints: from the anchor class with
    probability q, else uniformly from the other classes. Features are
    s * (class centroid) + (1 - s) * standard Gaussian noise. `q2`, when
    set, splits targets and intermediates into two equal populations with
    agreement probabilities q and q2.
    """

    classes: int = 2
    target_count: int = 1000
    intermediate_sizes: list = field(default_factory=lambda: [2000])
    q: float = 0.9
    q2: float | None = None
    signal: float = 0.2
    feature_dim: int = 16
    edges_per_intermediate: int = 4
    seed: int = 0
    train_frac: float = 0.3
    val_frac: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise ValueError("q must lie in [0, 1]")
        if self.q2 is not None and not 0.0 <= self.q2 <= 1.0:
            raise ValueError("q2 must lie in [0, 1]")
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal strength must lie in [0, 1]")
        if self.classes < 2 or self.target_count < self.classes:
            raise ValueError("need at least 2 classes and as many targets")
        if self.edges_per_intermediate < 1:
            raise ValueError("edges_per_intermediate must be positive")
        if min(self.intermediate_sizes, default=0) < 1:
            raise ValueError("intermediate type sizes must be positive")
        if self.train_frac + self.val_frac >= 1.0:
            raise ValueError("train_frac + val_frac must leave room for a test split")

    def expected_pair_agreement(self, q: float | None = None) -> float:
        """Analytic probability that two draws of one intermediate agree."""
        q = self.q if q is None else q
        return q * q + (1.0 - q) ** 2 / (self.classes - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def _draw_endpoint(rng, anchor, q, pool_by_class, classes):
    if rng.random() < q:
        cls = anchor
    else:
        cls = int(rng.integers(classes - 1))
        if cls >= anchor:
            cls += 1
    pool = pool_by_class[cls]
    return int(pool[rng.integers(len(pool))])


def synth_graph(spec: SynthSpec, out_dir) -> Path:
    """Generate a planted-homophily dataset on disk; returns the manifest path.

    Also writes synth_info.json with the spec echo and the analytic expected
    metapath edge homophily of the generative process.
    """
    rng = np.random.default_rng(spec.seed)
    c = spec.classes
    n_t = spec.target_count
    y = rng.integers(c, size=n_t)
    # population split for mixed-homophily graphs: first half q, second half q2
    if spec.q2 is not None:
        half = n_t // 2
        pop = np.zeros(n_t, dtype=np.int64)
        pop[half:] = 1
        qs = (spec.q, spec.q2)
    else:
        pop = np.zeros(n_t, dtype=np.int64)
        qs = (spec.q,)
    pools = []
    for p in range(len(qs)):
        ids = np.nonzero(pop == p)[0]
        pools.append({k: ids[y[ids] == k] for k in range(c)})
        for k in range(c):
            if len(pools[p][k]) == 0:
                raise GraphDataError(
                    "infeasible spec: a class has no target nodes in a population"
                )

    centroids = rng.standard_normal((c, spec.feature_dim))

    def features_for(classes_arr: np.ndarray) -> np.ndarray:
        noise = rng.standard_normal((len(classes_arr), spec.feature_dim))
        return spec.signal * centroids[classes_arr] + (1.0 - spec.signal) * noise

    node_types = {
        "item": NodeTypeTable(
            name="item", count=n_t, dim=spec.feature_dim, features=features_for(y)
        )
    }
    relations = {}
    for idx, size in enumerate(spec.intermediate_sizes):
        name = f"ctx{idx}"
        anchors = rng.integers(c, size=size)
        # intermediates inherit the population of the targets they wire to
        inter_pop = rng.integers(len(qs), size=size) if len(qs) > 1 else np.zeros(size, dtype=int)
        pairs = []
        for j in range(size):
            p = int(inter_pop[j])
            for _ in range(spec.edges_per_intermediate):
                t = _draw_endpoint(rng, int(anchors[j]), qs[p], pools[p], c)
                pairs.append((j, t))
        node_types[name] = NodeTypeTable(
            name=name, count=size, dim=spec.feature_dim, features=features_for(anchors)
        )
        rel_name = f"{name}_of"
        rel, _ = build_relation(
            rel_name, name, "item", size, n_t, np.array(pairs, dtype=np.int64)
        )
        rev, _ = build_relation(
            f"rev_{rel_name}",
            "item",
            name,
            n_t,
            size,
            np.array(pairs, dtype=np.int64)[:, ::-1],
            reverse_of=rel_name,
            synthesized=True,
        )
        rel.reverse_of = rev.name
        relations[rel_name] = rel
        relations[rev.name] = rev

    assignments = {int(u): int(y[u]) for u in range(n_t)}
    labels = LabelTable(target_type="item", num_classes=c, assignments=assignments)
    perm = rng.permutation(n_t)
    n_train = int(round(spec.train_frac * n_t))
    n_val = int(round(spec.val_frac * n_t))
    splits = SplitTable(
        train=np.sort(perm[:n_train]),
        val=np.sort(perm[n_train : n_train + n_val]),
        test=np.sort(perm[n_train + n_val :]),
    )
    g = HetGraph(node_types=node_types, relations=relations, labels=labels, splits=splits)
    out_dir = Path(out_dir)
    manifest = save_graph(g, out_dir)
    info = {
        "spec": spec.to_dict(),
        "expected_pair_agreement": [spec.expected_pair_agreement(q) for q in qs],
    }
    (out_dir / "synth_info.json").write_text(json.dumps(info, indent=2), encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainRunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.002
    epochs: int = 300
    seed: int = 0
    eval_every: int = 1
    patience: int = 50

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        model = d.pop("model", {})
        return cls(model=ModelConfig.from_dict(model), **d)

    @classmethod
    def from_json_file(cls, path) -> "TrainRunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EpochLosses:
    l_cls: float
    l_corr: float
    l_rec: float
    total: float


def resolve_metapaths(g: HetGraph, cfg: ModelConfig):
    if cfg.metapaths:
        return [parse_metapath(g, text) for text in cfg.metapaths]
    paths = enumerate_length2(g, g.target_type)
    if not paths:
        raise GraphDataError(
            f"no length-2 metapaths found for target {g.target_type!r}; "
            "specify metapaths explicitly"
        )
    return paths


def compute_step_loss(
    g: HetGraph,
    plan: MaskPlan,
    negatives,
    params: ParamStore,
    cfg: ModelConfig,
    keep: np.ndarray | None,
):
    """Forward on the visible graph and assemble the combined objective.

    Deterministic given (plan, negatives, keep); shared by the trainer and
    the gradient checker.
    """
    x_hat, m = build_inputs(g, params, cfg, cfg.label_mask_p, rng=None, keep=keep)
    out = forward(plan.g_vis, x_hat, params, cfg)
    train_ids = g.splits.train
    rows = train_ids
    if cfg.mask_loss_only and m is not None:
        masked_rows = train_ids[m[train_ids] == 0]
        if masked_rows.size:
            rows = masked_rows
        else:
            log.warning("mask_loss_only: no masked training rows this epoch; using all")
    l_cls = classification_loss(out, g.labels, rows, cfg.multilabel)
    corr = correlation_loss(out.h_homo[out.target_type], out.h_hetero[out.target_type])
    l_corr = corr.mean if cfg.corr_reduction == "mean" else corr.total
    l_rec = reconstruction_loss(
        plan.rho_plus,
        negatives,
        out.h_homo,
        out.h_hetero,
        params,
        g,
        contrastive_completion=cfg.contrastive_completion,
        separate_decoders=cfg.separate_decoders,
    )
    j = total_loss(l_cls, l_corr, l_rec, cfg.alpha, cfg.beta)
    return j, EpochLosses(
        l_cls=float(l_cls.data),
        l_corr=float(l_corr.data),
        l_rec=float(l_rec.data),
        total=float(j.data),
    ), out


def inference_logits(g: HetGraph, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Full-graph forward with masking ratio 0 (all training labels injected)."""
    x_hat, _ = build_inputs(g, params, cfg, p=0.0, rng=None)
    out = forward(g, x_hat, params, cfg)
    return out.logits.data.copy()


@dataclass
class TrainResult:
    run_dir: Path
    best_epoch: int
    epochs_run: int
    metrics: dict
    diverged: bool = False


def train(g: HetGraph, cfg: TrainRunConfig, out_dir) -> TrainResult:
    """Train on a labeled, split graph; writes all run artifacts to out_dir."""
    if g.labels is None or g.splits is None:
        raise GraphDataError("training requires labels and splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / "run.lock"
    try:
        lock.touch(exist_ok=False)
    except FileExistsError:
        raise GraphDataError(f"run directory {out_dir} is locked by another run") from None
    try:
        return _train_locked(g, cfg, out_dir)
    finally:
        lock.unlink(missing_ok=True)


def _train_locked(g: HetGraph, cfg: TrainRunConfig, out_dir: Path) -> TrainResult:
    mcfg = cfg.model
    rng = np.random.default_rng(cfg.seed)
    params = init_params(g, mcfg, rng)
    paths = resolve_metapaths(g, mcfg)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2), encoding="utf-8"
    )

    val_ids = g.splits.val
    curves: list[str] = ["epoch,L_cls,L_corr,L_rec,J,val_micro_f1"]
    best_val = -math.inf
    best_epoch = 0
    best_snap = params.snapshot()
    last_good = params.snapshot()
    evals_since_best = 0
    diverged = False
    plan = None
    epochs_run = 0

    for epoch in range(1, cfg.epochs + 1):
        if plan is None or not mcfg.mask_once:
            plan = sample_mask(g, paths, mcfg.edge_mask_ratio, mcfg.walk_len, rng)
        n_neg = mcfg.negatives_per_positive * len(plan.rho_plus)
        negatives = sample_negatives(g, paths, n_neg, rng) if n_neg else []
        keep = (
            None
            if not mcfg.use_label_injection
            else  # drawn here so the loss itself stays deterministic
            _draw_keep(g, mcfg, rng)
        )
        try:
            j, losses, _ = compute_step_loss(g, plan, negatives, params, mcfg, keep)
        except FloatingPointError as e:
            log.error("epoch %d: %s; aborting with last good checkpoint", epoch, e)
            diverged = True
            break
        if not math.isfinite(losses.total):
            log.error("epoch %d: non-finite loss; aborting with last good checkpoint", epoch)
            diverged = True
            break
        params.zero_grad()
        j.backward()
        try:
            adam_step(params, cfg.lr)
        except NonFiniteGradientError as e:
            log.error("epoch %d: %s; aborting with last good checkpoint", epoch, e)
            diverged = True
            break
        epochs_run = epoch
        last_good = params.snapshot()

        val_cell = ""
        if val_ids.size and epoch % cfg.eval_every == 0:
            logits = inference_logits(g, params, mcfg)
            val = evaluate(logits, g.labels, val_ids, mcfg.multilabel, with_ap=False)
            val_cell = _fmt(val["micro_f1"])
            if val["micro_f1"] > best_val:
                best_val = val["micro_f1"]
                best_epoch = epoch
                best_snap = params.snapshot()
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best > cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    curves.append(
                        f"{epoch},{_fmt(losses.l_cls)},{_fmt(losses.l_corr)},"
                        f"{_fmt(losses.l_rec)},{_fmt(losses.total)},{val_cell}"
                    )
                    break
        curves.append(
            f"{epoch},{_fmt(losses.l_cls)},{_fmt(losses.l_corr)},"
            f"{_fmt(losses.l_rec)},{_fmt(losses.total)},{val_cell}"
        )

    if best_epoch == 0:
        best_snap = last_good  # never evaluated (or diverged early): last good state
        best_epoch = epochs_run
    params.restore(best_snap)
    params.save(out_dir / "params.bin")
    with open(out_dir / "curves.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(curves) + "\n")

    logits = inference_logits(g, params, mcfg)
    metrics: dict = {"best_epoch": best_epoch, "epochs_run": epochs_run, "diverged": diverged}
    for split in ("train", "val", "test"):
        ids = g.splits.of(split)
        if ids.size:
            metrics[split] = evaluate(logits, g.labels, ids, mcfg.multilabel)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    return TrainResult(
        run_dir=out_dir,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        metrics=metrics,
        diverged=diverged,
    )


def _draw_keep(g: HetGraph, mcfg: ModelConfig, rng) -> np.ndarray:
    from .model import draw_label_mask

    return draw_label_mask(len(g.splits.train), mcfg.label_mask_p, rng)


def load_run(run_dir) -> tuple[TrainRunConfig, ParamStore]:
    run_dir = Path(run_dir)
    cfg = TrainRunConfig.from_json_file(run_dir / "config.json")
    params = ParamStore.load(run_dir / "params.bin")
    return cfg, params


# ---------------------------------------------------------------------------
# Bucketed evaluation (performance vs local homophily)
# ---------------------------------------------------------------------------


@dataclass
class BucketRow:
    lo: float
    hi: float
    n_nodes: int
    micro_f1: float | None
    macro_f1: float | None


@dataclass
class BucketReport:
    metric_kind: str  # "mlh" | "mde"
    rows: list
    n_isolated: int

    def to_dict(self) -> dict:
        return {
            "metric_kind": self.metric_kind,
            "n_isolated": self.n_isolated,
            "rows": [asdict(r) for r in self.rows],
        }


def local_metric_vector(g: HetGraph, target: str, kind: str) -> LocalMetricVector:
    """Per-target-node local metric, averaged across length-2 metapaths.

    Nodes isolated in every induced graph are flagged isolated.
    """
    paths = enumerate_length2(g, target)
    if not paths:
        raise GraphDataError(f"no length-2 metapaths for target {target!r}")
    n = g.count(target)
    acc = np.zeros(n)
    cnt = np.zeros(n, dtype=np.int64)
    for p in paths:
        ig = induce_subgraph(g, p)
        if kind == "mlh":
            _, vec = node_label_homophily(ig, g.labels)
        elif kind == "mde":
            x = g.node_type(target).features
            if x is None:
                raise GraphDataError(f"type {target!r} has no features; MDE-local undefined")
            _, vec = node_dirichlet_energy(ig, x)
        else:
            raise ValueError("metric kind must be 'mlh' or 'mde'")
        active = ~vec.isolated
        acc[active] += vec.values[active]
        cnt[active] += 1
    isolated = cnt == 0
    values = np.full(n, np.nan)
    values[~isolated] = acc[~isolated] / cnt[~isolated]
    return LocalMetricVector(values=values, isolated=isolated)


def bucket_report(
    run_dir,
    g: HetGraph,
    metric_kind: str = "mlh",
    scheme: BucketScheme | None = None,
) -> BucketReport:
    """Per-bucket test performance of a trained run, bucketed by local metric.

    Writes buckets.csv and assignments.csv into the run directory.
    """
    if scheme is None:
        scheme = BucketScheme(quantiles=5)
    run_dir = Path(run_dir)
    cfg, params = load_run(run_dir)
    if g.splits is None or g.splits.test.size == 0:
        raise GraphDataError("bucket report requires a nonempty test split")
    logits = inference_logits(g, params, cfg.model)
    target = g.target_type
    vec = local_metric_vector(g, target, metric_kind)

    test_ids = g.splits.test
    test_mask = np.zeros(g.count(target), dtype=bool)
    test_mask[test_ids] = True
    test_vec = LocalMetricVector(
        values=vec.values, isolated=vec.isolated | ~test_mask
    )
    buckets, _ = bucket_nodes(test_vec, scheme)
    isolated_test = np.nonzero(vec.isolated & test_mask)[0]

    rows = []
    for b in buckets:
        if b.node_ids.size:
            res = evaluate(logits, g.labels, b.node_ids, cfg.model.multilabel, with_ap=False)
            rows.append(
                BucketRow(b.lo, b.hi, int(b.node_ids.size), res["micro_f1"], res["macro_f1"])
            )
        else:
            rows.append(BucketRow(b.lo, b.hi, 0, None, None))
    report = BucketReport(metric_kind=metric_kind, rows=rows, n_isolated=int(isolated_test.size))

    with open(run_dir / "buckets.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("lo,hi,n_nodes,micro_f1,macro_f1\n")
        for r in report.rows:
            micro = _fmt(r.micro_f1) if r.micro_f1 is not None else ""
            macro = _fmt(r.macro_f1) if r.macro_f1 is not None else ""
            fh.write(f"{_fmt(r.lo)},{_fmt(r.hi)},{r.n_nodes},{micro},{macro}\n")
    write_bucket_assignments(run_dir / "assignments.csv", buckets, test_vec)
    return report
