"""hetkit: heterogeneous-graph heterophily toolkit.

Metapath-based label-homophily (MLH) and Dirichlet-energy (MDE) metrics,
plus a desk-scale heterophily-aware heterogeneous GNN trained with masked
metapath prediction and masked label prediction.
"""

from .hetgraph import (
    GraphDataError,
    HetGraph,
    LabelTable,
    NodeTypeTable,
    Relation,
    SplitTable,
    load_graph,
    neighbors,
    save_graph,
    validate,
)
from .homophily import (
    BucketScheme,
    MetricReport,
    aggregate_rows,
    bucket_nodes,
    edge_dirichlet_energy,
    edge_label_homophily,
    mde,
    mlh,
    node_dirichlet_energy,
    node_label_homophily,
)
from .metapath import (
    InducedGraph,
    MaskPlan,
    Metapath,
    enumerate_length2,
    induce_subgraph,
    metapath_from_steps,
    parse_metapath,
    sample_mask,
    sample_negatives,
)
from .model import (
    ForwardOutput,
    ModelConfig,
    correlation_loss,
    forward,
    init_params,
    inject_labels,
    reconstruction_loss,
    total_loss,
)
from .harness import (
    BucketReport,
    SynthSpec,
    TrainRunConfig,
    bucket_report,
    evaluate,
    synth_graph,
    train,
)
from .numcore import ParamStore, Tensor, adam_step, grad_check

__version__ = "0.1.0"
