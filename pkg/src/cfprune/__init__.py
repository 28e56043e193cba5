"""Training-free CNN filter pruning via central filters.

Estimates feature-map similarity on a small calibration set, selects
central filters by closeness centrality on per-layer similarity graphs,
and folds pruned filters' next-layer kernels into the centrals so the
pruned network approximates the original without retraining.
"""

from .centrality import (
    CentralAssignment,
    SimilarityGraph,
    build_graph,
    closeness,
    select_central_filters,
    threshold_for_rate,
)
from .errors import (
    CfpruneError,
    ChecksumError,
    ConfigError,
    CyclicGraphError,
    DataFormatError,
    ModelFormatError,
    ShapeError,
    UnsupportedTopologyError,
)
from .evaluation import (
    PrunedModelReport,
    ablation_select,
    reconstruction_error,
    similarity_histogram,
)
from .model import (
    ActivationSet,
    FilterRef,
    LayerNode,
    ModelGraph,
    count_flops_params,
    coupling_groups,
    forward_capture,
    load_model,
    resolve_dependencies,
    save_model,
)
from .pruning import (
    PruningPlan,
    adjust_consumer_kernels,
    apply_plan,
    predicted_counts,
    prune_model,
    reconcile_coupling,
)
from .similarity import (
    SimilarityMatrix,
    average_similarity,
    feature_similarity,
    pearson,
    stability_report,
)
from .tensor_ops import apply_layer, conv2d, flatten_one

__version__ = "0.1.0"

__all__ = [
    "ActivationSet",
    "CentralAssignment",
    "CfpruneError",
    "ChecksumError",
    "ConfigError",
    "CyclicGraphError",
    "DataFormatError",
    "FilterRef",
    "LayerNode",
    "ModelFormatError",
    "ModelGraph",
    "PrunedModelReport",
    "PruningPlan",
    "ShapeError",
    "SimilarityGraph",
    "SimilarityMatrix",
    "UnsupportedTopologyError",
    "ablation_select",
    "adjust_consumer_kernels",
    "apply_layer",
    "apply_plan",
    "average_similarity",
    "build_graph",
    "closeness",
    "conv2d",
    "count_flops_params",
    "coupling_groups",
    "feature_similarity",
    "flatten_one",
    "forward_capture",
    "load_model",
    "pearson",
    "predicted_counts",
    "prune_model",
    "reconcile_coupling",
    "reconstruction_error",
    "resolve_dependencies",
    "save_model",
    "select_central_filters",
    "similarity_histogram",
    "stability_report",
    "threshold_for_rate",
]
