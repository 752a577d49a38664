"""Data-aided sensing: adaptive device polling for IoT data collection."""

from ._utils import InvalidArgument, rng_stream
from .gaussian import (
    GaussianDASSelector,
    SelectionTrace,
    conditional_entropy,
    conditional_variance,
    mmse_estimate,
    run_centralized_das,
    select_next_entropy,
    select_next_mse,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentReport,
    compare_policies,
    parse_config,
    preset_config,
    run_experiment,
)
from .random_access import (
    RandomAccessPolicy,
    access_probs_ra1,
    access_probs_ra2,
    dual_ascent_update,
    run_distributed_das,
    simulate_round,
    success_prob,
)
from .scenario import (
    CollectionState,
    GaussianField,
    QueryScene,
    SparseScene,
    gen_gaussian_field,
    gen_query_scene,
    gen_sparse_scene,
)
from .sparse import (
    SparseRecovery,
    apply_downlink_errors,
    run_sparse_das,
    select_next_sparse,
    select_next_sparse_naive,
    sparse_recover,
)

__version__ = "0.1.0"
