"""Layer-adaptive sparsified robust aggregation for federated learning."""

from .aggregators import (
    AggregationOutcome,
    LasaParams,
    bulyan,
    fedavg,
    geometric_median,
    lasa,
    make_aggregator,
    multi_krum,
    sparsefed_lite,
    trimmed_mean,
)
from .attacks import AttackContext, AttackSpec, generate
from .config import ConfigError, ExperimentConfig, parse_config, resolve_config
from .engine import run_experiment
from .sparsify import SparsificationLevel, sparsify_update, top_k
from .update import LayeredUpdate, LayerSpec, UpdateBatch, make_layout

__version__ = "0.1.0"
