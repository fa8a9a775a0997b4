from .config import RunConfig, load_config
from .errors import ConfigError, LeakageError, MissingArtifactError, NiwtError, NumericalError
from .pipeline import NiwtPipeline
from .transfer import WeightTransfer, apply_transfer, perturb_importance, transfer_weights
from .types import (
    DatasetManifest,
    GzslResult,
    GzslSplit,
    ImportanceVector,
    KnowledgeVector,
    LinearMap,
    MapDirection,
    ProbeMode,
    TransferResult,
)

__all__ = [
    "NiwtPipeline",
    "RunConfig",
    "load_config",
    "WeightTransfer",
    "transfer_weights",
    "apply_transfer",
    "perturb_importance",
    "DatasetManifest",
    "GzslResult",
    "GzslSplit",
    "ImportanceVector",
    "KnowledgeVector",
    "LinearMap",
    "MapDirection",
    "ProbeMode",
    "TransferResult",
    "NiwtError",
    "ConfigError",
    "MissingArtifactError",
    "NumericalError",
    "LeakageError",
]
