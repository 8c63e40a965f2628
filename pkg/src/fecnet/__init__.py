"""Clustering-based vision backbone with inspectable cluster assignments.

Setting ``FEC_THREADS`` before the first import caps the BLAS worker pools
numpy uses (it fills in the usual ``*_NUM_THREADS`` variables when unset).
"""

import os as _os

_threads = _os.environ.get("FEC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .autodiff import Tensor, backward, no_grad, precision  # noqa: E402
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint  # noqa: E402
from .cluster import (ClusterLayerParams, DispatchVariant, SimilarityKind, encode,  # noqa: E402
                      init_encode_params, init_pool_params, pool)
from .errors import (ConfigurationError, ContractError, CorruptCheckpointError,  # noqa: E402
                     DimensionError, DomainError, FECError, FormatError, NonFiniteError)
from .hierarchy import (SegmentPyramid, build_pyramid, kmeans, kmeans_reduce,  # noqa: E402
                        render_segmentation)
from .model import Model, ModelConfig, build_model, fec_micro, fec_small  # noqa: E402
from .records import AssignmentRecord  # noqa: E402
from .training import (AdamW, Dataset, TrainConfig, WarmupCosine, evaluate, fit,  # noqa: E402
                       load_dataset, train_step)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AssignmentRecord", "ClusterLayerParams", "ConfigurationError", "ContractError",
    "CorruptCheckpointError", "Dataset", "DimensionError", "DispatchVariant", "DomainError",
    "FECError", "FormatError", "Model", "ModelConfig", "NonFiniteError", "SegmentPyramid",
    "SimilarityKind", "Tensor", "TrainConfig", "WarmupCosine", "backward", "build_model",
    "build_pyramid", "encode", "evaluate", "fec_micro", "fec_small", "fit", "init_encode_params",
    "init_pool_params", "kmeans", "kmeans_reduce", "load_checkpoint", "load_dataset", "pool",
    "no_grad", "precision", "read_checkpoint", "render_segmentation", "save_checkpoint", "train_step",
    "write_checkpoint",
]
