"""WuNeng: causal attention augmented with delta-rule state heads.

Desk-scale, numpy-only. The package favors bit-reproducibility over speed:
float64 everywhere, a counter-based RNG, and deterministic iteration
everywhere parameters are touched.
"""

import os as _os

# single-threaded BLAS keeps runs byte-reproducible; set before numpy loads
for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_k, "1")

from .fusion import CombineMode, FusionConfig, MiddleMode
from .harness import TrainConfig, evaluate, train
from .model import (ModelConfig, ModelParams, count_params, init_params,
                    load_checkpoint, model_forward, save_checkpoint)
from .numerics import Rng

__version__ = "0.1.0"

__all__ = [
    "CombineMode", "FusionConfig", "MiddleMode", "ModelConfig", "ModelParams",
    "Rng", "TrainConfig", "count_params", "evaluate", "init_params",
    "load_checkpoint", "model_forward", "save_checkpoint", "train",
    "__version__",
]
