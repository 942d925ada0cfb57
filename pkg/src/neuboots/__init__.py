"""Neural bootstrapper: one network that emits bootstrap replicates of its predictions."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree without installing
    __version__ = "0.0.0"

from .errors import ConfigError, DataError, NumericalError, ShapeError  # noqa: E402
from .generator import (GeneratorNet, PredictionEnsemble, confidence_band, predict_bootstrap,  # noqa: E402
                        train)
from .weights import assign_blocks, make_rng, sample_dirichlet_alpha  # noqa: E402

__all__ = [
    "ConfigError", "DataError", "NumericalError", "ShapeError",
    "GeneratorNet", "PredictionEnsemble", "confidence_band", "predict_bootstrap", "train",
    "assign_blocks", "make_rng", "sample_dirichlet_alpha",
]
