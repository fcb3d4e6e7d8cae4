"""listalign: contrastive photo-set/text embedding alignment and compression.

Subpackages:
    linalg    PCA, k-means, Procrustes, percentiles
    codec     product / rotated-product / scalar / PCA quantizers and file formats
    synth     synthetic listing generator, filters, dataset persistence
    autodiff  minimal reverse-mode tape over numpy
    model     photo-set transformer encoder and text tower
    align     contrastive losses, Adam, two-stage training driver
    eval      retrieval metrics, attribute probes, NDCG, PCA dimension sweep
    cli       command-line pipeline (gen / train / quantize / eval / search / report)
"""

from .errors import (
    ConfigError,
    DegenerateInput,
    ListalignError,
    ShapeMismatch,
    StaleTape,
    UnknownId,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInput",
    "ListalignError",
    "ShapeMismatch",
    "StaleTape",
    "UnknownId",
    "__version__",
]
