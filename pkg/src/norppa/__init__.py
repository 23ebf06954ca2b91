"""Content-based retrieval for individual animal re-identification from
binary pelage-pattern images: preprocessing, affine-covariant features,
Fisher Vector embeddings over a GMM vocabulary, cosine top-k retrieval,
RANSAC geometric verification, and an expert confirm loop.
"""

from .config import PipelineConfig
from .errors import EmptyPatternError, FormatError, NorppaError, StageError

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "NorppaError",
    "StageError",
    "EmptyPatternError",
    "FormatError",
    "__version__",
]
