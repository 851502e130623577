"""Input compression with positional consistency for a miniature Transformer.

Compression-based data augmentation for four modalities, grid-consistent
position-embedding selection, variable-effort inference and
hardware-aware test-time augmentation, all runnable on a desk CPU.
"""

__version__ = "0.1.0"

from .augment import AugmentationPolicy, CompressionLevel, RawSample
from .positional import (
    GridDims,
    PositionSelection,
    first_n_baseline,
    select_1d,
    select_2d,
    select_3d,
    verify_consistency,
)

__all__ = [
    "__version__",
    "AugmentationPolicy",
    "CompressionLevel",
    "GridDims",
    "PositionSelection",
    "RawSample",
    "first_n_baseline",
    "select_1d",
    "select_2d",
    "select_3d",
    "verify_consistency",
]
