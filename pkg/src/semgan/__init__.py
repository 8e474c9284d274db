"""Semantic-aware unpaired scene adaptation GAN at desk scale.

Built on a minimal reverse-mode tensor engine: cycle-consistent
least-squares adversarial training, a boundary-weighted gradient loss,
and a patch discriminator with one output channel per semantic class.
"""

__version__ = "0.1.0"

from .engine import Graph, ShapeError, Tensor

__all__ = ["Graph", "ShapeError", "Tensor", "__version__"]
