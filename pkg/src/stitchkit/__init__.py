"""stitchkit: unsupervised two-stage image stitching."""

from .api import StitchPipeline
from .utils.config import PipelineConfig

__version__ = "0.1.0"
__all__ = ["PipelineConfig", "StitchPipeline", "__version__"]
