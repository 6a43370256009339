"""resplat: sparse-view 3D Gaussian Splatting refinement toolkit.

Core pieces: a CPU rasterizer with transmittance output, opacity-mask
extraction and morphological refinement, palette-score dataset filtering, a
toy-scale conditioning adapter, an evaluation metrics suite, and an
end-to-end render / refine / re-reconstruct pipeline with pluggable
generator and reconstructor backends (in-process stubs, directory exchange,
or HTTP).
"""

__version__ = "0.1.0"

from .scene import CameraPose, GaussianPrimitive, GaussianScene, TokenGrid  # noqa: F401
from .rasterizer import RenderOptions, RenderOutput, render, render_oracle  # noqa: F401
