"""Infrared small target detection with a recurrent reusable-convolution
segmentation network, built on a small NCHW reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .kernels import active_backend

__all__ = ["active_backend", "__version__"]
