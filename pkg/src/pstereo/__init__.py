"""Calibrated photometric stereo toolkit.

Multi-scale convolutional normal estimation on a small float64 autodiff
engine, a synthetic training-data renderer (blobby geometry, parametric
BRDF, cast shadows), the classical least-squares baseline and a benchmark
evaluation harness.
"""

from .samples import LightSample, NormalMap, PsSample
from .tensor import Tensor, no_grad

__all__ = ["LightSample", "NormalMap", "PsSample", "Tensor", "no_grad"]
__version__ = "0.1.0"
