"""Weakly supervised change detection with a constrained dense CRF."""

from .energy import CrfParams, KernelFeatures, kernel_features
from .meanfield import MarginalField, run_inference
from .permutohedral import Lattice, build_lattice
from .types import ImagePair, color_difference, difference_map

__all__ = [
    "CrfParams",
    "ImagePair",
    "KernelFeatures",
    "Lattice",
    "MarginalField",
    "build_lattice",
    "color_difference",
    "difference_map",
    "kernel_features",
    "run_inference",
]
__version__ = "0.1.0"
