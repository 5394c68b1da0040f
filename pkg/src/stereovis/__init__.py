"""Stereo perception toolkit.

Dense disparity from rectified stereo pairs via multi-path Viterbi
optimization over an SSIM matching cost, coarse-to-fine multiscale
acceleration, road/obstacle detection in disparity-histogram space, and
LBP-feature cascade recognition of obstacle ROIs.
"""

from stereovis.imgio import GrayImage, GradientMap, RemapTable, StereoPair
from stereovis.cost import CostParams, PatchStats
from stereovis.viterbi import DisparityMap, PathDirection, PenaltyParams, TrellisLayer

__version__ = "0.1.0"

__all__ = [
    "GrayImage",
    "GradientMap",
    "RemapTable",
    "StereoPair",
    "CostParams",
    "PatchStats",
    "DisparityMap",
    "PathDirection",
    "PenaltyParams",
    "TrellisLayer",
    "__version__",
]
