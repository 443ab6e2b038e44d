"""Recurrent plane-sweep multi-view stereo on numpy.

Feature extraction, homography-warped variance cost maps, streaming
convolutional-GRU regularization, toy-scale training with hand-written
gradients, variational depth refinement, and filtering/fusion into a
point cloud, plus a synthetic-scene renderer used as ground truth.
"""

__version__ = "0.1.0"

from pathlib import Path


def data_path(*parts: str) -> Path:
    """Location of bundled data (toy weights, the 3-view fixture)."""
    return Path(__file__).resolve().parent.joinpath("data", *parts)
