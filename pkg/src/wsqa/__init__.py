"""wsqa: weak-teacher mask curation, overlap augmentation, and automated
segmentation-quality / weak-to-strong diagnostics for multiplex whole-slide
images."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .raster import (
    AnnotationSet,
    ChannelStack,
    InstanceMask,
    containment,
    iou,
    rle_decode,
    rle_encode,
    solidity,
)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "AnnotationSet",
    "ChannelStack",
    "InstanceMask",
    "containment",
    "iou",
    "rle_decode",
    "rle_encode",
    "solidity",
    "__version__",
]
