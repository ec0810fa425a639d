"""CBAM-augmented single-stage pavement distress detector."""

from .boxes import BoundingBox, Detection, GroundTruth
from .model import CLASS_NAMES, Detector, NetworkConfig, decode
from .tensor import Tensor

__all__ = ["BoundingBox", "Detection", "GroundTruth", "CLASS_NAMES",
           "Detector", "NetworkConfig", "decode", "Tensor"]
__version__ = "0.1.0"
