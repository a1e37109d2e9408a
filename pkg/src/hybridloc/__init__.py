"""Hybrid camera relocalization for egocentric 3D object queries.

Video-only SfM poses are aligned to a scanned environment and merged with
PnP relocalization against the scan, then used to lift 2D detections of a
query object into 3D.
"""
__version__ = "0.1.0"

from .errors import (AlignmentInfeasibleError, DegenerateGeometryError, EmptyReconstructionError,
                     HybridLocError, InvalidArgumentError, NoDetectionError, NoPoseError,
                     StageDependencyError, UndefinedAngleError)
from .geometry import Intrinsics, Pose, PoseEntry, PoseTable, Provenance, Sim3

__all__ = [
    "__version__", "Intrinsics", "Pose", "PoseEntry", "PoseTable", "Provenance", "Sim3",
    "HybridLocError", "InvalidArgumentError", "DegenerateGeometryError", "AlignmentInfeasibleError",
    "EmptyReconstructionError", "NoPoseError", "NoDetectionError", "UndefinedAngleError",
    "StageDependencyError",
]
