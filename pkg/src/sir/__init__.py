"""Sub-image recapture and a memory-bounded multi-view stereo pipeline."""

from .geometry import Camera, Extrinsics, Intrinsics, project, project_points, unproject
from .memory import MemoryReport, estimate_cluster_peak, image_bytes
from .recapture import (
    GridSpec,
    RecaptureSet,
    SubImageRef,
    map_native_to_sub,
    map_sub_to_native,
    recapture_grid,
    recapture_region,
    split_image,
)

__all__ = [
    "Camera",
    "Extrinsics",
    "GridSpec",
    "Intrinsics",
    "MemoryReport",
    "RecaptureSet",
    "SubImageRef",
    "estimate_cluster_peak",
    "image_bytes",
    "map_native_to_sub",
    "map_sub_to_native",
    "project",
    "project_points",
    "recapture_grid",
    "recapture_region",
    "split_image",
    "unproject",
]
