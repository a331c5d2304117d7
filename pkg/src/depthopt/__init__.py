"""Direct photometric optimization of dense depth and 6-DoF poses from
stereo+temporal image quadruples, with the full loss stack (SSIM+L1 image
loss, edge-aware smoothness, directional depth consistency, explainability
regularization), KITTI-style evaluation metrics, and netpbm scene I/O."""

from .geometry import (CoordGrid, Intrinsics, Pose6, backproject, compose_small,
                       pose_to_transform, project, rotation_from_axis_angle,
                       transform_to_pose, warp_coordinates)
from .sampler import SampledImage, bilinear_sample, bilinear_sample_vjp, resize_bilinear

__version__ = "0.1.0"
