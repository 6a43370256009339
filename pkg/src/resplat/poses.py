"""Extrapolated camera-pose sampling between and beyond sparse inputs."""

from __future__ import annotations

from .geometry import quaternion_to_rotation, rotation_to_quaternion, slerp
from .scene import CameraPose


def interpolate_pose(a: CameraPose, b: CameraPose, t: float) -> CameraPose:
    """Pose at parameter t along the a->b path.

    Rotation follows the quaternion geodesic (slerp), translation is linear;
    t outside [0, 1] extrapolates. Intrinsics and image size are copied from
    the nearer endpoint.
    """
    qa = rotation_to_quaternion(a.rotation)
    qb = rotation_to_quaternion(b.rotation)
    rot = quaternion_to_rotation(slerp(qa, qb, t))
    trans = (1.0 - t) * a.translation + t * b.translation
    src = a if t <= 0.5 else b
    return CameraPose(
        rotation=rot, translation=trans,
        fx=src.fx, fy=src.fy, cx=src.cx, cy=src.cy,
        width=src.width, height=src.height,
    )


def sample_extrapolated_poses(
    inputs: list[CameraPose],
    per_gap: int = 4,
    overshoot: float = 0.25,
) -> list[CameraPose]:
    """Sample novel poses along the input camera path.

    Between each consecutive input pair, `per_gap` poses at uniform interior
    parameters k / (per_gap + 1). One extra pose extrapolates before the first
    input at parameter -overshoot of the first gap and one after the last at
    1 + overshoot of the last gap; with overshoot 0 these coincide with the
    endpoint inputs.
    """
    if len(inputs) < 2:
        raise ValueError("need at least 2 input poses")
    if per_gap < 1:
        raise ValueError("per_gap must be >= 1")
    if not 0.0 <= overshoot <= 0.5:
        raise ValueError(f"overshoot must lie in [0, 0.5], got {overshoot}")

    poses = [interpolate_pose(inputs[0], inputs[1], -overshoot)]
    for a, b in zip(inputs[:-1], inputs[1:]):
        for k in range(1, per_gap + 1):
            poses.append(interpolate_pose(a, b, k / (per_gap + 1)))
    poses.append(interpolate_pose(inputs[-2], inputs[-1], 1.0 + overshoot))
    return poses
