"""Coordinate frames, angle arithmetic, and sensor/body/world transforms.

World frame: z-up, x-east, y-north. Heading is measured from +x toward +y.
Body frame: x forward, y left, z up. The nadir camera is mounted so that
image-x points along body-x, image-y along body -y, and the optical axis
along body -z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi

Vec3 = np.ndarray  # shape (3,), float


def vec3(x: float, y: float, z: float) -> Vec3:
    return np.array([x, y, z], dtype=float)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(a):
        raise ValueError(f"non-finite angle: {a!r}")
    r = math.remainder(a, TAU)
    if r <= -math.pi:
        r += TAU
    return r


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in [0, pi]."""
    return abs(wrap_angle(a - b))


def line_angle_diff(a: float, b: float) -> float:
    """Difference between undirected line orientations, in [0, pi/2]."""
    d = angle_diff(a, b)
    return min(d, math.pi - d)


@dataclass(frozen=True)
class Pose:
    """Position and heading of a rigid body in the world frame."""

    position: Vec3
    heading: float

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"bad position: {self.position!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def xy(self) -> np.ndarray:
        return self.position[:2]

    @property
    def z(self) -> float:
        return float(self.position[2])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (
        np.allclose(R @ R.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
    )


# Columns are the sensor axes expressed in the body frame: image-x is body
# forward, image-y is body right (-y), the optical axis points down (-z).
SENSOR_IN_BODY = np.array(
    [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]
)

# Cameras sit beside the airframe so the carried brick does not blind the
# nadir view: a lateral mount offset in the body frame.
CAMERA_OFFSET_BODY = np.array([0.0, -0.25, -0.05])


def camera_origin(pose: "Pose") -> np.ndarray:
    """World position of the camera, given the body pose."""
    return pose.position + rot_z(pose.heading) @ CAMERA_OFFSET_BODY


def body_to_world(heading: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation taking body-frame vectors into the world frame (ZYX order)."""
    return rot_z(heading) @ rot_y(pitch) @ rot_x(roll)


def sensor_to_world(heading: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rotation taking camera-frame vectors into the world frame."""
    return body_to_world(heading, pitch, roll) @ SENSOR_IN_BODY


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float) -> "CameraIntrinsics":
        """Square-pixel pinhole model from a horizontal field of view."""
        fx = (width / 2.0) / math.tan(hfov / 2.0)
        return cls(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan((self.width / 2.0) / self.fx)

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan((self.height / 2.0) / self.fy)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera after downsampling by `factor`."""
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=int(self.width // factor),
            height=int(self.height // factor),
        )

    def pixel_ray(self, px: tuple[float, float]) -> Vec3:
        """Unnormalized camera-frame ray through a pixel; z component is 1."""
        x, y = px
        return np.array([(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0])


_RAY_CACHE: dict = {}


def ray_grid(K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-column and per-row camera-frame ray slopes, cached per intrinsics."""
    key = (K.fx, K.fy, K.cx, K.cy, K.width, K.height)
    if key not in _RAY_CACHE:
        xs = (np.arange(K.width, dtype=np.float64) - K.cx) / K.fx
        ys = (np.arange(K.height, dtype=np.float64) - K.cy) / K.fy
        _RAY_CACHE[key] = (xs, ys)
    return _RAY_CACHE[key]


def point_altitude(
    d: float,
    px: tuple[float, float],
    K: CameraIntrinsics,
    R: np.ndarray,
    offset_z: float,
) -> float:
    """World z of a depth sample, via the last row of the rotation only.

    `d` is the z-depth at pixel `px`, `R` rotates camera-frame vectors into
    the world frame, and `offset_z` is the world z of the camera origin.
    Equivalent to transforming the full 3D point and reading its z component.
    """
    if d <= 0:
        raise ValueError(f"depth must be positive, got {d}")
    return float(d * (R[2] @ K.pixel_ray(px)) + offset_z)


def transform_point(p_sensor: Vec3, R: np.ndarray, t: Vec3) -> Vec3:
    return R @ np.asarray(p_sensor, dtype=float) + t


def invert_transform(R: np.ndarray, t: Vec3) -> tuple[np.ndarray, Vec3]:
    Rt = np.asarray(R).T
    return Rt, -(Rt @ np.asarray(t, dtype=float))
