"""Camera-frame geometry: pinhole intrinsics, inverse projection, distances.

All 3D quantities live in the ego camera frame with the optical axis along
+z, so the ego vehicle itself sits at the origin. Everything is computed in
double precision; downstream gradient checks rely on that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Zero-skew pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        """The 3x3 upper-triangular calibration matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Point3:
    """A 3D point in the camera frame, meters, z along the optical axis."""

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Point3":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("point components must be finite")
        return Point3(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class PixelObservation:
    """Bounding-box center (u, v) in pixels plus its relative depth scalar."""

    u: float
    v: float
    depth: float


def _check_intrinsics(k: CameraIntrinsics) -> None:
    if not (k.fx > 0 and k.fy > 0):
        raise ConfigError(f"invalid intrinsics: focal lengths must be positive, got fx={k.fx}, fy={k.fy}")


def invert_intrinsics(k: CameraIntrinsics) -> np.ndarray:
    """Closed-form inverse of the zero-skew pinhole calibration matrix."""
    _check_intrinsics(k)
    return np.array(
        [
            [1.0 / k.fx, 0.0, -k.cx / k.fx],
            [0.0, 1.0 / k.fy, -k.cy / k.fy],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )


def inverse_project(obs: PixelObservation, k: CameraIntrinsics) -> Point3:
    """Lift a pixel observation to 3D: depth * K^-1 * [u, v, 1]^T."""
    if not obs.depth > 0:
        raise ConfigError(f"invalid observation: depth must be positive, got {obs.depth}")
    xyz = obs.depth * (invert_intrinsics(k) @ np.array([obs.u, obs.v, 1.0]))
    return Point3(float(xyz[0]), float(xyz[1]), float(xyz[2]))


def project(p: Point3, k: CameraIntrinsics) -> PixelObservation:
    """Forward pinhole projection; the depth of the result is the z coordinate."""
    _check_intrinsics(k)
    if not p.z > 0:
        raise ConfigError(f"cannot project a point with non-positive z, got z={p.z}")
    u = k.fx * p.x / p.z + k.cx
    v = k.fy * p.y / p.z + k.cy
    return PixelObservation(float(u), float(v), float(p.z))


def euclidean_distance(p: Point3, q: Point3) -> float:
    """3D Euclidean distance in meters."""
    return math.sqrt((p.x - q.x) ** 2 + (p.y - q.y) ** 2 + (p.z - q.z) ** 2)


def within_range(p: Point3, q: Point3, mu: float) -> bool:
    """Distance-constraint indicator: true iff distance(p, q) <= mu (inclusive)."""
    if not mu > 0:
        raise ConfigError(f"distance threshold mu must be positive, got {mu}")
    return euclidean_distance(p, q) <= mu
