"""Pinhole look-at camera.

Pixel ``(row, col)`` has its center at ``(row + 0.5, col + 0.5)`` in continuous
image coordinates; rows grow downward, columns to the right.
"""
from dataclasses import dataclass, field
import json
import math

import numpy as np

from ..errors import CameraError

CONTAINER_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float  # vertical, radians
    resolution: tuple = (64, 64)  # (height, width)
    _basis: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        self.fov = float(self.fov)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not np.all(np.isfinite(self.position)) or not np.all(np.isfinite(self.look_at)):
            raise CameraError("camera position and look-at must be finite")
        view = self.look_at - self.position
        if np.linalg.norm(view) < 1e-12:
            raise CameraError("look-at coincides with camera position")
        forward = view / np.linalg.norm(view)
        if np.linalg.norm(self.up) < 1e-12:
            raise CameraError("up vector is zero")
        right = np.cross(forward, self.up)
        if np.linalg.norm(right) < 1e-9 * np.linalg.norm(self.up):
            raise CameraError("up vector is parallel to the viewing direction")
        if not 0.0 < self.fov < math.pi:
            raise CameraError(f"fov must lie in (0, pi), got {self.fov}")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise CameraError(f"invalid resolution {self.resolution}")
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        self._basis = (right, true_up, forward)

    @property
    def height(self):
        return self.resolution[0]

    @property
    def width(self):
        return self.resolution[1]

    @property
    def basis(self):
        """Orthonormal (right, up, forward) axes in world coordinates."""
        return self._basis

    def _half_extents(self):
        tan_half = math.tan(self.fov / 2.0)
        return tan_half * self.width / self.height, tan_half

    def rays(self):
        """Unit ray directions through every pixel center, shape (H, W, 3)."""
        right, up, forward = self._basis
        half_w, half_h = self._half_extents()
        cols = (np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0
        rows = 1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0
        x = cols[None, :, None] * half_w
        y = rows[:, None, None] * half_h
        dirs = forward + x * right + y * up
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def project(self, points):
        """Project world points to continuous (row, col) pixel coordinates.

        Returns ``(rc, depth)`` where depth is the distance along the optical
        axis; points with ``depth <= 0`` are behind the camera and get NaN.
        """
        points = np.asarray(points, dtype=np.float64)
        right, up, forward = self._basis
        rel = points - self.position
        depth = rel @ forward
        half_w, half_h = self._half_extents()
        with np.errstate(divide="ignore", invalid="ignore"):
            x = (rel @ right) / depth / half_w
            y = (rel @ up) / depth / half_h
        col = (x + 1.0) / 2.0 * self.width
        row = (1.0 - y) / 2.0 * self.height
        rc = np.stack([row, col], axis=-1)
        rc[depth <= 0] = np.nan
        return rc, depth

    def to_dict(self):
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov": self.fov,
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["position"], d["look_at"], d["up"], d["fov"], tuple(d["resolution"]))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sample_camera(rng, resolution=(64, 64), fov=math.radians(30.0),
                  radius_range=(1.5, 2.5), center=CONTAINER_CENTER):
    """Camera on a random sphere shell around the container, looking at its center."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = rng.uniform(*radius_range)
    up = np.array([0.0, 1.0, 0.0])
    if abs(direction @ up) > 0.95:
        up = np.array([0.0, 0.0, 1.0])
    return Camera(center + radius * direction, center, up, fov, resolution)
