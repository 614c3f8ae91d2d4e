from dataclasses import dataclass

import numpy as np

from ..errors import RenderError
from .camera import Camera
from .shapes import CanonicalShape


@dataclass
class NocsMap:
    """Per-pixel NOCS coordinates with a validity mask; invalid pixels hold exact zeros."""
    coords: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.coords.shape[:2] != self.valid.shape or self.coords.shape[-1] != 3:
            raise ValueError(f"coords {self.coords.shape} and valid {self.valid.shape} disagree")
        self.coords = np.where(self.valid[..., None], self.coords, 0.0)

    @property
    def points(self):
        return self.coords[self.valid]

    @classmethod
    def empty(cls, resolution):
        h, w = resolution
        return cls(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))


@dataclass
class ViewSample:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    nocs_visible: NocsMap
    nocs_hidden: NocsMap
    mask: np.ndarray
    camera: Camera
    shape_id: str = ""
    view_id: str = ""


def render_view(shape: CanonicalShape, camera: Camera, background="white", rng=None):
    """Ray-cast one view: first hits give the visible NOCS map, last hits the hidden one."""
    if shape.contains(camera.position[None])[0]:
        raise RenderError("camera is inside the shape")
    dirs = camera.rays()
    t_first, t_last, hit = shape.intersect(camera.position, dirs)
    origin = camera.position
    visible = np.where(hit[..., None], origin + t_first[..., None] * dirs, 0.0)
    hidden = np.where(hit[..., None], origin + t_last[..., None] * dirs, 0.0)
    visible = np.clip(visible, 0.0, 1.0)
    hidden = np.clip(hidden, 0.0, 1.0)

    h, w = camera.resolution
    if background == "white":
        rgb = np.ones((h, w, 3))
    elif background == "noise":
        if rng is None:
            raise ValueError("noise background needs an rng")
        rgb = rng.uniform(0.0, 1.0, size=(h, w, 3))
    else:
        raise ValueError(f"unknown background {background!r}")
    rgb[hit] = shape.color(visible[hit])
    return ViewSample(rgb, NocsMap(visible, hit), NocsMap(hidden, hit), hit.copy(), camera)
