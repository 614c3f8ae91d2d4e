"""Procedural shapes and ray-cast multi-view NOCS datasets."""
from .camera import Camera, sample_camera
from .dataset import Dataset, DatasetManifest, build_dataset, load_dataset
from .render import NocsMap, ViewSample, render_view
from .shapes import FAMILIES, CanonicalShape, generate_shape

__all__ = [
    "Camera", "sample_camera", "Dataset", "DatasetManifest", "build_dataset",
    "load_dataset", "NocsMap", "ViewSample", "render_view", "FAMILIES",
    "CanonicalShape", "generate_shape",
]
