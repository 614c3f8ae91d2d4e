"""On-disk multi-view datasets.

Layout::

    <root>/manifest.json
    <root>/<shape_id>/shape.json
    <root>/<shape_id>/view_<k>_rgb.png       8-bit RGB
    <root>/<shape_id>/view_<k>_nocs_v.png    16-bit RGB, round(coord * 65535)
    <root>/<shape_id>/view_<k>_nocs_h.png    16-bit RGB
    <root>/<shape_id>/view_<k>_mask.png      8-bit, 255 = foreground
    <root>/<shape_id>/view_<k>_camera.json
"""
from dataclasses import dataclass, field
import hashlib
import json
import logging
import math
from pathlib import Path

import cv2
import numpy as np

from ..errors import ConfigurationError
from .camera import Camera, sample_camera
from .render import NocsMap, ViewSample, render_view
from .shapes import FAMILIES, CanonicalShape, generate_shape

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
TRAIN_VIEWS = 5
COVERAGE_BAND = (0.10, 0.90)


@dataclass
class DatasetManifest:
    root: Path
    config: dict
    files: dict  # relative path -> sha256
    views: list  # per-view records
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "version": MANIFEST_VERSION,
            "config": self.config,
            "files": self.files,
            "views": self.views,
            "warnings": self.warnings,
        }

    @classmethod
    def load(cls, root):
        root = Path(root)
        with open(root / "manifest.json") as f:
            d = json.load(f)
        return cls(root, d["config"], d["files"], d["views"], d.get("warnings", []))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_png(path, image):
    # cv2 stores channels as BGR
    if image.ndim == 3:
        image = image[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(image)):
        raise OSError(f"could not write {path}")


def _read_png(path):
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise OSError(f"could not read {path}")
    if image.ndim == 3:
        image = image[..., ::-1]
    return image


def quantize_nocs(coords):
    return np.round(np.clip(coords, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_view(view: ViewSample, folder, k):
    folder = Path(folder)
    stem = f"view_{k}"
    _write_png(folder / f"{stem}_rgb.png", np.round(np.clip(view.rgb, 0, 1) * 255).astype(np.uint8))
    _write_png(folder / f"{stem}_nocs_v.png", quantize_nocs(view.nocs_visible.coords))
    _write_png(folder / f"{stem}_nocs_h.png", quantize_nocs(view.nocs_hidden.coords))
    _write_png(folder / f"{stem}_mask.png", np.where(view.mask, 255, 0).astype(np.uint8))
    (folder / f"{stem}_camera.json").write_text(view.camera.to_json())
    return [f"{stem}_{suffix}" for suffix in
            ("rgb.png", "nocs_v.png", "nocs_h.png", "mask.png", "camera.json")]


def read_view(folder, k, shape_id=""):
    folder = Path(folder)
    stem = f"view_{k}"
    rgb = _read_png(folder / f"{stem}_rgb.png").astype(np.float64) / 255.0
    mask = _read_png(folder / f"{stem}_mask.png") > 127
    nocs_v = _read_png(folder / f"{stem}_nocs_v.png").astype(np.float64) / 65535.0
    nocs_h = _read_png(folder / f"{stem}_nocs_h.png").astype(np.float64) / 65535.0
    camera = Camera.from_dict(json.loads((folder / f"{stem}_camera.json").read_text()))
    return ViewSample(rgb, NocsMap(nocs_v, mask), NocsMap(nocs_h, mask), mask, camera,
                      shape_id=shape_id, view_id=str(k))


def build_dataset(n_shapes, views_per_shape, resolution, seed, out_dir,
                  families=FAMILIES, fov=math.radians(30.0), radius_range=(1.5, 2.5),
                  background="white", train_views=TRAIN_VIEWS, max_tries=100):
    """Render ``n_shapes`` procedural shapes from ``views_per_shape`` random cameras each.

    Cameras whose foreground coverage falls outside ``COVERAGE_BAND`` are
    resampled. Output is bit-identical for identical arguments.
    """
    if n_shapes < 1 or views_per_shape < 1:
        raise ConfigurationError("n_shapes and views_per_shape must be >= 1")
    resolution = (int(resolution[0]), int(resolution[1]))
    if min(resolution) < 1:
        raise ConfigurationError(f"invalid resolution {resolution}")
    families = tuple(families)
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {fam!r}")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"dataset directory {root} is not writable: {exc}") from exc

    config = {
        "n_shapes": int(n_shapes),
        "views_per_shape": int(views_per_shape),
        "resolution": list(resolution),
        "seed": int(seed),
        "families": list(families),
        "fov": float(fov),
        "radius_range": [float(r) for r in radius_range],
        "background": background,
    }
    warnings = []
    if views_per_shape < train_views:
        warnings.append(f"views_per_shape={views_per_shape} is below the {train_views} "
                        "views sampled per training iteration")
    files, records = {}, []
    for i in range(n_shapes):
        shape_id = f"shape_{i:03d}"
        family = families[i % len(families)]
        shape = generate_shape(family, seed * 10007 + i)
        folder = root / shape_id
        folder.mkdir(exist_ok=True)
        (folder / "shape.json").write_text(json.dumps(shape.to_dict(), indent=2, sort_keys=True))
        names = ["shape.json"]
        rng = np.random.default_rng([int(seed), i])
        for k in range(views_per_shape):
            for attempt in range(max_tries):
                cam = sample_camera(rng, resolution, fov, radius_range)
                view = render_view(shape, cam, background=background, rng=rng)
                coverage = float(view.mask.mean())
                if COVERAGE_BAND[0] <= coverage <= COVERAGE_BAND[1]:
                    break
            else:
                warnings.append(f"{shape_id} view {k}: coverage {coverage:.3f} outside band")
            names += write_view(view, folder, k)
            records.append({"shape_id": shape_id, "view_id": str(k), "family": family,
                            "coverage": coverage, "camera_attempts": attempt + 1})
        for name in names:
            rel = f"{shape_id}/{name}"
            files[rel] = _sha256(root / rel)
        log.info("rendered %s (%s)", shape_id, family)
    manifest = DatasetManifest(root, config, files, records, warnings)
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest


@dataclass
class Dataset:
    """All views of a dataset, grouped by shape, loaded into memory."""
    root: Path
    manifest: DatasetManifest
    shapes: dict  # shape_id -> list of ViewSample
    families: dict  # shape_id -> family

    @property
    def shape_ids(self):
        return sorted(self.shapes)

    def views(self):
        return [v for sid in self.shape_ids for v in self.shapes[sid]]

    def __len__(self):
        return sum(len(v) for v in self.shapes.values())

    def load_shape(self, shape_id):
        d = json.loads((self.root / shape_id / "shape.json").read_text())
        return CanonicalShape.from_dict(d)


def load_dataset(root, verify=False):
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise ConfigurationError(f"no manifest.json under {root}")
    manifest = DatasetManifest.load(root)
    if verify:
        for rel, digest in manifest.files.items():
            if _sha256(root / rel) != digest:
                raise ConfigurationError(f"checksum mismatch for {rel}")
    shapes, families = {}, {}
    for rec in manifest.views:
        sid = rec["shape_id"]
        shapes.setdefault(sid, []).append(read_view(root / sid, rec["view_id"], sid))
        families[sid] = rec["family"]
    return Dataset(root, manifest, shapes, families)


def dataset_checksum(root):
    """Digest over every file the manifest lists plus the manifest itself."""
    root = Path(root)
    h = hashlib.sha256()
    manifest = DatasetManifest.load(root)
    for rel in sorted(manifest.files):
        h.update(rel.encode())
        h.update(_sha256(root / rel).encode())
    h.update(_sha256(root / "manifest.json").encode())
    return h.hexdigest()
