"""Turn a trained model and images into textured per-view meshes through the
learned chart: unwrap the predicted foreground into uv space, texture the
occupied uv cells from the image, and evaluate the surface network on the
occupied cells.

Charts here are channel-last ``(H, W, 2)`` arrays holding (u, v); uv cell
``(row, col)`` of an ``R x R`` grid covers ``v`` in ``[row/R, (row+1)/R)`` and
``u`` in ``[col/R, (col+1)/R)``.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
import torch

from .errors import IncompatibleCheckpointError, ShapeMismatchError
from .synthcam.render import NocsMap

UV_GRAD_THRESH = 0.05
DISCONTINUITY_THRESHOLD = 0.05
OUTLIER_THRESHOLD = 0.02
OUTLIER_PRESETS = {"chair": 0.03, "default": 0.02}


@dataclass
class Unwrapped:
    """Upsampled foreground samples with their chart coordinates (and colors)."""
    mask: np.ndarray  # (fH, fW) bool
    uv: np.ndarray  # (fH, fW, 2)
    rgb: Optional[np.ndarray] = None  # (fH, fW, 3)

    @property
    def samples_uv(self):
        return self.uv[self.mask]

    @property
    def samples_rgb(self):
        return None if self.rgb is None else self.rgb[self.mask]


@dataclass
class ChartOccupancy:
    grid: np.ndarray  # (R, R) bool
    source: np.ndarray  # (R, R) flat index of the upsampled pixel splatted there, -1 if none
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return self.grid.shape[0]

    @property
    def n_occupied(self):
        return int(self.grid.sum())

    def cell_uv(self):
        """uv centers of occupied cells, in row-major cell order, and the cells."""
        cells = np.argwhere(self.grid)
        r = self.resolution
        uv = np.stack([(cells[:, 1] + 0.5) / r, (cells[:, 0] + 0.5) / r], axis=1)
        return uv, cells


@dataclass
class UvMesh:
    uv: np.ndarray  # (N, 2)
    xyz: np.ndarray  # (N, 3)
    rgb: np.ndarray  # (N, 3)
    edges: np.ndarray  # (E, 2)
    faces: np.ndarray  # (F, 3)
    cells: np.ndarray  # (N, 2) grid row, col of each vertex
    view_id: str = ""

    @property
    def n_vertices(self):
        return len(self.xyz)

    def edge_lengths(self):
        if len(self.edges) == 0:
            return np.zeros(0)
        return np.linalg.norm(self.xyz[self.edges[:, 0]] - self.xyz[self.edges[:, 1]], axis=1)

    def to_obj(self, material=None):
        """OBJ text; ``material`` names an ``.mtl`` file (without suffix) to reference."""
        lines = []
        if material:
            lines.append(f"mtllib {material}.mtl")
            lines.append("usemtl chart")
        lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.xyz]
        lines += [f"vt {u:.6f} {1.0 - v:.6f}" for u, v in self.uv]
        lines += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in f) for f in self.faces]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# unwrapping


def upsample_chart(mask, chart, factor=4, uv_grad_thresh=UV_GRAD_THRESH, image=None):
    """Upsample mask and chart by ``factor`` with discontinuity-aware bilinear weights.

    An upsampled pixel takes the mask of its nearest source pixel. Its uv is
    the bilinear blend of the surrounding foreground source pixels whose uv
    lies within ``uv_grad_thresh`` of the nearest one, so values are never
    averaged across chart seams.
    """
    mask = np.asarray(mask, dtype=bool)
    chart = np.asarray(chart, dtype=np.float64)
    if chart.shape[:2] != mask.shape or chart.shape[2] != 2:
        raise ShapeMismatchError(f"chart {chart.shape} does not match mask {mask.shape}")
    h, w = mask.shape
    fh, fw = h * factor, w * factor
    # upsampled pixel centers in source pixel-index coordinates
    ys = (np.arange(fh) + 0.5) / factor - 0.5
    xs = (np.arange(fw) + 0.5) / factor - 0.5
    y, x = np.meshgrid(ys, xs, indexing="ij")
    near_r = np.clip(np.floor(y + 0.5).astype(int), 0, h - 1)
    near_c = np.clip(np.floor(x + 0.5).astype(int), 0, w - 1)
    up_mask = mask[near_r, near_c]
    ref = chart[near_r, near_c]
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    acc = np.zeros((fh, fw, 2))
    acc_rgb = None if image is None else np.zeros((fh, fw, 3))
    wsum = np.zeros((fh, fw))
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r = np.clip(y0 + dy, 0, h - 1)
        c = np.clip(x0 + dx, 0, w - 1)
        wt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
        uv = chart[r, c]
        ok = mask[r, c] & (np.abs(uv - ref).max(axis=-1) < uv_grad_thresh)
        wt = np.where(ok, wt, 0.0)
        acc += wt[..., None] * uv
        if acc_rgb is not None:
            acc_rgb += wt[..., None] * image[r, c]
        wsum += wt
    fallback = wsum <= 0
    wsum = np.where(fallback, 1.0, wsum)
    up_uv = np.where(fallback[..., None], ref, acc / wsum[..., None])
    up_uv[~up_mask] = 0.0
    up_rgb = None
    if image is not None:
        up_rgb = np.where(fallback[..., None], image[near_r, near_c], acc_rgb / wsum[..., None])
        up_rgb[~up_mask] = 0.0
    return Unwrapped(up_mask, up_uv, up_rgb)


def unwrap_mask(mask, chart, upsample_factor=4, uv_res=128, final_res=512,
                uv_grad_thresh=UV_GRAD_THRESH, closing_iterations=2):
    """uv-space foreground: upsample, splat into ``uv_res`` cells, enlarge to ``final_res``, close."""
    up = upsample_chart(mask, chart, upsample_factor, uv_grad_thresh)
    meta = {"upsample_factor": upsample_factor, "uv_res": uv_res, "final_res": final_res,
            "uv_grad_thresh": uv_grad_thresh, "closing_iterations": closing_iterations}
    grid = np.zeros((final_res, final_res), dtype=bool)
    source = np.full((final_res, final_res), -1, dtype=np.int64)
    flat = np.flatnonzero(up.mask.ravel())
    if len(flat) == 0:
        return ChartOccupancy(grid, source, meta)
    uv = up.uv.reshape(-1, 2)[flat]
    cell_c = np.clip(np.floor(uv[:, 0] * uv_res).astype(int), 0, uv_res - 1)
    cell_r = np.clip(np.floor(uv[:, 1] * uv_res).astype(int), 0, uv_res - 1)
    coarse = np.zeros((uv_res, uv_res), dtype=bool)
    coarse[cell_r, cell_c] = True
    coarse_src = np.full((uv_res, uv_res), -1, dtype=np.int64)
    coarse_src[cell_r, cell_c] = flat  # later pixels overwrite earlier ones
    scale = final_res // uv_res
    if scale * uv_res != final_res:
        raise ShapeMismatchError("final_res must be a multiple of uv_res")
    grid = np.kron(coarse, np.ones((scale, scale), dtype=bool))
    source = np.kron(coarse_src, np.ones((scale, scale), dtype=np.int64))
    source[source < 0] = -1
    if closing_iterations > 0:
        # pad so closing does not erode blobs touching the border
        pad = closing_iterations + 1
        padded = np.pad(grid, pad)
        padded = ndimage.binary_closing(padded, structure=np.ones((3, 3), bool),
                                        iterations=closing_iterations)
        grid = padded[pad:-pad, pad:-pad]
    return ChartOccupancy(grid, source, meta)


# ---------------------------------------------------------------------------
# outliers and texture


def remove_outliers(points, t=OUTLIER_THRESHOLD):
    """Indices of points whose nearest other point lies within ``t``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        return np.zeros(0, dtype=np.int64)
    dist, _ = cKDTree(points).query(points, k=2)
    return np.flatnonzero(dist[:, 1] <= t)


def idw_interpolate(src_uv, src_rgb, query_uv, k=4):
    """Inverse-distance-weighted mean of the ``k`` nearest sources for each query."""
    src_uv = np.asarray(src_uv, dtype=np.float64).reshape(-1, 2)
    src_rgb = np.asarray(src_rgb, dtype=np.float64).reshape(len(src_uv), -1)
    query_uv = np.asarray(query_uv, dtype=np.float64).reshape(-1, 2)
    if len(query_uv) == 0 or len(src_uv) == 0:
        return np.zeros((len(query_uv), src_rgb.shape[1]))
    k = min(k, len(src_uv))
    dist, idx = cKDTree(src_uv).query(query_uv, k=k)
    dist, idx = dist.reshape(len(query_uv), k), idx.reshape(len(query_uv), k)
    exact = dist[:, 0] == 0
    with np.errstate(divide="ignore"):
        wt = np.where(exact[:, None], 0.0, 1.0 / dist)
    wt[exact, 0] = 1.0
    wt /= wt.sum(axis=1, keepdims=True)
    return np.einsum("qk,qkc->qc", wt, src_rgb[idx])


def texture_chart(image, chart, mask, occupancy: ChartOccupancy, k=4):
    """Per-cell colors (R, R, 3) by k-nearest inverse-distance interpolation in uv space."""
    meta = occupancy.meta
    up = upsample_chart(mask, chart, meta.get("upsample_factor", 4),
                        meta.get("uv_grad_thresh", UV_GRAD_THRESH), image=np.asarray(image, float))
    r = occupancy.resolution
    tex = np.zeros((r, r, 3))
    uv, cells = occupancy.cell_uv()
    if len(cells):
        tex[cells[:, 0], cells[:, 1]] = idw_interpolate(up.samples_uv, up.samples_rgb, uv, k)
    return tex


# ---------------------------------------------------------------------------
# meshing


def _torch_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def evaluate_surface(model, code_input, uv, chunk=65536):
    code = torch.as_tensor(np.asarray(code_input), dtype=_torch_dtype(model)).reshape(1, -1)
    out = []
    for s in range(0, len(uv), chunk):
        p = torch.as_tensor(uv[s:s + chunk], dtype=code.dtype)[None]
        out.append(model.surface_at(code, p)[0].double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 3))


def extract_mesh(model, code_input, occupancy: ChartOccupancy, colors=None,
                 discontinuity_threshold=DISCONTINUITY_THRESHOLD, outlier_t=OUTLIER_THRESHOLD,
                 view_id=""):
    """Mesh over occupied uv cells; edges and faces only where 3D steps stay below the threshold."""
    uv, cells = occupancy.cell_uv()
    empty = UvMesh(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 2), np.int64), np.zeros((0, 3), np.int64),
                   np.zeros((0, 2), np.int64), view_id)
    if len(cells) == 0:
        return empty
    xyz = evaluate_surface(model, code_input, uv)
    keep = remove_outliers(xyz, outlier_t)
    if len(keep) == 0:
        return empty
    uv, cells, xyz = uv[keep], cells[keep], xyz[keep]
    rgb = np.zeros((len(keep), 3)) if colors is None else colors[cells[:, 0], cells[:, 1]]
    r = occupancy.resolution
    index = np.full((r, r), -1, dtype=np.int64)
    index[cells[:, 0], cells[:, 1]] = np.arange(len(cells))

    def short(a, b):
        ok = (a >= 0) & (b >= 0)
        ok[ok] = np.linalg.norm(xyz[a[ok]] - xyz[b[ok]], axis=1) < discontinuity_threshold
        return ok

    edges = []
    for a, b in ((index[:, :-1], index[:, 1:]), (index[:-1, :], index[1:, :])):
        ok = short(a, b)
        edges.append(np.stack([a[ok], b[ok]], axis=1))
    edges = np.concatenate(edges)
    # 2x2 blocks: p q / s t, split along p-t
    p, q, s_, t = index[:-1, :-1], index[:-1, 1:], index[1:, :-1], index[1:, 1:]
    pq, pt, qt = short(p, q), short(p, t), short(q, t)
    ps, st = short(p, s_), short(s_, t)
    tri1 = pq & qt & pt
    tri2 = ps & st & pt
    faces = np.concatenate([np.stack([p[tri1], t[tri1], q[tri1]], axis=1),
                            np.stack([p[tri2], s_[tri2], t[tri2]], axis=1)])
    return UvMesh(uv, xyz, rgb, edges.astype(np.int64), faces.astype(np.int64), cells, view_id)


# ---------------------------------------------------------------------------
# whole pipeline


@dataclass
class ViewReconstruction:
    mesh: UvMesh
    occupancy: ChartOccupancy
    texture: np.ndarray  # (R, R, 3)
    chart: np.ndarray  # (H, W, 2)
    mask: np.ndarray  # (H, W)


def _image_batch(images, model):
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(arr, dtype=_torch_dtype(model)).permute(0, 3, 1, 2).contiguous()


def _check_mode(model, mode):
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    if (mode == "multi") != bool(model.config.multiview):
        kind = "multi-view" if model.config.multiview else "single-view"
        raise IncompatibleCheckpointError(f"{mode} mode needs a matching checkpoint, got a {kind} model")


@torch.no_grad()
def run_views(model, images, mode="single"):
    """Decoder outputs and SP code inputs for ``V`` images, as numpy arrays."""
    _check_mode(model, mode)
    model.eval()
    x = _image_batch(images, model)
    out, code = model.run(x[None] if mode == "multi" else x)
    return out, code


@torch.no_grad()
def predict_nocs_maps(model, images, mode="single"):
    """Per-view NOCS maps from the surface network at every predicted foreground pixel.

    Returns a list of ``(visible, hidden)`` maps; ``hidden`` is None unless the
    model predicts the hidden layer.
    """
    out, code = run_views(model, images, mode)
    maps = []
    for i in range(out.chart.shape[0]):
        mask = (out.mask_logits[i] > 0).numpy()
        h, w = mask.shape
        layers = []
        for chart in (out.chart[i], out.chart_hidden[i] if out.chart_hidden is not None else None):
            if chart is None:
                layers.append(None)
                continue
            uv = chart.reshape(2, -1).T[torch.from_numpy(mask.ravel())]
            xyz = model.surface_at(code[i:i + 1], uv[None])[0].double().numpy()
            coords = np.zeros((h * w, 3))
            coords[mask.ravel()] = xyz
            layers.append(NocsMap(coords.reshape(h, w, 3), mask))
        maps.append(tuple(layers))
    return maps


def reconstruct(model, images, mode="single", upsample_factor=4, uv_res=128, final_res=512,
                uv_grad_thresh=UV_GRAD_THRESH, k=4, discontinuity_threshold=DISCONTINUITY_THRESHOLD,
                outlier_t=OUTLIER_THRESHOLD, view_ids=None) -> List[ViewReconstruction]:
    """One textured mesh per input view; multi mode evaluates with fused codes."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    out, code = run_views(model, imgs, mode)
    result = []
    for i in range(len(imgs)):
        mask = (out.mask_logits[i] > 0).numpy()
        chart = out.chart[i].permute(1, 2, 0).double().numpy()
        occ = unwrap_mask(mask, chart, upsample_factor, uv_res, final_res, uv_grad_thresh)
        tex = texture_chart(imgs[i], chart, mask, occ, k)
        vid = str(i) if view_ids is None else str(view_ids[i])
        mesh = extract_mesh(model, code[i].numpy(), occ, tex, discontinuity_threshold,
                            outlier_t, view_id=vid)
        result.append(ViewReconstruction(mesh, occ, tex, chart, mask))
    return result


def chart_image(chart, mask):
    """RG visualization of a chart: u in red, v in green, background black."""
    img = np.zeros(chart.shape[:2] + (3,))
    img[..., 0] = chart[..., 0]
    img[..., 1] = chart[..., 1]
    img[~mask] = 0.0
    return img


def _write_rgb(path, rgb):
    data = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise OSError(f"could not write {path}")


def write_reconstruction(views: List[ViewReconstruction], out_dir):
    """``mesh_<v>.obj`` (+ ``.mtl``), ``texture_<v>.png`` and ``chart_<v>.png`` per view."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in views:
        vid = rec.mesh.view_id
        tex_name = f"texture_{vid}.png"
        _write_rgb(out / tex_name, rec.texture)
        (out / f"mesh_{vid}.obj").write_text(rec.mesh.to_obj(f"mesh_{vid}"))
        (out / f"mesh_{vid}.mtl").write_text(f"newmtl chart\nmap_Kd {tex_name}\n")
        _write_rgb(out / f"chart_{vid}.png", chart_image(rec.chart, rec.mask))
        written += [f"mesh_{vid}.obj", tex_name, f"chart_{vid}.png"]
    return written
