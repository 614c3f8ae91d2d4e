"""Surface quality metrics computed on NOCS maps.

All reconstructions are compared as NOCS maps seen from the ground-truth
camera: two-way Chamfer error (squared distances), per-pixel correspondence
error, cross-view consistency error and a discontinuity score built from
histograms of 3D jumps between 4-connected neighbours.
"""
from dataclasses import dataclass, field
import csv
import io
import json
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .synthcam.render import NocsMap

DISCONTINUITY_THRESHOLD = 0.05
N_BINS = 20
BIN_EDGES = np.linspace(DISCONTINUITY_THRESHOLD, math.sqrt(3.0), N_BINS + 1)
CONSISTENCY_EPS = 1e-3
DISPLAY_SCALE = 1e3
METRIC_NAMES = ("E_rec", "E_corr", "E_cons", "S_cont")
# published averages over car/chair/plane, kept only as context in reports
REFERENCE_VALUES = {"single_view_E_rec": 1.73e-3, "multi_view_E_rec": 1.52e-3}


class MetricUndefined(ValueError):
    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


def _points(x):
    if isinstance(x, NocsMap):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# surface -> NOCS map


def densify_triangles(vertices, faces, spacing):
    """Barycentric samples on every triangle, at most ``spacing`` apart along edges."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return vertices.copy()
    tri = vertices[faces]
    edge = np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=-1).max(axis=1)
    out = [vertices]
    n_sub = np.maximum(1, np.ceil(edge / spacing)).astype(int)
    for n in np.unique(n_sub):
        t = tri[n_sub == n]
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        a = (i[keep] / n)[None, :, None]
        b = (j[keep] / n)[None, :, None]
        pts = t[:, None, 0] * (1 - a - b) + t[:, None, 1] * a + t[:, None, 2] * b
        out.append(pts.reshape(-1, 3))
    return np.concatenate(out)


def surface_to_nocs_map(surface, camera, resolution=None, center_radius=0.06, spacing=None,
                        depth_gap=0.005, chunk=1_000_000):
    """Z-buffered point splatting of a surface into a NOCS map.

    ``surface`` is an (N, 3) point array, a ``(vertices, faces)`` pair or an
    object with ``xyz`` and ``faces`` attributes. Meshes are densified first.

    Samples projecting within ``center_radius`` pixels of a pixel center are
    split into surface layers wherever consecutive depths jump by more than
    ``depth_gap``; the sample of the front layer closest to the center is
    kept. Layering instead of a plain depth tolerance keeps grazing surfaces,
    whose depth varies strongly across the disk, intact. Pixels with an
    empty center disk fall back to the front-most sample anywhere inside
    them. Sample spacing should stay well below the pixel footprint; 8e-4
    reproduces ray-cast maps at 64x64 to within 5e-3 on 99% of pixels.
    """
    if resolution is None:
        resolution = camera.resolution
    h, w = resolution
    if spacing is None:
        # four samples per 1/512 of edge length
        spacing = 1.0 / 2048.0
    if hasattr(surface, "xyz"):
        faces = getattr(surface, "faces", None)
        pts = surface.xyz if faces is None or len(faces) == 0 else \
            densify_triangles(surface.xyz, faces, spacing)
    elif isinstance(surface, tuple):
        pts = densify_triangles(surface[0], surface[1], spacing)
    else:
        pts = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    if tuple(resolution) != tuple(camera.resolution):
        from .synthcam.camera import Camera
        camera = Camera(camera.position, camera.look_at, camera.up, camera.fov, (h, w))

    any_depth = np.full(h * w, np.inf)
    any_xyz = np.zeros((h * w, 3))
    disk = []
    for start in range(0, len(pts), chunk):
        p = pts[start:start + chunk]
        rc, depth = camera.project(p)
        ok = (depth > 0) & np.all(np.isfinite(rc), axis=1)
        ok &= (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
        if not ok.any():
            continue
        p, rc, depth = p[ok], rc[ok], depth[ok]
        pix = np.floor(rc).astype(np.int64)
        pid = pix[:, 0] * w + pix[:, 1]
        off = np.linalg.norm(rc - (pix + 0.5), axis=1)
        # whole-pixel z-buffer
        order = np.lexsort((depth, pid))
        first = _group_starts(pid[order])
        chosen = order[first]
        better = depth[chosen] < any_depth[pid[chosen]]
        any_depth[pid[chosen][better]] = depth[chosen][better]
        any_xyz[pid[chosen][better]] = p[chosen][better]
        near = off <= center_radius
        disk.append((pid[near], depth[near], off[near], p[near]))

    coords = any_xyz
    valid = np.isfinite(any_depth)
    if disk:
        pid, depth, off, p = (np.concatenate(x) for x in zip(*disk))
        order = np.lexsort((depth, pid))
        pid, depth, off, p = pid[order], depth[order], off[order], p[order]
        new_layer = _group_starts(pid)
        new_layer[1:] |= np.diff(depth) > depth_gap
        layer_id = np.cumsum(new_layer) - 1
        # most central sample of every layer, then the front layer per pixel
        o2 = np.lexsort((off, layer_id))
        best = o2[_group_starts(layer_id[o2])]
        front = best[_group_starts(pid[best])]
        pick = np.full(h * w, -1)
        pick[pid[front]] = front
        has = pick >= 0
        coords = coords.copy()
        coords[has] = p[pick[has]]
        valid = valid | has
    return NocsMap(np.clip(coords, 0.0, 1.0).reshape(h, w, 3), valid.reshape(h, w))


def _group_starts(sorted_keys):
    starts = np.ones(len(sorted_keys), dtype=bool)
    starts[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return starts


# ---------------------------------------------------------------------------
# metrics


def recon_error(pred, gt):
    """Two-way Chamfer distance with squared Euclidean distances."""
    p, g = _points(pred), _points(gt)
    if len(p) == 0 or len(g) == 0:
        raise MetricUndefined("empty_prediction" if len(p) == 0 else "empty_ground_truth")
    _, to_p = cKDTree(p).query(g)
    _, to_g = cKDTree(g).query(p)
    d_gp = ((g - p[to_p]) ** 2).sum(axis=1)
    d_pg = ((p - g[to_g]) ** 2).sum(axis=1)
    return float(d_gp.mean() + d_pg.mean())


def corr_error(pred: NocsMap, gt: NocsMap):
    """Mean squared distance at pixels that are foreground in both maps."""
    both = pred.valid & gt.valid
    if not both.any():
        raise MetricUndefined("empty_mask_intersection")
    diff = pred.coords[both] - gt.coords[both]
    return float((diff ** 2).sum(axis=1).mean())


def correspondence_pairs(gt_a: NocsMap, gt_b: NocsMap, eps, valid_a=None, valid_b=None):
    """All pixel pairs (flat indices) whose ground-truth points lie closer than ``eps``."""
    va = gt_a.valid if valid_a is None else valid_a
    vb = gt_b.valid if valid_b is None else valid_b
    ia, ib = np.flatnonzero(va), np.flatnonzero(vb)
    if len(ia) == 0 or len(ib) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    ya = gt_a.coords.reshape(-1, 3)[ia]
    yb = gt_b.coords.reshape(-1, 3)[ib]
    sdm = cKDTree(ya).sparse_distance_matrix(cKDTree(yb), eps, output_type="ndarray")
    if len(sdm) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    i, j = sdm["i"].astype(np.int64), sdm["j"].astype(np.int64)
    dist = np.linalg.norm(ya[i] - yb[j], axis=1)
    keep = dist < eps
    order = np.lexsort((j[keep], i[keep]))
    return ia[i[keep]][order], ib[j[keep]][order]


def consistency_terms(pred_maps, gt_maps, eps=CONSISTENCY_EPS):
    """Squared prediction gaps of corresponding pixels, per view pair ``(a, b, gaps)``."""
    terms = []
    for a in range(len(gt_maps)):
        for b in range(a + 1, len(gt_maps)):
            va = gt_maps[a].valid & pred_maps[a].valid
            vb = gt_maps[b].valid & pred_maps[b].valid
            ia, ib = correspondence_pairs(gt_maps[a], gt_maps[b], eps, va, vb)
            xa = pred_maps[a].coords.reshape(-1, 3)[ia]
            xb = pred_maps[b].coords.reshape(-1, 3)[ib]
            terms.append((a, b, ((xa - xb) ** 2).sum(axis=1)))
    return terms


def consistency_error(pred_maps, gt_maps, eps=CONSISTENCY_EPS, view=None):
    """Mean squared distance between predictions of corresponding pixels, pooled over view pairs.

    With ``view`` set, only pairs involving that view index are pooled.
    """
    if len(gt_maps) < 2:
        raise MetricUndefined("fewer_than_two_views")
    terms = consistency_terms(pred_maps, gt_maps, eps)
    gaps = [g for a, b, g in terms if view is None or view in (a, b)]
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    if len(gaps) == 0:
        raise MetricUndefined("no_correspondences")
    return float(gaps.mean())


@dataclass
class DiscontinuityHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


def neighbor_distances(nocs: NocsMap):
    """3D distances of all 4-connected pixel pairs that are valid on both ends."""
    c, v = nocs.coords, nocs.valid
    horiz = v[:, :-1] & v[:, 1:]
    vert = v[:-1, :] & v[1:, :]
    dh = np.linalg.norm(c[:, 1:] - c[:, :-1], axis=-1)[horiz]
    dv = np.linalg.norm(c[1:, :] - c[:-1, :], axis=-1)[vert]
    return np.concatenate([dh, dv])


def discontinuity_histogram(nocs: NocsMap):
    d = neighbor_distances(nocs)
    d = d[d >= DISCONTINUITY_THRESHOLD]
    counts, _ = np.histogram(d, bins=BIN_EDGES)
    return DiscontinuityHistogram(BIN_EDGES.copy(), counts.astype(np.int64))


def discontinuity_score(pred_hist, gt_hist):
    """sum_i h_i g_i / (sum h * sum g).

    An all-zero histogram on exactly one side scores 0, on both sides 1.
    """
    h = np.asarray(getattr(pred_hist, "counts", pred_hist), dtype=np.float64)
    g = np.asarray(getattr(gt_hist, "counts", gt_hist), dtype=np.float64)
    sh, sg = h.sum(), g.sum()
    if sh == 0 and sg == 0:
        return 1.0
    if sh == 0 or sg == 0:
        return 0.0
    return float((h * g).sum() / (sh * sg))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    records: list
    aggregates: dict
    config: dict
    missing: list = field(default_factory=list)

    def to_dict(self):
        return {
            "records": self.records,
            "aggregates": self.aggregates,
            "config": self.config,
            "missing": self.missing,
            "reference_values": REFERENCE_VALUES,
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (out_dir / "report.csv").write_text(self.to_csv())

    def to_csv(self):
        columns = ["shape_id", "view_id", "family"]
        metric_cols = [k for k in ("E_rec", "E_corr", "E_cons", "S_cont", "E_rec_hidden")
                       if any(k in r for r in self.records)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns + metric_cols + ["missing"])
        for r in self.records:
            row = [r.get(c, "") for c in columns]
            row += ["" if r.get(k) is None else repr(r[k]) for k in metric_cols]
            row.append(";".join(f"{k}:{v}" for k, v in sorted(r.get("missing", {}).items())))
            writer.writerow(row)
        return buf.getvalue()

    def mean(self, metric, family=None):
        key = "overall" if family is None else family
        return self.aggregates[key][metric]["mean"]


def _aggregate(records, metrics):
    groups = {"overall": records}
    for r in records:
        groups.setdefault(r["family"], []).append(r)
    out = {}
    for name, recs in groups.items():
        out[name] = {}
        for m in metrics:
            vals = [r[m] for r in recs if r.get(m) is not None]
            mean = float(np.mean(vals)) if vals else None
            entry = {"mean": mean, "count": len(vals), "missing": len(recs) - len(vals)}
            if mean is not None and m != "S_cont":
                entry["display_x1e3"] = mean * DISPLAY_SCALE
            out[name][m] = entry
    return out


def _as_map(pred, camera):
    if pred is None or isinstance(pred, NocsMap):
        return pred
    return surface_to_nocs_map(pred, camera)


def evaluate(pred_surfaces, dataset, mode="single", eps=CONSISTENCY_EPS):
    """Per-view metrics for every dataset view, aggregated per family and overall.

    ``pred_surfaces`` maps ``(shape_id, view_id)`` to a predicted NOCS map, a
    surface accepted by :func:`surface_to_nocs_map`, or a dict with
    ``"visible"`` and optionally ``"hidden"`` entries.
    """
    records, missing = [], []
    hidden_present = False
    for sid in dataset.shape_ids:
        views = dataset.shapes[sid]
        preds = []
        for v in views:
            p = pred_surfaces.get((sid, v.view_id))
            if isinstance(p, dict):
                vis, hid = p.get("visible"), p.get("hidden")
            else:
                vis, hid = p, None
            vis, hid = _as_map(vis, v.camera), _as_map(hid, v.camera)
            hidden_present |= hid is not None
            preds.append((vis, hid))
        have = [i for i, (vis, _) in enumerate(preds) if vis is not None]
        for i, v in enumerate(views):
            rec = {"shape_id": sid, "view_id": v.view_id, "family": dataset.families[sid],
                   "missing": {}}
            vis, hid = preds[i]
            if vis is None:
                for m in METRIC_NAMES:
                    rec[m] = None
                    rec["missing"][m] = "missing_prediction"
                missing.append({"shape_id": sid, "view_id": v.view_id})
                records.append(rec)
                continue
            gt = v.nocs_visible
            for name, fn in (("E_rec", lambda: recon_error(vis, gt)),
                             ("E_corr", lambda: corr_error(vis, gt)),
                             ("E_cons", lambda: consistency_error(
                                 [preds[j][0] for j in have], [views[j].nocs_visible for j in have],
                                 eps, view=have.index(i))),
                             ("S_cont", lambda: discontinuity_score(
                                 discontinuity_histogram(vis), discontinuity_histogram(gt)))):
                try:
                    rec[name] = fn()
                except MetricUndefined as exc:
                    rec[name] = None
                    rec["missing"][name] = exc.reason
            if hid is not None:
                try:
                    rec["E_rec_hidden"] = recon_error(hid, v.nocs_hidden)
                except MetricUndefined as exc:
                    rec["E_rec_hidden"] = None
                    rec["missing"]["E_rec_hidden"] = exc.reason
            records.append(rec)
    metrics = list(METRIC_NAMES) + (["E_rec_hidden"] if hidden_present else [])
    config = {"mode": mode, "eps": eps, "discontinuity_threshold": DISCONTINUITY_THRESHOLD,
              "bin_edges": BIN_EDGES.tolist(), "display_scale": DISPLAY_SCALE}
    return MetricsReport(records, _aggregate(records, metrics), config, missing)
