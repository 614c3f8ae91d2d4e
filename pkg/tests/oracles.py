"""Brute-force reference implementations used to check the vectorized code.

Everything here is written the slow, obvious way: explicit loops or full
pairwise distance matrices, no spatial trees.
"""
import math

import numpy as np

from surfchart.synthcam.render import NocsMap


def random_map(rng, h, w, fill=0.6, jumpy=False):
    """Random NOCS map; ``jumpy`` adds piecewise-constant regions with large jumps."""
    valid = rng.random((h, w)) < fill
    if jumpy:
        base = rng.random((h, w, 3)) * 0.02
        labels = rng.integers(0, 3, size=(h, w))
        offsets = rng.random((3, 3))
        coords = np.clip(base + offsets[labels], 0, 1)
    else:
        coords = rng.random((h, w, 3))
    return NocsMap(np.where(valid[..., None], coords, 0.0), valid)


def chamfer(p, g):
    p, g = np.asarray(p, float), np.asarray(g, float)
    d = ((p[:, None, :] - g[None, :, :]) ** 2).sum(-1)
    return d.min(axis=0).mean() + d.min(axis=1).mean()


def corr(pred, gt):
    total, n = 0.0, 0
    h, w = gt.valid.shape
    for r in range(h):
        for c in range(w):
            if pred.valid[r, c] and gt.valid[r, c]:
                total += float(((pred.coords[r, c] - gt.coords[r, c]) ** 2).sum())
                n += 1
    return total / n


def consistency(pred_maps, gt_maps, eps, view=None):
    gaps = []
    for a in range(len(gt_maps)):
        for b in range(a + 1, len(gt_maps)):
            if view is not None and view not in (a, b):
                continue
            ga, gb = gt_maps[a], gt_maps[b]
            pa, pb = pred_maps[a], pred_maps[b]
            fa = [i for i in range(ga.valid.size) if ga.valid.flat[i] and pa.valid.flat[i]]
            fb = [j for j in range(gb.valid.size) if gb.valid.flat[j] and pb.valid.flat[j]]
            ya, yb = ga.coords.reshape(-1, 3), gb.coords.reshape(-1, 3)
            xa, xb = pa.coords.reshape(-1, 3), pb.coords.reshape(-1, 3)
            for i in fa:
                for j in fb:
                    if math.dist(ya[i], yb[j]) < eps:
                        gaps.append(float(((xa[i] - xb[j]) ** 2).sum()))
    return sum(gaps) / len(gaps)


def histogram(nocs, threshold=0.05, n_bins=20):
    edges = [threshold + (math.sqrt(3) - threshold) * k / n_bins for k in range(n_bins + 1)]
    counts = [0] * n_bins
    h, w = nocs.valid.shape
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= h or c2 >= w or not (nocs.valid[r, c] and nocs.valid[r2, c2]):
                    continue
                d = math.dist(nocs.coords[r, c], nocs.coords[r2, c2])
                if d < threshold or d > edges[-1]:
                    continue
                k = min(n_bins - 1, int(np.searchsorted(edges, d, side="right")) - 1)
                counts[k] += 1
    return np.array(counts)


def score(h, g):
    sh, sg = sum(h), sum(g)
    if sh == 0 and sg == 0:
        return 1.0
    if sh == 0 or sg == 0:
        return 0.0
    return sum(float(a) * float(b) for a, b in zip(h, g)) / (float(sh) * float(sg))


def outliers(points, t):
    """Indices of points whose nearest other point is farther than ``t``."""
    points = np.asarray(points, float)
    keep = []
    for i in range(len(points)):
        d = [math.dist(points[i], points[j]) for j in range(len(points)) if j != i]
        if d and min(d) <= t:
            keep.append(i)
    return np.array(keep, dtype=np.int64)


def idw(src_uv, src_rgb, query, k):
    out = np.zeros((len(query), src_rgb.shape[1]))
    for q in range(len(query)):
        d = np.sqrt(((src_uv - query[q]) ** 2).sum(1))
        order = np.argsort(d, kind="stable")[:k]
        if d[order[0]] == 0:
            out[q] = src_rgb[order[0]]
            continue
        w = 1.0 / d[order]
        w = w / w.sum()
        out[q] = (w[:, None] * src_rgb[order]).sum(0)
    return out


def upsample(mask, chart, image, factor, thresh):
    """Per-pixel loop version of the seam-aware bilinear upsampling."""
    h, w = mask.shape
    fh, fw = h * factor, w * factor
    up_mask = np.zeros((fh, fw), bool)
    up_uv = np.zeros((fh, fw, 2))
    up_rgb = np.zeros((fh, fw, 3))
    for i in range(fh):
        for j in range(fw):
            y = (i + 0.5) / factor - 0.5
            x = (j + 0.5) / factor - 0.5
            nr = min(max(int(math.floor(y + 0.5)), 0), h - 1)
            nc = min(max(int(math.floor(x + 0.5)), 0), w - 1)
            if not mask[nr, nc]:
                continue
            up_mask[i, j] = True
            ref = chart[nr, nc]
            y0, x0 = math.floor(y), math.floor(x)
            fy, fx = y - y0, x - x0
            acc, acc_rgb, wsum = np.zeros(2), np.zeros(3), 0.0
            for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
                r = min(max(y0 + dy, 0), h - 1)
                c = min(max(x0 + dx, 0), w - 1)
                if not mask[r, c] or np.abs(chart[r, c] - ref).max() >= thresh:
                    continue
                wt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
                acc = acc + wt * chart[r, c]
                acc_rgb = acc_rgb + wt * image[r, c]
                wsum += wt
            if wsum > 0:
                up_uv[i, j] = acc / wsum
                up_rgb[i, j] = acc_rgb / wsum
            else:
                up_uv[i, j] = ref
                up_rgb[i, j] = image[nr, nc]
    return up_mask, up_uv, up_rgb


def texture(image, chart, mask, grid, factor, thresh, k):
    up_mask, up_uv, up_rgb = upsample(mask, chart, image, factor, thresh)
    src_uv, src_rgb = up_uv[up_mask], up_rgb[up_mask]
    r = grid.shape[0]
    tex = np.zeros((r, r, 3))
    for row in range(r):
        for col in range(r):
            if grid[row, col]:
                q = np.array([[(col + 0.5) / r, (row + 0.5) / r]])
                tex[row, col] = idw(src_uv, src_rgb, q, k)[0]
    return tex
