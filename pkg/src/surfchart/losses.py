"""Training objectives.

Image-shaped arguments are channel-last: predictions ``(..., H, W, 3)``,
masks ``(..., H, W)``. Losses that can be empty return a :class:`Term`
carrying an ``empty`` flag alongside the value.
"""
from dataclasses import dataclass
from itertools import combinations
import math
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeMismatchError


@dataclass
class LossWeights:
    w1: float = 0.1
    w2: float = 0.9
    wn: float = 0.7
    wm: float = 0.3
    w3: float = 0.9
    K: int = 4096
    eps_corr: float = 1e-3
    eps_eval: float = 1e-3
    max_pairs: int = 4096

    def __post_init__(self):
        for name in ("w1", "w2", "wn", "wm", "w3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"loss weight {name} must be finite and >= 0, got {v}")
        if self.K < 1 or self.max_pairs < 1:
            raise ConfigurationError("K and max_pairs must be >= 1")
        if not (self.eps_corr > 0 and self.eps_eval > 0):
            raise ConfigurationError("correspondence thresholds must be > 0")

    @classmethod
    def multiview(cls, **kw):
        """Weights for multi-view training, where NOCS and mask weights drop to 0.1."""
        kw.setdefault("wn", 0.1)
        kw.setdefault("wm", 0.1)
        return cls(**kw)


class Term(NamedTuple):
    value: torch.Tensor
    empty: bool


def _check(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatchError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def nocs_loss(pred, gt, mask) -> Term:
    """Mean squared error over foreground pixels and the three channels."""
    _check(pred, gt, "nocs_loss")
    _check(pred[..., 0], mask, "nocs_loss mask")
    m = mask.to(pred.dtype)[..., None]
    n = m.sum() * 3
    if n == 0:
        return Term(pred.sum() * 0.0, True)
    return Term((m * (pred - gt) ** 2).sum() / n, False)


def mask_loss(logits, gt_mask):
    """Binary cross-entropy over all pixels."""
    _check(logits, gt_mask, "mask_loss")
    return F.binary_cross_entropy_with_logits(logits, gt_mask.to(logits.dtype))


def surface_loss(xyz_pred, xyz_gt) -> Term:
    """Mean Euclidean (not squared) distance between matched 3D samples."""
    _check(xyz_pred, xyz_gt, "surface_loss")
    if xyz_pred.numel() == 0:
        return Term(xyz_pred.sum() * 0.0, True)
    return Term(torch.linalg.vector_norm(xyz_pred - xyz_gt, dim=-1).mean(), False)


@dataclass
class CorrespondencePair:
    view_a: int
    view_b: int
    pixel_a: tuple
    pixel_b: tuple
    gt_nocs: np.ndarray


@dataclass
class CorrespondencePairs:
    """Mined pairs stored column-wise.

    ``row_a``/``row_b`` index each view's candidate list (its sampled pixels),
    so predictions evaluated at those samples can be gathered directly.
    """
    n_views: int
    view_a: np.ndarray
    view_b: np.ndarray
    row_a: np.ndarray
    row_b: np.ndarray
    pixel_a: np.ndarray  # (P, 2) row, col
    pixel_b: np.ndarray
    gt_a: np.ndarray  # (P, 3)
    gt_b: np.ndarray

    def __len__(self):
        return len(self.view_a)

    def __iter__(self):
        for i in range(len(self)):
            yield CorrespondencePair(int(self.view_a[i]), int(self.view_b[i]),
                                     tuple(int(x) for x in self.pixel_a[i]),
                                     tuple(int(x) for x in self.pixel_b[i]), self.gt_a[i])

    def view_pairs(self):
        return list(combinations(range(self.n_views), 2))

    def select(self, a, b):
        keep = (self.view_a == a) & (self.view_b == b)
        return CorrespondencePairs(self.n_views, *(x[keep] for x in (
            self.view_a, self.view_b, self.row_a, self.row_b, self.pixel_a, self.pixel_b,
            self.gt_a, self.gt_b)))


def mine_pairs(gt_nocs_maps, masks, eps_corr, max_pairs=4096, samples=None, rng=None):
    """Cross-view pixel pairs whose ground-truth NOCS coordinates lie within ``eps_corr``.

    ``gt_nocs_maps`` is a sequence of ``(H, W, 3)`` arrays and ``masks`` of
    ``(H, W)`` booleans. ``samples`` optionally gives per-view flat pixel
    indices to draw candidates from (defaults to every foreground pixel).
    Every candidate of the lower-numbered view is matched to its nearest
    candidate in the other view; at most ``max_pairs`` pairs are kept per
    view pair, chosen with ``rng``.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in gt_nocs_maps]
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if len(maps) < 2 or len(maps) != len(masks):
        raise ConfigurationError("mine_pairs needs >= 2 views with one mask each")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    w = maps[0].shape[1]
    cands = []
    for v, (m, mk) in enumerate(zip(maps, masks)):
        flat = np.flatnonzero(mk.ravel()) if samples is None else np.asarray(samples[v], dtype=np.int64)
        cands.append((flat, m.reshape(-1, 3)[flat], np.flatnonzero(mk.ravel()[flat])))
    cols = {k: [] for k in ("view_a", "view_b", "row_a", "row_b")}
    for a, b in combinations(range(len(maps)), 2):
        (_, xa, fa), (_, xb, fb) = cands[a], cands[b]
        if len(fa) == 0 or len(fb) == 0:
            continue
        dist, j = cKDTree(xb[fb]).query(xa[fa], k=1, distance_upper_bound=eps_corr)
        i = np.flatnonzero(dist < eps_corr)
        if len(i) > max_pairs:
            i = np.sort(rng.choice(i, size=max_pairs, replace=False))
        cols["view_a"].append(np.full(len(i), a))
        cols["view_b"].append(np.full(len(i), b))
        cols["row_a"].append(fa[i])
        cols["row_b"].append(fb[j[i]])
    if cols["view_a"]:
        va, vb, ra, rb = (np.concatenate(cols[k]).astype(np.int64)
                          for k in ("view_a", "view_b", "row_a", "row_b"))
    else:
        va = vb = ra = rb = np.zeros(0, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum([len(c[0]) for c in cands])])
    all_pix = np.concatenate([c[0] for c in cands]).astype(np.int64)
    all_gt = np.concatenate([c[1] for c in cands]).reshape(-1, 3)
    pix_a, pix_b = all_pix[offsets[va] + ra], all_pix[offsets[vb] + rb]
    gt_a, gt_b = all_gt[offsets[va] + ra], all_gt[offsets[vb] + rb]
    to_rc = lambda f: np.stack([f // w, f % w], axis=1) if len(f) else np.zeros((0, 2), np.int64)
    return CorrespondencePairs(len(maps), va, vb, ra, rb, to_rc(pix_a), to_rc(pix_b), gt_a, gt_b)


def consistency_loss(pairs: CorrespondencePairs, xyz_pred_by_view) -> Term:
    """Mean Euclidean distance between predictions at paired samples.

    ``xyz_pred_by_view[v]`` holds predictions for view ``v``'s candidates,
    indexed by the pair rows.
    """
    if len(pairs) == 0:
        ref = xyz_pred_by_view[0]
        return Term(ref.sum() * 0.0, True)
    flat, offsets = _flatten_views(xyz_pred_by_view)
    xa = flat[torch.as_tensor(offsets[pairs.view_a] + pairs.row_a)]
    xb = flat[torch.as_tensor(offsets[pairs.view_b] + pairs.row_b)]
    return Term(torch.linalg.vector_norm(xa - xb, dim=-1).mean(), False)


def _flatten_views(xyz_pred_by_view):
    if torch.is_tensor(xyz_pred_by_view):
        v, n = xyz_pred_by_view.shape[:2]
        return xyz_pred_by_view.reshape(v * n, 3), np.arange(v) * n
    sizes = [len(x) for x in xyz_pred_by_view]
    return torch.cat(list(xyz_pred_by_view)), np.concatenate([[0], np.cumsum(sizes)[:-1]])


def consistency_losses(pairs: CorrespondencePairs, xyz_pred_by_view):
    """One consistency term per view pair, including pairs without matches (value 0)."""
    return [consistency_loss(pairs.select(a, b), xyz_pred_by_view).value
            for a, b in pairs.view_pairs()]


def total_single(ln, lm, ls, weights: LossWeights):
    return weights.w1 * (weights.wn * ln + weights.wm * lm) + weights.w2 * ls


def total_multi(l_i, consistency_terms, weights: LossWeights):
    """Single-view total plus ``w3`` times the mean consistency term over view pairs."""
    a = len(consistency_terms)
    if a == 0 or weights.w3 == 0:
        return l_i
    return l_i + (weights.w3 / a) * sum(consistency_terms)
