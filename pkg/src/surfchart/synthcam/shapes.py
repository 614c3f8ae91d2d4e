"""Procedural canonical shapes living inside the unit container [0, 1]^3.

Three families are available:

* ``box-union``: unions of axis-aligned boxes built from furniture-like
  templates (tables, chairs, frames, arches). Most members have holes or
  see-through gaps, which gives the discontinuity metric something to find.
* ``superellipsoid``: convex superquadrics, genus 0.
* ``swept-profile``: solids of revolution around the vertical axis with a
  wavy radius profile, genus 0 but non-convex.

Every shape answers ``contains``, ``intersect`` (first and last hit along
rays), ``sample_surface`` (dense points exactly on the surface) and ``color``.
"""
from dataclasses import dataclass
import math

import numpy as np

from ..errors import ConfigurationError

FAMILIES = ("box-union", "superellipsoid", "swept-profile")
MARGIN = 0.05  # shapes stay this far inside the container


@dataclass(frozen=True)
class Texture:
    freqs: np.ndarray  # (3, 3)
    phase: np.ndarray  # (3,)

    def __call__(self, points):
        arg = 2.0 * np.pi * (np.asarray(points) @ self.freqs.T + self.phase)
        return 0.15 + 0.35 * (1.0 + np.sin(arg))

    def to_list(self):
        return self.freqs.ravel().tolist() + self.phase.tolist()

    @classmethod
    def from_list(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])


@dataclass(frozen=True, eq=False)
class CanonicalShape:
    family: str
    params: np.ndarray
    texture: Texture
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")

    @property
    def _impl(self):
        return _IMPLS[self.family]

    def contains(self, points):
        return self._impl.contains(self.params, np.asarray(points, dtype=np.float64))

    def intersect(self, origins, dirs):
        """First and last ray parameters of every ray; ``hit`` marks rays that meet the shape."""
        origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
        dirs = np.asarray(dirs, dtype=np.float64)
        shape = dirs.shape[:-1]
        t0, t1, hit = self._impl.intersect(self.params, origins.reshape(-1, 3), dirs.reshape(-1, 3))
        return t0.reshape(shape), t1.reshape(shape), hit.reshape(shape)

    def sample_surface(self, spacing=0.002):
        return self._impl.sample_surface(self.params, spacing)

    def bounds(self):
        return self._impl.bounds(self.params)

    def color(self, points):
        return self.texture(points)

    def to_dict(self):
        return {
            "family": self.family,
            "params": self.params.tolist(),
            "texture": self.texture.to_list(),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], np.asarray(d["params"], dtype=np.float64),
                   Texture.from_list(d["texture"]), int(d["seed"]))

    def __eq__(self, other):
        if not isinstance(other, CanonicalShape):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def generate_shape(family, seed):
    """Deterministic procedural shape of the given family."""
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    params = _IMPLS[family].random_params(rng)
    signs = rng.choice([-1.0, 1.0], size=(3, 3))
    texture = Texture(rng.uniform(0.5, 2.0, size=(3, 3)) * signs, rng.uniform(0, 1, size=3))
    return CanonicalShape(family, params, texture, int(seed))


# ---------------------------------------------------------------------------
# shared helpers


def _slab(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    tmax = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    parallel = dirs == 0
    outside = parallel & ((origins < lo) | (origins > hi))
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    ok = (tn <= tf) & (tf > 0) & ~outside.any(axis=-1)
    return tn, tf, ok


def _march(contains, origins, dirs, lo, hi, step=0.002, iters=48, chunk_samples=2_000_000):
    """Bracket first/last inside samples along each ray, then refine by bisection."""
    n = len(origins)
    t_first = np.full(n, np.inf)
    t_last = np.full(n, np.inf)
    hit = np.zeros(n, dtype=bool)
    tn, tf, ok = _slab(origins, dirs, lo - 1e-3, hi + 1e-3)
    tn = np.maximum(tn, 0.0)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return t_first, t_last, hit
    counts = np.ceil((tf[idx] - tn[idx]) / step).astype(int) + 1
    m = int(counts.max())
    per_chunk = max(1, chunk_samples // m)
    for start in range(0, len(idx), per_chunk):
        sel = idx[start:start + per_chunk]
        k = np.arange(m)
        ts = np.minimum(tn[sel, None] + k * step, tf[sel, None])
        pts = origins[sel, None, :] + ts[..., None] * dirs[sel, None, :]
        inside = contains(pts.reshape(-1, 3)).reshape(len(sel), m)
        any_in = inside.any(axis=1)
        if not any_in.any():
            continue
        sel, ts, inside = sel[any_in], ts[any_in], inside[any_in]
        rows = np.arange(len(sel))
        k_first = inside.argmax(axis=1)
        k_last = m - 1 - inside[:, ::-1].argmax(axis=1)
        o, d = origins[sel], dirs[sel]

        def bisect(t_out, t_in):
            for _ in range(iters):
                mid = 0.5 * (t_out + t_in)
                inn = contains(o + mid[:, None] * d)
                t_in = np.where(inn, mid, t_in)
                t_out = np.where(inn, t_out, mid)
            return t_in

        t_first[sel] = bisect(ts[rows, np.maximum(k_first - 1, 0)], ts[rows, k_first])
        t_last[sel] = bisect(ts[rows, np.minimum(k_last + 1, m - 1)], ts[rows, k_last])
        hit[sel] = True
    return t_first, t_last, hit


# ---------------------------------------------------------------------------
# box unions


class _BoxUnion:
    @staticmethod
    def boxes(params):
        return np.asarray(params, dtype=np.float64).reshape(-1, 6)

    @staticmethod
    def random_params(rng):
        template = rng.integers(4)
        u = rng.uniform
        boxes = []
        if template in (0, 1):  # table / chair
            x0, x1 = u(0.1, 0.25), u(0.75, 0.9)
            z0, z1 = u(0.1, 0.25), u(0.75, 0.9)
            y_floor = u(0.05, 0.1)
            y_seat = u(0.35, 0.55) if template == 1 else u(0.55, 0.75)
            th = u(0.05, 0.09)
            leg = u(0.06, 0.1)
            boxes.append([x0, y_seat, z0, x1, y_seat + th, z1])
            for lx in (x0, x1 - leg):
                for lz in (z0, z1 - leg):
                    boxes.append([lx, y_floor, lz, lx + leg, y_seat + th / 2, lz + leg])
            if template == 1:
                top = u(0.8, 0.93)
                back = u(0.05, 0.09)
                boxes.append([x0, y_seat + th / 2, z0, x1, top, z0 + back])
        elif template == 2:  # square frame with a hole
            x0, x1 = u(0.08, 0.2), u(0.8, 0.92)
            y0, y1 = u(0.08, 0.2), u(0.8, 0.92)
            zc = u(0.4, 0.6)
            depth = u(0.1, 0.3)
            bar = u(0.08, 0.16)
            zlo, zhi = zc - depth / 2, zc + depth / 2
            boxes += [
                [x0, y0, zlo, x1, y0 + bar, zhi],
                [x0, y1 - bar, zlo, x1, y1, zhi],
                [x0, y0 + bar / 2, zlo, x0 + bar, y1 - bar / 2, zhi],
                [x1 - bar, y0 + bar / 2, zlo, x1, y1 - bar / 2, zhi],
            ]
        else:  # arch: two pillars and a beam
            x0, x1 = u(0.08, 0.2), u(0.8, 0.92)
            z0, z1 = u(0.2, 0.35), u(0.65, 0.8)
            y0, y1 = u(0.05, 0.12), u(0.75, 0.92)
            pw = u(0.12, 0.22)
            beam = u(0.1, 0.18)
            boxes += [
                [x0, y0, z0, x0 + pw, y1 - beam / 2, z1],
                [x1 - pw, y0, z0, x1, y1 - beam / 2, z1],
                [x0, y1 - beam, z0, x1, y1, z1],
            ]
        return np.clip(np.asarray(boxes, dtype=np.float64), MARGIN, 1 - MARGIN).ravel()

    @classmethod
    def bounds(cls, params):
        b = cls.boxes(params)
        return b[:, :3].min(axis=0), b[:, 3:].max(axis=0)

    @classmethod
    def contains(cls, params, points):
        b = cls.boxes(params)
        p = points[..., None, :]
        return ((p > b[:, :3]) & (p < b[:, 3:])).all(axis=-1).any(axis=-1)

    @classmethod
    def intersect(cls, params, origins, dirs):
        b = cls.boxes(params)
        n = len(origins)
        t_first = np.full(n, np.inf)
        t_last = np.full(n, -np.inf)
        for box in b:
            tn, tf, ok = _slab(origins, dirs, box[:3], box[3:])
            t_first = np.where(ok, np.minimum(t_first, np.maximum(tn, 0.0)), t_first)
            t_last = np.where(ok, np.maximum(t_last, tf), t_last)
        hit = np.isfinite(t_first)
        t_last[~hit] = np.inf
        return t_first, t_last, hit

    @classmethod
    def face_samples(cls, params, spacing):
        """Samples on every box face together with the area each sample stands for."""
        b = cls.boxes(params)
        pts, areas = [], []
        for lo, hi in zip(b[:, :3], b[:, 3:]):
            for axis in range(3):
                a1, a2 = [ax for ax in range(3) if ax != axis]
                n1 = max(2, int(math.ceil((hi[a1] - lo[a1]) / spacing)) + 1)
                n2 = max(2, int(math.ceil((hi[a2] - lo[a2]) / spacing)) + 1)
                g1, g2 = np.meshgrid(np.linspace(lo[a1], hi[a1], n1),
                                     np.linspace(lo[a2], hi[a2], n2), indexing="ij")
                for value in (lo[axis], hi[axis]):
                    face = np.empty((g1.size, 3))
                    face[:, axis] = value
                    face[:, a1] = g1.ravel()
                    face[:, a2] = g2.ravel()
                    pts.append(face)
                    area = (hi[a1] - lo[a1]) * (hi[a2] - lo[a2])
                    areas.append(np.full(g1.size, area / g1.size))
        return np.concatenate(pts), np.concatenate(areas)

    @classmethod
    def sample_surface(cls, params, spacing):
        pts, _ = cls.face_samples(params, spacing)
        return pts[~cls.contains(params, pts)]


# ---------------------------------------------------------------------------
# superellipsoids: params = (cx, cy, cz, a, b, c, e1, e2), polar axis y


class _Superellipsoid:
    @staticmethod
    def random_params(rng):
        center = rng.uniform(0.47, 0.53, size=3)
        axes = rng.uniform(0.2, 0.42, size=3)
        exps = rng.uniform(0.4, 1.4, size=2)
        return np.concatenate([center, axes, exps])

    @staticmethod
    def _f(params, rel):
        a, b, c, e1, e2 = params[3:8]
        x = np.abs(rel[..., 0] / a)
        y = np.abs(rel[..., 1] / b)
        z = np.abs(rel[..., 2] / c)
        return (x ** (2 / e2) + z ** (2 / e2)) ** (e2 / e1) + y ** (2 / e1)

    @staticmethod
    def bounds(params):
        return params[:3] - params[3:6], params[:3] + params[3:6]

    @classmethod
    def contains(cls, params, points):
        return cls._f(params, points - params[:3]) < 1.0

    @classmethod
    def intersect(cls, params, origins, dirs):
        lo, hi = cls.bounds(params)
        return _march(lambda p: cls.contains(params, p), origins, dirs, lo, hi)

    @classmethod
    def sample_surface(cls, params, spacing):
        # the implicit is homogeneous of degree 2/e1 about the center, so each
        # direction d meets the surface at radius f(d)^(-e1/2)
        e1 = params[6]
        rmax = float(np.linalg.norm(params[3:6]))
        n = int(math.ceil(2.0 * rmax / spacing)) + 1
        g = np.linspace(-1.0, 1.0, n)
        g1, g2 = [a.ravel() for a in np.meshgrid(g, g, indexing="ij")]
        ones = np.ones_like(g1)
        dirs = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                d = np.empty((g1.size, 3))
                others = [ax for ax in range(3) if ax != axis]
                d[:, axis] = sign * ones
                d[:, others[0]] = g1
                d[:, others[1]] = g2
                dirs.append(d)
        dirs = np.concatenate(dirs)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        r = cls._f(params, dirs) ** (-e1 / 2.0)
        return params[:3] + r[:, None] * dirs


# ---------------------------------------------------------------------------
# swept profiles: params = (cx, cz, y0, y1, r0, a1, f1, p1, a2, f2, p2)


class _SweptProfile:
    @staticmethod
    def random_params(rng):
        y0, y1 = rng.uniform(0.06, 0.2), rng.uniform(0.8, 0.94)
        r0 = rng.uniform(0.2, 0.3)
        a1, f1, p1 = rng.uniform(0.03, 0.1), rng.uniform(0.5, 1.5), rng.uniform(0, 1)
        a2, f2, p2 = rng.uniform(0.0, 0.05), rng.uniform(1.5, 3.0), rng.uniform(0, 1)
        return np.array([0.5, 0.5, y0, y1, r0, a1, f1, p1, a2, f2, p2])

    @staticmethod
    def radius(params, y):
        y0, y1, r0, a1, f1, p1, a2, f2, p2 = params[2:11]
        s = (y - y0) / (y1 - y0)
        return (r0 + a1 * np.sin(2 * np.pi * (f1 * s + p1))
                + a2 * np.sin(2 * np.pi * (f2 * s + p2)))

    @classmethod
    def bounds(cls, params):
        cx, cz, y0, y1 = params[:4]
        rmax = params[4] + params[5] + params[8]
        return np.array([cx - rmax, y0, cz - rmax]), np.array([cx + rmax, y1, cz + rmax])

    @classmethod
    def contains(cls, params, points):
        cx, cz, y0, y1 = params[:4]
        y = points[..., 1]
        rho2 = (points[..., 0] - cx) ** 2 + (points[..., 2] - cz) ** 2
        return (y > y0) & (y < y1) & (rho2 < cls.radius(params, y) ** 2)

    @classmethod
    def intersect(cls, params, origins, dirs):
        lo, hi = cls.bounds(params)
        return _march(lambda p: cls.contains(params, p), origins, dirs, lo, hi)

    @classmethod
    def sample_surface(cls, params, spacing):
        cx, cz, y0, y1 = params[:4]
        rmax = params[4] + params[5] + params[8]
        yy = np.linspace(y0, y1, 20001)
        slope = np.abs(np.gradient(cls.radius(params, yy), yy)).max()
        ny = int(math.ceil((y1 - y0) * math.sqrt(1 + slope ** 2) / spacing)) + 1
        nt = int(math.ceil(2 * np.pi * rmax / spacing))
        y, t = np.meshgrid(np.linspace(y0, y1, ny), np.arange(nt) * 2 * np.pi / nt, indexing="ij")
        r = cls.radius(params, y)
        side = np.stack([cx + r * np.cos(t), y, cz + r * np.sin(t)], axis=-1).reshape(-1, 3)
        caps = []
        g = np.arange(-rmax, rmax + spacing, spacing)
        gx, gz = [a.ravel() for a in np.meshgrid(g, g, indexing="ij")]
        for yc in (y0, y1):
            keep = gx ** 2 + gz ** 2 <= cls.radius(params, yc) ** 2
            caps.append(np.stack([cx + gx[keep], np.full(keep.sum(), yc), cz + gz[keep]], axis=-1))
        return np.concatenate([side] + caps)


_IMPLS = {
    "box-union": _BoxUnion,
    "superellipsoid": _Superellipsoid,
    "swept-profile": _SweptProfile,
}


def box_union_area(shape, spacing=0.005):
    """Surface area of a box union by dense face sampling (exposed samples only)."""
    pts, areas = _BoxUnion.face_samples(shape.params, spacing)
    return float(areas[~_BoxUnion.contains(shape.params, pts)].sum())
