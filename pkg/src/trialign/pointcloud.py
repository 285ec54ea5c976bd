"""Point clouds: uniform resampling, augmentation, normalization, synthetic
shapes and the binary ``ULIPPC01`` file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, EmptyCloud, TruncatedFile, UnknownCategory, ValidationError
from .rng import Rng

PC_MAGIC = b"ULIPPC01"

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "helix")


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValidationError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloud("point cloud has no points")
        if not np.isfinite(pts).all():
            raise ValidationError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.label)


@dataclass
class AugmentConfig:
    drop_max_ratio: float = 0.4
    scale_range: tuple[float, float] = (0.8, 1.25)
    shift_max: float = 0.1
    rot_sigma: float = 0.06
    rot_clip: float = 0.18
    drop: bool = True
    scale: bool = True
    shift: bool = True
    rotate: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 <= self.drop_max_ratio < 1:
            raise ValidationError("drop_max_ratio must lie in [0, 1)")
        if not 0 < lo <= hi:
            raise ValidationError("scale_range must satisfy 0 < lo <= hi")
        if self.shift_max < 0 or self.rot_sigma < 0 or self.rot_clip < 0:
            raise ValidationError("shift_max, rot_sigma and rot_clip must be non-negative")
        self.scale_range = (float(lo), float(hi))

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(drop=False, scale=False, shift=False, rotate=False)


def resample(pc: PointCloud, n_points: int, rng: Rng) -> PointCloud:
    """Uniformly draw ``n_points`` rows; without replacement whenever possible."""
    if n_points < 1:
        raise ValidationError("n_points must be >= 1")
    n = len(pc)
    if n >= n_points:
        idx = rng.gen.choice(n, size=n_points, replace=False)
    else:
        idx = rng.gen.integers(0, n, size=n_points)
    return pc.with_points(pc.points[idx])


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to radius 1."""
    p = pc.points.astype(np.float64)
    p = p - p.mean(axis=0)
    r = np.sqrt((p * p).sum(axis=1)).max()
    if r > 0:
        p = p / r
    return pc.with_points(p)


def rotation_matrix(angles) -> np.ndarray:
    """Rz @ Ry @ Rx for angles (ax, ay, az) in radians."""
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points.astype(np.float64) @ r.T


def augment(pc: PointCloud, cfg: AugmentConfig, rng: Rng) -> PointCloud:
    """Random point drop, then scale, shift and a small rotation perturbation.

    The point count never changes: dropped rows are overwritten with the
    first surviving row.
    """
    if not (cfg.drop or cfg.scale or cfg.shift or cfg.rotate):
        return pc.with_points(pc.points.copy())
    g = rng.gen
    p = pc.points.astype(np.float64)
    if cfg.drop:
        ratio = g.uniform(0.0, cfg.drop_max_ratio)
        dropped = g.uniform(size=len(p)) < ratio
        keep = np.flatnonzero(~dropped)
        if keep.size and dropped.any():
            p[dropped] = p[keep[0]]
    if cfg.scale:
        p = p * g.uniform(*cfg.scale_range)
    if cfg.shift:
        p = p + g.uniform(-cfg.shift_max, cfg.shift_max, size=3)
    if cfg.rotate:
        angles = np.clip(g.normal(0.0, cfg.rot_sigma, size=3), -cfg.rot_clip, cfg.rot_clip)
        p = p @ rotation_matrix(angles).T
    return pc.with_points(p)


# synthetic shapes

def _sphere(n, g):
    # antipodal pairs (plus a zero-sum triangle when n is odd) keep the
    # centroid at the origin, so normalization leaves every radius at 1
    half = n // 2 - (1 if n % 2 else 0)
    v = g.normal(size=(half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    parts = [v, -v]
    if n % 2:
        a = g.normal(size=3)
        a /= np.linalg.norm(a)
        b = np.cross(a, g.normal(size=3))
        b /= np.linalg.norm(b)
        c = np.cross(a, b)
        tri = [a, -0.5 * a + np.sqrt(3) / 2 * c, -0.5 * a - np.sqrt(3) / 2 * c]
        parts.append(np.array(tri))
    return np.concatenate(parts)[:n]


def _cube(n, g):
    face = g.integers(0, 6, size=n)
    uv = g.uniform(-1, 1, size=(n, 2))
    p = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [k for k in range(3) if k != a]
        p[m, a] = sign[m]
        p[m, others[0]] = uv[m, 0]
        p[m, others[1]] = uv[m, 1]
    return p


def _disk(n, g, radius):
    r = radius * np.sqrt(g.uniform(size=n))
    t = g.uniform(0, 2 * np.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(n, g):
    h = g.uniform(1.2, 2.4)
    side, cap = 2 * np.pi * h, 2 * np.pi
    on_side = g.uniform(size=n) < side / (side + cap)
    t = g.uniform(0, 2 * np.pi, size=n)
    z = g.uniform(-h / 2, h / 2, size=n)
    dx, dy = _disk(n, g, 1.0)
    top = g.uniform(size=n) < 0.5
    x = np.where(on_side, np.cos(t), dx)
    y = np.where(on_side, np.sin(t), dy)
    z = np.where(on_side, z, np.where(top, h / 2, -h / 2))
    return np.stack([x, y, z], axis=1)


def _cone(n, g):
    h = g.uniform(1.2, 2.2)
    lateral, base = np.pi * np.hypot(1.0, h), np.pi
    on_side = g.uniform(size=n) < lateral / (lateral + base)
    frac = np.sqrt(g.uniform(size=n))  # distance from apex, area-uniform
    t = g.uniform(0, 2 * np.pi, size=n)
    dx, dy = _disk(n, g, 1.0)
    x = np.where(on_side, frac * np.cos(t), dx)
    y = np.where(on_side, frac * np.sin(t), dy)
    z = np.where(on_side, h * (1 - frac), 0.0)
    return np.stack([x, y, z], axis=1)


def _torus(n, g):
    big, small = 1.0, g.uniform(0.25, 0.45)
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * n
        u = g.uniform(0, 2 * np.pi, size=m)
        v = g.uniform(0, 2 * np.pi, size=m)
        accept = g.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[accept], v[accept]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)])
    return out[:n]


def _plane(n, g):
    half_y = g.uniform(0.6, 1.0)
    x = g.uniform(-1, 1, size=n)
    y = g.uniform(-half_y, half_y, size=n)
    return np.stack([x, y, np.zeros(n)], axis=1)


def _triangle(n, g, a, b, c):
    r1 = np.sqrt(g.uniform(size=(n, 1)))
    r2 = g.uniform(size=(n, 1))
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def _pyramid(n, g):
    h = g.uniform(1.2, 2.0)
    apex = np.array([0.0, 0.0, h])
    corners = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]], dtype=float)
    face_area = 0.5 * 2 * np.hypot(1.0, h)
    areas = np.array([4.0] + [face_area] * 4)
    which = g.choice(5, size=n, p=areas / areas.sum())
    p = np.empty((n, 3))
    base = which == 0
    p[base] = np.stack([g.uniform(-1, 1, base.sum()), g.uniform(-1, 1, base.sum()), np.zeros(base.sum())], axis=1)
    for f in range(4):
        m = which == f + 1
        p[m] = _triangle(m.sum(), g, apex, corners[f], corners[(f + 1) % 4])
    return p


def _helix(n, g):
    turns = g.uniform(2.0, 4.0)
    height, tube = 2.0, 0.08
    t = g.uniform(0, 1, size=n)
    ang = 2 * np.pi * turns * t
    centre = np.stack([np.cos(ang), np.sin(ang), height * (t - 0.5)], axis=1)
    tangent = np.stack([-2 * np.pi * turns * np.sin(ang), 2 * np.pi * turns * np.cos(ang), np.full(n, height)], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)
    binormal = np.cross(tangent, normal)
    phi = g.uniform(0, 2 * np.pi, size=(n, 1))
    return centre + tube * (np.cos(phi) * normal + np.sin(phi) * binormal)


_SURFACES = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "pyramid": _pyramid,
    "helix": _helix,
}


def sample_surface(category: str, n_points: int, rng: Rng) -> np.ndarray:
    """Raw surface samples (float64, model units) with a random yaw applied."""
    if category not in _SURFACES:
        raise UnknownCategory(f"unknown shape category {category!r}; expected one of {SHAPES}")
    if n_points < 8:
        raise ValidationError("gen_shape needs n_points >= 8")
    g = rng.gen
    pts = _SURFACES[category](n_points, g)
    return rotate_z(pts, g.uniform(0, 2 * np.pi))


def gen_shape(category: str, n_points: int, noise_sigma: float, rng: Rng) -> PointCloud:
    pts = sample_surface(category, n_points, rng)
    if noise_sigma > 0:
        pts = pts + rng.gen.normal(0.0, noise_sigma, size=pts.shape)
    return normalize_unit_sphere(PointCloud(pts, SHAPES.index(category)))


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


# file format: magic, u32 LE count, count*3 LE float32

def write_cloud(path, pc: PointCloud):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC)
        fh.write(struct.pack("<I", len(pc)))
        fh.write(pc.points.astype("<f4").tobytes())


def read_cloud(path, label: int | None = None) -> PointCloud:
    blob = Path(path).read_bytes()
    if blob[:8] != PC_MAGIC:
        raise BadMagic(f"{path}: not a point-cloud file")
    if len(blob) < 12:
        raise TruncatedFile(f"{path}: missing point count")
    (n,) = struct.unpack_from("<I", blob, 8)
    need = 12 + 12 * n
    if len(blob) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(blob)}")
    pts = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=12).reshape(n, 3)
    return PointCloud(pts.astype(np.float32), label)
