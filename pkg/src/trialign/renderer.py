"""Multi-view z-buffered depth rendering of point clouds, a frozen stand-in
image embedder, and 16-bit PGM export.

Cameras sit on a ring around the up (z) axis and look at the origin. Pixel
``(row, col)`` covers continuous image coordinates ``[col - 0.5, col + 0.5)``
horizontally and likewise vertically, so the principal point at
``(res/2, res/2)`` is the centre of pixel ``(res/2, res/2)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadHeader, ResolutionMismatch, UnnormalizedCloud, ValidationError
from .pointcloud import PointCloud
from .rng import Rng

EMBED_GRID = 32


@dataclass(frozen=True)
class CameraRing:
    view_count: int = 30
    step_deg: float = 12.0
    elevation_deg: float = 20.0
    radius: float = 2.5
    focal_ratio: float = 0.8  # focal length in pixels = focal_ratio * res

    def __post_init__(self):
        if not math.isclose(self.view_count * self.step_deg, 360.0):
            raise ValidationError("view_count * step must cover exactly 360 degrees")
        if self.radius <= 1.0:
            raise ValidationError("camera radius must exceed the unit sphere")

    def focal(self, res: int) -> float:
        return self.focal_ratio * res

    def pose(self, view: int) -> tuple[np.ndarray, np.ndarray]:
        """World-to-camera rotation (rows: right, up, forward) and camera centre."""
        az = math.radians(view * self.step_deg)
        el = math.radians(self.elevation_deg)
        centre = self.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        forward = -centre / np.linalg.norm(centre)
        right = np.array([-math.sin(az), math.cos(az), 0.0])
        up = np.cross(right, forward)
        return np.stack([right, up, forward]), centre


@dataclass
class DepthMap:
    width: int
    height: int
    depth: np.ndarray  # (height, width) float32, +inf marks background
    view: int

    @property
    def foreground(self) -> np.ndarray:
        return np.isfinite(self.depth)


def project(points: np.ndarray, ring: CameraRing, view: int, res: int):
    """Camera-space depth and continuous pixel coordinates (u right, v down)."""
    rot, centre = ring.pose(view)
    cam = (np.asarray(points, dtype=np.float64) - centre) @ rot.T
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    f, c = ring.focal(res), res / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = c + f * x / z
        v = c - f * y / z
    return z, u, v


def render_depth(pc: PointCloud, ring: CameraRing, view: int, res: int) -> DepthMap:
    """Splat every point into one pixel; the nearest depth wins."""
    pts = pc.points.astype(np.float64)
    if np.sqrt((pts * pts).sum(axis=1)).max() > 1 + 1e-3:
        raise UnnormalizedCloud("render_depth expects a unit-sphere normalized cloud")
    if not 0 <= view < ring.view_count:
        raise ValidationError(f"view {view} outside [0, {ring.view_count})")
    z, u, v = project(pts, ring, view, res)
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    ok = (z > 1e-6) & (col >= 0) & (col < res) & (row >= 0) & (row < res)
    flat = row[ok].astype(np.int64) * res + col[ok].astype(np.int64)
    buf = np.full(res * res, np.inf)
    np.minimum.at(buf, flat, z[ok])
    return DepthMap(res, res, buf.reshape(res, res).astype(np.float32), view)


def _projection_matrix(dim: int, seed: int) -> np.ndarray:
    g = Rng.named(seed, "image-projection", dim).gen
    return g.standard_normal((EMBED_GRID * EMBED_GRID, dim)) / EMBED_GRID


def stand_in_image_embed(dm: DepthMap, dim: int, seed: int, expected_res: int = 64) -> np.ndarray:
    """Area-average to 32x32 (background as 0), project with a frozen
    seed-derived Gaussian matrix, normalize."""
    if expected_res % EMBED_GRID:
        raise ResolutionMismatch(f"resolution {expected_res} is not a multiple of {EMBED_GRID}")
    if dm.width != expected_res or dm.height != expected_res:
        raise ResolutionMismatch(f"expected a {expected_res}x{expected_res} map, got {dm.width}x{dm.height}")
    d = np.where(dm.foreground, dm.depth, 0.0).astype(np.float64)
    k = expected_res // EMBED_GRID
    pooled = d.reshape(EMBED_GRID, k, EMBED_GRID, k).mean(axis=(1, 3)).reshape(-1)
    e = pooled @ _projection_matrix(dim, seed)
    n = np.linalg.norm(e)
    if n <= 1e-12:
        # an empty map carries no signal; fall back to a fixed direction
        e, n = np.ones(dim), math.sqrt(dim)
    return (e / n).astype(np.float32)


# 16-bit binary PGM. 0 = background, foreground depths map linearly onto
# 1..65535 over [near, far]; the range travels in a header comment.

_HEADER_RE = re.compile(rb"P5\n# depth_range (\S+) (\S+) view (\d+)\n(\d+) (\d+)\n65535\n")


def depth_range(dm: DepthMap) -> tuple[float, float]:
    fg = dm.depth[dm.foreground]
    if fg.size == 0:
        return 0.0, 1.0
    near, far = float(fg.min()), float(fg.max())
    return near, far if far > near else near + 1.0


def export_depth(dm: DepthMap, path, near: float | None = None, far: float | None = None) -> Path:
    if near is None or far is None:
        near, far = depth_range(dm)
    if not far > near:
        raise ValidationError("far must exceed near")
    fg = dm.foreground
    d = dm.depth.astype(np.float64)
    if fg.any() and (d[fg].min() < near or d[fg].max() > far):
        raise ValidationError("foreground depth outside the declared near/far range")
    q = np.zeros(d.shape, dtype=np.uint16)
    q[fg] = (1 + np.rint((d[fg] - near) / (far - near) * 65534)).astype(np.uint16)
    header = f"P5\n# depth_range {near!r} {far!r} view {dm.view}\n{dm.width} {dm.height}\n65535\n".encode()
    path = Path(path)
    path.write_bytes(header + q.astype(">u2").tobytes())
    return path


def import_depth(path) -> tuple[DepthMap, float, float]:
    blob = Path(path).read_bytes()
    m = _HEADER_RE.match(blob)
    if not m:
        raise BadHeader(f"{path}: not a depth PGM written by export_depth")
    near, far = float(m.group(1)), float(m.group(2))
    view, w, h = int(m.group(3)), int(m.group(4)), int(m.group(5))
    body = blob[m.end() :]
    if len(body) != 2 * w * h:
        raise BadHeader(f"{path}: expected {2 * w * h} pixel bytes, found {len(body)}")
    q = np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.float64)
    depth = np.where(q > 0, near + (q - 1) / 65534 * (far - near), np.inf)
    return DepthMap(w, h, depth.astype(np.float32), view), near, far
