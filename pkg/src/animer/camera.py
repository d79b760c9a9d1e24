"""Fixed-intrinsics projection, z-buffer rasterisation and visibility."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import Tensor, constant, where_mask

MIN_DEPTH = 1e-6
VISIBILITY_TOLERANCE = 1e-4


@dataclass
class CameraSpec:
    focal: float
    principal: np.ndarray
    translation: np.ndarray
    resolution: tuple[int, int]  # (H, W)

    def __post_init__(self):
        self.principal = np.asarray(self.principal, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if not self.focal > 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def default(cls, resolution, translation=(0.0, 0.0, 5.0)) -> "CameraSpec":
        """Focal length 2 * max(H, W) pixels, principal point at the centre."""
        h, w = resolution
        return cls(2.0 * max(h, w), np.array([w / 2.0, h / 2.0]), np.asarray(translation, float), (h, w))


@dataclass
class RenderBuffers:
    mask: np.ndarray   # (H, W) uint8
    depth: np.ndarray  # (H, W) float64, +inf off the silhouette


def project(points: np.ndarray, camera: CameraSpec):
    """Pixel coordinates of ``(n, 3)`` points and a per-point validity flag.

    Points with ``z + T_z <= 1e-6`` are flagged invalid and given NaN
    coordinates.
    """
    cam = np.asarray(points, dtype=np.float64) + camera.translation
    z = cam[..., 2]
    valid = z > MIN_DEPTH
    safe = np.where(valid, z, 1.0)
    uv = camera.focal * cam[..., :2] / safe[..., None] + camera.principal
    uv[~valid] = np.nan
    return uv, valid


def project_tensor(points: Tensor, translation: Tensor, focal: float, principal) -> Tensor:
    """Differentiable projection of ``(B, n, 3)`` points with ``(B, 3)`` translations.

    Depths below 1e-6 are clamped so that the result stays finite.
    """
    b = points.shape[0]
    cam = points + translation.reshape(b, 1, 3)
    z = cam[..., 2:3]
    z = where_mask(z.data > MIN_DEPTH, z, constant(np.full(z.shape, MIN_DEPTH)))
    return cam[..., 0:2] / z * focal + np.asarray(principal, dtype=np.float64)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(vertices: np.ndarray, faces: np.ndarray, camera: CameraSpec) -> RenderBuffers:
    """Z-buffered silhouette and depth of a triangle mesh.

    Pixel ``(r, c)`` is sampled at its centre ``(c + 0.5, r + 0.5)``.  Depth is
    camera-space z, interpolated perspective-correctly (linear in 1/z).
    Pixels on a shared edge go to exactly one triangle (top-left rule).
    Triangles with any vertex at or behind the camera plane are skipped.
    """
    h, w = camera.resolution
    depth = np.full((h, w), np.inf)
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(vertices) == 0 or len(faces) == 0:
        return RenderBuffers(np.zeros((h, w), np.uint8), depth)
    cam = vertices + camera.translation
    z = cam[:, 2]
    ok = z > MIN_DEPTH
    uv = np.zeros((len(vertices), 2))
    uv[ok] = camera.focal * cam[ok, :2] / z[ok, None] + camera.principal

    for tri in faces:
        if not ok[tri].all():
            continue
        (x0, y0), (x1, y1), (x2, y2) = uv[tri]
        z0, z1, z2 = z[tri]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0:
            continue
        if area < 0:
            x1, y1, x2, y2, z1, z2 = x2, y2, x1, y1, z2, z1
            area = -area
        c_lo = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        c_hi = min(int(np.ceil(max(x0, x1, x2) - 0.5)), w - 1)
        r_lo = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        r_hi = min(int(np.ceil(max(y0, y1, y2) - 0.5)), h - 1)
        if c_lo > c_hi or r_lo > r_hi:
            continue
        px = np.arange(c_lo, c_hi + 1) + 0.5
        py = (np.arange(r_lo, r_hi + 1) + 0.5)[:, None]
        # barycentric weights opposite each vertex
        w0 = _edge(x1, y1, x2, y2, px, py)
        w1 = _edge(x2, y2, x0, y0, px, py)
        w2 = _edge(x0, y0, x1, y1, px, py)
        inside = np.ones(w0.shape, bool)
        for wk, (ax, ay, bx, by) in ((w0, (x1, y1, x2, y2)), (w1, (x2, y2, x0, y0)), (w2, (x0, y0, x1, y1))):
            ex, ey = bx - ax, by - ay
            top_left = ey < 0 or (ey == 0 and ex > 0)
            inside &= (wk > 0) | ((wk == 0) & top_left)
        if not inside.any():
            continue
        inv_z = (w0 / z0 + w1 / z1 + w2 / z2) / area
        zz = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
        block = depth[r_lo:r_hi + 1, c_lo:c_hi + 1]
        np.minimum(block, zz, out=block)
    mask = np.isfinite(depth).astype(np.uint8)
    return RenderBuffers(mask, depth)


def keypoint_visibility(keypoints3d: np.ndarray, camera: CameraSpec, buffers: RenderBuffers,
                        tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """1 where a keypoint is not behind the rendered surface at its pixel.

    A keypoint is visible iff its camera depth ``d_k <= d_p + tolerance``
    where ``d_p`` is the buffer depth at the pixel containing its
    projection.  Off-image or behind-camera keypoints get 0.
    """
    h, w = camera.resolution
    uv, valid = project(keypoints3d, camera)
    dk = np.asarray(keypoints3d, float)[:, 2] + camera.translation[2]
    flags = np.zeros(len(dk), np.uint8)
    for i in range(len(dk)):
        if not valid[i]:
            continue
        c, r = np.floor(uv[i, 0]), np.floor(uv[i, 1])
        if not (0 <= c < w and 0 <= r < h):
            continue
        flags[i] = dk[i] <= buffers.depth[int(r), int(c)] + tolerance
    return flags


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask resolutions differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
