"""Deferred-shading rasterizer: projection, G-buffer, interpolation, VJPs.

The G-buffer stores, per pixel, the id of the nearest covering triangle and
the screen-space barycentric coordinates of the pixel center within it.
Depth is the barycentric combination of vertex NDC depths, which is the
perspective-correct interpolated depth.  Backward passes treat the triangle
assignment as constant and differentiate the barycentric coordinates
analytically, a formula that remains valid for negative coordinates and so
treats the surface as locally planar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_W_EPSILON = 1e-8
_AREA_EPSILON = 1e-14


@dataclass
class Camera:
    """Perspective pinhole camera with a symmetric frustum."""

    eye: np.ndarray            # (3,) mm
    look_at: np.ndarray        # (3,) mm
    up: np.ndarray             # (3,)
    vertical_fov: float        # radians
    near: float                # mm
    far: float                 # mm
    width: int
    height: int

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not 0.0 < self.near < self.far:
            raise ValueError("camera requires 0 < near < far")
        if not 0.0 < self.vertical_fov < np.pi:
            raise ValueError("vertical_fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")


@dataclass
class GBuffer:
    """Per-pixel triangle ids (-1 = background), barycentrics and depth."""

    triangle_id: np.ndarray    # (H, W) int
    barycentrics: np.ndarray   # (H, W, 3)
    ndc_depth: np.ndarray      # (H, W), +inf on background


@dataclass
class AttributeBuffer:
    """Interpolated per-pixel vertex attributes plus the coverage mask."""

    values: np.ndarray         # (H, W, K)
    mask: np.ndarray           # (H, W) bool


@dataclass
class Projection:
    """Projected vertices: clip coordinates, NDC, and a validity mask."""

    clip: np.ndarray           # (N, 4)
    ndc: np.ndarray            # (N, 3); NaN where invalid
    valid: np.ndarray          # (N,) bool
    num_clipped: int = field(default=0)


def view_matrix(camera: Camera) -> np.ndarray:
    """World-to-eye transform; the camera looks down its -z axis."""
    forward = camera.look_at - camera.eye
    fn = np.linalg.norm(forward)
    if fn < 1e-9:
        raise ValueError("eye and look_at coincide")
    forward = forward / fn
    side = np.cross(forward, camera.up)
    sn = np.linalg.norm(side)
    if sn < 1e-9:
        raise ValueError("up direction is parallel to the view direction")
    side = side / sn
    cam_up = np.cross(side, forward)
    m = np.eye(4)
    m[0, :3] = side
    m[1, :3] = cam_up
    m[2, :3] = -forward
    m[:3, 3] = -m[:3, :3] @ camera.eye
    return m


def projection_matrix(camera: Camera) -> np.ndarray:
    """Symmetric-frustum perspective matrix (eye space to clip space)."""
    focal = 1.0 / np.tan(camera.vertical_fov / 2.0)
    aspect = camera.width / camera.height
    depth = camera.far - camera.near
    m = np.zeros((4, 4))
    m[0, 0] = focal / aspect
    m[1, 1] = focal
    m[2, 2] = -(camera.far + camera.near) / depth
    m[2, 3] = -2.0 * camera.far * camera.near / depth
    m[3, 2] = -1.0
    return m


def camera_matrix(camera: Camera) -> np.ndarray:
    return projection_matrix(camera) @ view_matrix(camera)


def project_vertices(camera: Camera, positions: np.ndarray) -> Projection:
    """World positions (N, 3) to clip (N, 4) and NDC (N, 3).

    Vertices at or behind the eye plane (clip w near zero) are flagged
    invalid; triangles touching them are skipped during rasterization.
    """
    if not np.all(np.isfinite(positions)):
        raise ValueError("vertex positions must be finite")
    m = camera_matrix(camera)
    homo = np.column_stack([positions, np.ones(len(positions))])
    clip = homo @ m.T
    valid = clip[:, 3] > _W_EPSILON
    ndc = np.full((len(positions), 3), np.nan)
    ndc[valid] = clip[valid, :3] / clip[valid, 3:4]
    return Projection(clip=clip, ndc=ndc, valid=valid,
                      num_clipped=int((~valid).sum()))


def project_vertices_vjp(camera: Camera, positions: np.ndarray,
                         d_ndc: np.ndarray,
                         d_clip_w: Optional[np.ndarray] = None) -> np.ndarray:
    """Adjoint of project_vertices back to world positions.

    ``d_ndc`` is the (N, 3) cotangent of the NDC output; ``d_clip_w``
    optionally carries the cotangent of the clip-space w component (used by
    perspective-correct interpolation).  Invalid vertices get zero gradient.
    """
    m = camera_matrix(camera)
    homo = np.column_stack([positions, np.ones(len(positions))])
    clip = homo @ m.T
    w = clip[:, 3]
    valid = w > _W_EPSILON
    d_clip = np.zeros_like(clip)
    wv = w[valid]
    ndc_v = clip[valid, :3] / wv[:, None]
    d_clip[valid, :3] = d_ndc[valid] / wv[:, None]
    d_clip[valid, 3] = -np.einsum("ij,ij->i", d_ndc[valid], ndc_v) / wv
    if d_clip_w is not None:
        d_clip[valid, 3] += d_clip_w[valid]
    return (d_clip @ m)[:, :3]


def _screen_coords(ndc: np.ndarray, width: int, height: int) -> np.ndarray:
    """NDC xy to pixel coordinates; row 0 is the top of the image."""
    sx = (ndc[:, 0] + 1.0) * 0.5 * width
    sy = (1.0 - ndc[:, 1]) * 0.5 * height
    return np.column_stack([sx, sy])


def rasterize(ndc: np.ndarray, triangles: np.ndarray, width: int,
              height: int) -> GBuffer:
    """Scan-convert triangles into a G-buffer.

    Pixel centers are at (i + 0.5, j + 0.5); the nearest triangle by
    interpolated NDC depth wins, with ties going to the lower triangle id.
    Triangles with invalid (non-finite) vertices or negligible screen area
    are skipped.
    """
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    empty = GBuffer(triangle_id=tri_id, barycentrics=bary, ndc_depth=depth)

    screen = _screen_coords(ndc, width, height)
    zs = ndc[:, 2]
    tx = screen[triangles, 0]                      # (T, 3)
    ty = screen[triangles, 1]
    finite = np.isfinite(tx).all(axis=1) & np.isfinite(ty).all(axis=1)
    with np.errstate(invalid="ignore"):
        denom = (ty[:, 1] - ty[:, 2]) * (tx[:, 0] - tx[:, 2]) \
            + (tx[:, 2] - tx[:, 1]) * (ty[:, 0] - ty[:, 2])
        keep = finite & (np.abs(denom) >= _AREA_EPSILON)
    tid = np.nonzero(keep)[0]
    if not len(tid):
        return empty
    txk = tx[tid]
    tyk = ty[tid]
    lo_x = np.maximum(np.floor(txk.min(axis=1) - 0.5).astype(np.int64), 0)
    hi_x = np.minimum(np.ceil(txk.max(axis=1) - 0.5).astype(np.int64) + 1,
                      width)
    lo_y = np.maximum(np.floor(tyk.min(axis=1) - 0.5).astype(np.int64), 0)
    hi_y = np.minimum(np.ceil(tyk.max(axis=1) - 0.5).astype(np.int64) + 1,
                      height)
    bw = np.maximum(hi_x - lo_x, 0)
    counts = bw * np.maximum(hi_y - lo_y, 0)
    nz = counts > 0
    tid, lo_x, lo_y, bw, counts = (a[nz] for a in
                                   (tid, lo_x, lo_y, bw, counts))
    if not len(tid):
        return empty

    # One candidate row per (triangle, bbox pixel) pair.
    cand = np.repeat(np.arange(len(tid)), counts)
    starts = np.concatenate([[0], np.cumsum(counts[:-1])])
    k = np.arange(counts.sum()) - np.repeat(starts, counts)
    px = lo_x[cand] + k % bw[cand] + 0.5
    py = lo_y[cand] + k // bw[cand] + 0.5
    x0, x1, x2 = (txk[nz][cand, j] for j in range(3))
    y0, y1, y2 = (tyk[nz][cand, j] for j in range(3))
    dn = denom[tid][cand]
    b0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / dn
    b1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / dn
    b2 = 1.0 - b0 - b1
    vi = triangles[tid][cand]
    z = b0 * zs[vi[:, 0]] + b1 * zs[vi[:, 1]] + b2 * zs[vi[:, 2]]
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0) & (z >= -1.0) & (z <= 1.0)
    if not inside.any():
        return empty

    pix = ((py[inside] - 0.5).astype(np.int64) * width
           + (px[inside] - 0.5).astype(np.int64))
    zi = z[inside]
    ti = tid[cand[inside]]
    # Nearest depth wins; depth ties go to the lower triangle id.
    order = np.lexsort((ti, zi, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    win = order[first]
    tri_id.reshape(-1)[pix[win]] = ti[win]
    depth.reshape(-1)[pix[win]] = zi[win]
    flat_bary = bary.reshape(-1, 3)
    flat_bary[pix[win], 0] = b0[inside][win]
    flat_bary[pix[win], 1] = b1[inside][win]
    flat_bary[pix[win], 2] = b2[inside][win]
    return GBuffer(triangle_id=tri_id, barycentrics=bary, ndc_depth=depth)


def barycentric_vjp(ndc: np.ndarray, triangles: np.ndarray, gbuffer: GBuffer,
                    d_barycentrics: np.ndarray) -> np.ndarray:
    """Adjoint of the per-pixel barycentrics w.r.t. vertex NDC positions.

    For a pixel p owned by a triangle with vertex matrix
    M = [[x0 x1 x2], [y0 y1 y2], [1 1 1]], the barycentrics are
    b = M^-1 [px, py, 1], so a perturbation of vertex coordinate (c, j)
    contributes -(M^-T g)_c * b_j for cotangent g.  The formula is planar
    and holds for negative barycentrics; triangle ids stay fixed.
    """
    height, width = gbuffer.triangle_id.shape
    d_ndc = np.zeros_like(ndc)
    covered = gbuffer.triangle_id >= 0
    if not covered.any():
        return d_ndc
    tids = gbuffer.triangle_id[covered]            # (P,)
    g = d_barycentrics[covered]                    # (P, 3)
    b = gbuffer.barycentrics[covered]              # (P, 3)
    verts = triangles[tids]                        # (P, 3)
    screen = _screen_coords(ndc, width, height)
    xs = screen[verts, 0]                          # (P, 3)
    ys = screen[verts, 1]
    m = np.empty((len(tids), 3, 3))
    m[:, 0, :] = xs
    m[:, 1, :] = ys
    m[:, 2, :] = 1.0
    # t = M^-T g, computed as a batched solve of M^T t = g.
    t = np.linalg.solve(np.swapaxes(m, 1, 2), g[..., None])[..., 0]  # (P, 3)
    d_screen_x = -t[:, 0:1] * b                    # (P, 3) per vertex slot
    d_screen_y = -t[:, 1:2] * b
    # Screen coords are an affine map of NDC: sx = (x+1)/2*W, sy = (1-y)/2*H.
    d_ndc_x = d_screen_x * (0.5 * width)
    d_ndc_y = d_screen_y * (-0.5 * height)
    np.add.at(d_ndc[:, 0], verts.ravel(), d_ndc_x.ravel())
    np.add.at(d_ndc[:, 1], verts.ravel(), d_ndc_y.ravel())
    return d_ndc


def _gather(gbuffer: GBuffer, triangles: np.ndarray):
    covered = gbuffer.triangle_id >= 0
    tids = gbuffer.triangle_id[covered]
    verts = triangles[tids]
    b = gbuffer.barycentrics[covered]
    return covered, verts, b


def interpolate_attributes(gbuffer: GBuffer, triangles: np.ndarray,
                           vertex_attributes: np.ndarray,
                           background: np.ndarray,
                           perspective_correct: bool = False,
                           clip_w: Optional[np.ndarray] = None
                           ) -> AttributeBuffer:
    """Barycentric interpolation of per-vertex attributes at covered pixels.

    With ``perspective_correct`` set, weights are the barycentrics divided
    by the vertex clip-space w, renormalized per pixel.
    """
    attrs = np.atleast_2d(np.asarray(vertex_attributes, dtype=np.float64))
    if attrs.ndim != 2:
        raise ValueError("vertex attributes must be (N, K)")
    background = np.asarray(background, dtype=np.float64)
    k = attrs.shape[1]
    if background.shape != (k,):
        raise ValueError("background must have one entry per channel")
    if perspective_correct and clip_w is None:
        raise ValueError("perspective-correct interpolation needs clip_w")
    height, width = gbuffer.triangle_id.shape
    values = np.broadcast_to(background, (height, width, k)).copy()
    covered, verts, b = _gather(gbuffer, triangles)
    if covered.any():
        vals = attrs[verts]                        # (P, 3, K)
        if perspective_correct:
            u = b / clip_w[verts]
            u = u / u.sum(axis=1, keepdims=True)
        else:
            u = b
        values[covered] = np.einsum("pj,pjk->pk", u, vals)
    return AttributeBuffer(values=values, mask=covered.copy())


def interpolate_attributes_vjp(gbuffer: GBuffer, triangles: np.ndarray,
                               vertex_attributes: np.ndarray,
                               d_values: np.ndarray,
                               perspective_correct: bool = False,
                               clip_w: Optional[np.ndarray] = None):
    """Adjoints of interpolate_attributes.

    Returns ``(d_barycentrics, d_attributes, d_clip_w)``; the last entry is
    None when interpolation is not perspective-correct.
    """
    attrs = np.atleast_2d(np.asarray(vertex_attributes, dtype=np.float64))
    height, width = gbuffer.triangle_id.shape
    d_bary = np.zeros((height, width, 3))
    d_attrs = np.zeros_like(attrs)
    d_w = np.zeros(len(attrs)) if perspective_correct else None
    covered, verts, b = _gather(gbuffer, triangles)
    if not covered.any():
        return d_bary, d_attrs, d_w
    g = d_values[covered]                          # (P, K)
    vals = attrs[verts]                            # (P, 3, K)
    if perspective_correct:
        w = clip_w[verts]                          # (P, 3)
        u_raw = b / w
        denom = u_raw.sum(axis=1, keepdims=True)
        out = np.einsum("pj,pjk->pk", u_raw / denom, vals)
        # d out / d a_j = u_j / D; d out / d b_j = (a_j - out) / (w_j D);
        # d out / d w_j = -b_j / w_j^2 * (a_j - out) / D.
        diff_dot_g = np.einsum("pjk,pk->pj", vals - out[:, None, :], g)
        d_b_cov = diff_dot_g / (w * denom)
        d_w_cov = -b / w ** 2 * diff_dot_g / denom
        d_a_cov = (u_raw / denom)[:, :, None] * g[:, None, :]
        np.add.at(d_w, verts.ravel(), d_w_cov.ravel())
    else:
        d_b_cov = np.einsum("pjk,pk->pj", vals, g)
        d_a_cov = b[:, :, None] * g[:, None, :]
    d_bary[covered] = d_b_cov
    np.add.at(d_attrs, verts.ravel(),
              d_a_cov.reshape(-1, attrs.shape[1]))
    return d_bary, d_attrs, d_w
