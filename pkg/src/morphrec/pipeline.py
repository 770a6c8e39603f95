"""End-to-end differentiable rendering of a decoded face mesh.

Composes the rasterizer and shading stages and provides the matching
reverse pass, accumulating gradients from both the attribute path
(interpolated positions / normals / colors) and the geometric path
(barycentric coordinates back to vertex positions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, raster, shading


@dataclass
class RenderCache:
    """Intermediates required by the reverse pass."""

    camera: raster.Camera
    rig: shading.LightingRig
    mesh: model.Mesh                 # with normals
    normal_fallbacks: int
    projection: raster.Projection
    gbuffer: raster.GBuffer
    position_buf: raster.AttributeBuffer
    normal_buf: raster.AttributeBuffer
    diffuse_buf: raster.AttributeBuffer
    image: np.ndarray


def render_mesh(mesh: model.Mesh, camera: raster.Camera,
                rig: shading.LightingRig,
                background=None) -> tuple[np.ndarray, RenderCache]:
    """Render a mesh to a linear-RGB image, returning the backward cache."""
    normals, n_fallback = model.vertex_normals(mesh.positions, mesh.triangles)
    proj = raster.project_vertices(camera, mesh.positions)
    gbuffer = raster.rasterize(proj.ndc, mesh.triangles, camera.width,
                               camera.height)
    clip_w = proj.clip[:, 3]
    pos_buf = raster.interpolate_attributes(
        gbuffer, mesh.triangles, mesh.positions, np.zeros(3),
        perspective_correct=True, clip_w=clip_w)
    nrm_buf = raster.interpolate_attributes(
        gbuffer, mesh.triangles, normals, np.array([0.0, 0.0, 1.0]),
        perspective_correct=True, clip_w=clip_w)
    dif_buf = raster.interpolate_attributes(
        gbuffer, mesh.triangles, mesh.colors, np.zeros(3),
        perspective_correct=True, clip_w=clip_w)
    image = shading.phong_shade(pos_buf.values, nrm_buf.values,
                                dif_buf.values, pos_buf.mask, rig, camera,
                                background=background)
    cached_mesh = model.Mesh(mesh.positions, mesh.colors, mesh.triangles,
                             normals)
    return image, RenderCache(camera=camera, rig=rig, mesh=cached_mesh,
                              normal_fallbacks=n_fallback, projection=proj,
                              gbuffer=gbuffer, position_buf=pos_buf,
                              normal_buf=nrm_buf, diffuse_buf=dif_buf,
                              image=image)


def render_mesh_vjp(cache: RenderCache,
                    d_image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of render_mesh: image cotangent to (d_positions, d_colors).

    The per-pixel triangle assignment is held fixed; barycentric gradients
    follow the locally-planar extension.
    """
    mesh = cache.mesh
    triangles = mesh.triangles
    clip_w = cache.projection.clip[:, 3]
    d_pos_buf, d_nrm_buf, d_dif_buf = shading.phong_shade_vjp(
        cache.position_buf.values, cache.normal_buf.values,
        cache.diffuse_buf.values, cache.position_buf.mask, cache.rig,
        cache.camera, d_image)

    d_bary = np.zeros_like(cache.gbuffer.barycentrics)
    d_clip_w = np.zeros_like(clip_w)
    d_positions = np.zeros_like(mesh.positions)

    db, d_attr, dw = raster.interpolate_attributes_vjp(
        cache.gbuffer, triangles, mesh.positions, d_pos_buf,
        perspective_correct=True, clip_w=clip_w)
    d_bary += db
    d_clip_w += dw
    d_positions += d_attr

    db, d_attr, dw = raster.interpolate_attributes_vjp(
        cache.gbuffer, triangles, mesh.normals, d_nrm_buf,
        perspective_correct=True, clip_w=clip_w)
    d_bary += db
    d_clip_w += dw
    d_positions += model.vertex_normals_vjp(mesh.positions, triangles,
                                            d_attr)

    db, d_colors, dw = raster.interpolate_attributes_vjp(
        cache.gbuffer, triangles, mesh.colors, d_dif_buf,
        perspective_correct=True, clip_w=clip_w)
    d_bary += db
    d_clip_w += dw

    d_ndc = raster.barycentric_vjp(cache.projection.ndc, triangles,
                                   cache.gbuffer, d_bary)
    d_positions += raster.project_vertices_vjp(
        cache.camera, mesh.positions, d_ndc, d_clip_w)
    return d_positions, d_colors


def coverage_fraction(cache: RenderCache) -> float:
    return float(np.mean(cache.gbuffer.triangle_id >= 0))
