"""Linear PCA face model: basis storage, decoding, sampling, vertex normals.

The model follows the classic morphable-model construction: a mesh is the
stored mean plus a linear combination of orthonormal basis columns, each
scaled by the square root of its PCA eigenvalue.  Shape and expression share
the vertex positions; texture is per-vertex linear RGB.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull

from .errors import FormatError, ValidationError

BASIS_MAGIC = b"MMB1"
BASIS_VERSION = 1

DEFAULT_DIMS = (199, 199, 100)  # shape, texture, expression


@dataclass
class ModelBasis:
    """Mean, PCA bases and eigenvalue-sqrt scales of the linear face model."""

    num_vertices: int
    mu_shape: np.ndarray      # (3N,) millimeters
    mu_texture: np.ndarray    # (3N,) linear RGB in [0, 1]
    P_shape: np.ndarray       # (3N, d_shape), orthonormal columns
    P_expr: np.ndarray        # (3N, d_expr)
    P_texture: np.ndarray     # (3N, d_texture)
    W_shape: np.ndarray       # (d_shape,) positive
    W_expr: np.ndarray        # (d_expr,) positive
    W_texture: np.ndarray     # (d_texture,) positive
    triangles: np.ndarray     # (T, 3) int
    nose_tip_index: int

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.P_shape.shape[1], self.P_texture.shape[1],
                self.P_expr.shape[1])


@dataclass
class FaceParameters:
    """Standard-normal coefficient vectors for one face."""

    shape: np.ndarray
    texture: np.ndarray
    expression: np.ndarray

    def copy(self) -> "FaceParameters":
        return FaceParameters(self.shape.copy(), self.texture.copy(),
                              self.expression.copy())


@dataclass
class Mesh:
    """Decoded geometry: positions in mm, per-vertex linear RGB colors."""

    positions: np.ndarray            # (N, 3)
    colors: np.ndarray               # (N, 3)
    triangles: np.ndarray            # (T, 3) shared topology
    normals: Optional[np.ndarray] = field(default=None)  # (N, 3) unit


def validate_basis(basis: ModelBasis) -> None:
    """Check all ModelBasis invariants, raising ValidationError on failure."""
    n = basis.num_vertices
    if n < 4:
        raise ValidationError(f"num_vertices must be >= 4, got {n}")
    for name in ("W_shape", "W_expr", "W_texture"):
        w = getattr(basis, name)
        if not np.all(w > 0):
            raise ValidationError(f"{name} must be strictly positive")
    if basis.mu_shape.shape != (3 * n,) or basis.mu_texture.shape != (3 * n,):
        raise ValidationError("mean vectors must have length 3N")
    if np.any(basis.mu_texture < 0) or np.any(basis.mu_texture > 1):
        raise ValidationError("mu_texture entries must lie in [0, 1]")
    tris = basis.triangles
    if tris.ndim != 2 or tris.shape[1] != 3:
        raise ValidationError("triangles must be a (T, 3) index array")
    if tris.size and (tris.min() < 0 or tris.max() >= n):
        raise ValidationError("triangle index out of range")
    degenerate = ((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2])
                  | (tris[:, 0] == tris[:, 2]))
    if np.any(degenerate):
        raise ValidationError("degenerate triangle (repeated vertex index)")
    if not 0 <= basis.nose_tip_index < n:
        raise ValidationError("nose_tip_index out of range")
    d_s, d_t, d_e = basis.dims
    for name, mat, d in (("P_shape", basis.P_shape, d_s),
                         ("P_texture", basis.P_texture, d_t),
                         ("P_expr", basis.P_expr, d_e)):
        if mat.shape != (3 * n, d):
            raise ValidationError(f"{name} has shape {mat.shape}, "
                                  f"expected {(3 * n, d)}")
    if basis.W_shape.shape != (d_s,) or basis.W_texture.shape != (d_t,) \
            or basis.W_expr.shape != (d_e,):
        raise ValidationError("W vector lengths must match basis dims")


def _fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic quasi-uniform unit-sphere points (n, 3)."""
    i = np.arange(n, dtype=np.float64)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * i / golden
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _hull_triangles(points: np.ndarray) -> np.ndarray:
    """Closed outward-oriented triangulation of a convex point cloud."""
    hull = ConvexHull(points)
    tris = hull.simplices.copy()
    center = points.mean(axis=0)
    a, b, c = points[tris[:, 0]], points[tris[:, 1]], points[tris[:, 2]]
    normals = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", normals, a - center) < 0
    tris[inward] = tris[inward][:, [0, 2, 1]]
    return np.ascontiguousarray(tris, dtype=np.int64)


def _smooth_feature_matrix(unit_pos: np.ndarray, n_features: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Smooth scalar fields on the sphere, evaluated per vertex (N, M).

    The first features are low-order polynomials of the unit position; the
    rest are sinusoids with random fixed wave vectors of increasing
    frequency.  Smoothness keeps basis columns visible after image-space
    downsampling, which the training stages rely on.
    """
    x, y, z = unit_pos[:, 0], unit_pos[:, 1], unit_pos[:, 2]
    feats = [np.ones_like(x), x, y, z, x * y, y * z, x * z,
             x * x - y * y, 3.0 * z * z - 1.0]
    while len(feats) < n_features:
        k = rng.uniform(1.0, 6.0) * _random_unit(rng)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        feats.append(np.sin(unit_pos @ k + phase))
    return np.column_stack(feats[:n_features])


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _orthonormal_smooth_columns(unit_pos: np.ndarray, n_cols: int,
                                rng: np.random.Generator) -> np.ndarray:
    """(3N, n_cols) matrix with orthonormal, spatially smooth columns."""
    n = unit_pos.shape[0]
    # Enough smooth features that 3 * M >= n_cols with margin.
    n_feat = max(16, (n_cols + 2) // 3 + 8)
    phi = _smooth_feature_matrix(unit_pos, n_feat, rng)
    raw = np.empty((3 * n, n_cols))
    for j in range(n_cols):
        coef = rng.standard_normal((n_feat, 3))
        raw[:, j] = (phi @ coef).ravel()
    q, r = np.linalg.qr(raw)
    # Fix column signs so the generator is deterministic across BLAS builds.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def make_test_basis(seed: int, n_vertices: int,
                    dims: tuple[int, int, int] = DEFAULT_DIMS) -> ModelBasis:
    """Deterministic synthetic basis standing in for scanned face data.

    The mean shape is a closed sphere-like mesh of ~100 mm radius; basis
    columns are orthonormal smooth random fields; eigenvalue-sqrt entries
    are log-uniform in [0.1, 10].
    """
    if n_vertices < 4:
        raise ValueError(f"n_vertices must be >= 4, got {n_vertices}")
    d_s, d_t, d_e = dims
    if max(d_s, d_t, d_e) > 3 * n_vertices:
        raise ValueError("basis dims cannot exceed 3 * n_vertices")
    rng = np.random.default_rng(seed)
    unit_pos = _fibonacci_sphere(n_vertices)
    mu_shape = (100.0 * unit_pos).ravel()
    triangles = _hull_triangles(unit_pos)
    nose_tip = int(np.argmax(unit_pos[:, 2]))

    # Skin-like mean color with smooth spatial variation, kept inside [0, 1].
    base = np.array([0.80, 0.60, 0.50])
    variation = _smooth_feature_matrix(unit_pos, 12, rng)[:, 1:4]
    mu_texture = np.clip(base + 0.10 * variation, 0.05, 0.95).ravel()

    P_shape = _orthonormal_smooth_columns(unit_pos, d_s, rng)
    P_texture = _orthonormal_smooth_columns(unit_pos, d_t, rng)
    P_expr = _orthonormal_smooth_columns(unit_pos, d_e, rng)

    def log_uniform(d):
        return np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=d))

    basis = ModelBasis(
        num_vertices=n_vertices,
        mu_shape=mu_shape,
        mu_texture=mu_texture,
        P_shape=P_shape,
        P_expr=P_expr,
        P_texture=P_texture,
        W_shape=log_uniform(d_s),
        W_expr=log_uniform(d_e),
        W_texture=log_uniform(d_t),
        triangles=triangles,
        nose_tip_index=nose_tip,
    )
    validate_basis(basis)
    return basis


def save_basis(basis: ModelBasis, path) -> None:
    """Write the little-endian binary basis file (f32 payload)."""
    validate_basis(basis)
    d_s, d_t, d_e = basis.dims
    with open(path, "wb") as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack("<6I", BASIS_VERSION, basis.num_vertices,
                            d_s, d_t, d_e, basis.nose_tip_index))
        f.write(struct.pack("<I", basis.triangles.shape[0]))
        for arr in (basis.mu_shape, basis.mu_texture, basis.P_shape,
                    basis.P_expr, basis.P_texture, basis.W_shape,
                    basis.W_expr, basis.W_texture):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(basis.triangles, dtype="<u4").tobytes())


def load_basis(path) -> ModelBasis:
    """Read and validate a binary basis file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BASIS_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {BASIS_MAGIC!r}")
        header = f.read(28)
        if len(header) != 28:
            raise FormatError("truncated basis header")
        version, n, d_s, d_t, d_e, nose_tip, n_tri = struct.unpack(
            "<7I", header)
        if version != BASIS_VERSION:
            raise FormatError(f"unsupported basis version {version}")

        def read_f4(count):
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise FormatError("truncated basis payload")
            return np.frombuffer(raw, dtype="<f4").astype(np.float64)

        mu_shape = read_f4(3 * n)
        mu_texture = read_f4(3 * n)
        P_shape = read_f4(3 * n * d_s).reshape(3 * n, d_s)
        P_expr = read_f4(3 * n * d_e).reshape(3 * n, d_e)
        P_texture = read_f4(3 * n * d_t).reshape(3 * n, d_t)
        W_shape = read_f4(d_s)
        W_expr = read_f4(d_e)
        W_texture = read_f4(d_t)
        raw = f.read(12 * n_tri)
        if len(raw) != 12 * n_tri:
            raise FormatError("truncated triangle block")
        triangles = np.frombuffer(raw, dtype="<u4").astype(
            np.int64).reshape(n_tri, 3)
    basis = ModelBasis(n, mu_shape, mu_texture, P_shape, P_expr, P_texture,
                       W_shape, W_expr, W_texture, triangles, nose_tip)
    validate_basis(basis)
    return basis


def _check_param_dims(basis: ModelBasis, params: FaceParameters) -> None:
    d_s, d_t, d_e = basis.dims
    if params.shape.shape != (d_s,) or params.texture.shape != (d_t,) \
            or params.expression.shape != (d_e,):
        raise ValueError(
            f"parameter dims {params.shape.shape[0]}/"
            f"{params.texture.shape[0]}/{params.expression.shape[0]} "
            f"do not match basis dims {basis.dims}")


def decode_mesh(basis: ModelBasis, params: FaceParameters) -> Mesh:
    """Mean plus scaled basis combination; colors stay unclamped here."""
    _check_param_dims(basis, params)
    pos = basis.mu_shape + basis.P_shape @ (basis.W_shape * params.shape) \
        + basis.P_expr @ (basis.W_expr * params.expression)
    col = basis.mu_texture + basis.P_texture @ (
        basis.W_texture * params.texture)
    n = basis.num_vertices
    return Mesh(positions=pos.reshape(n, 3), colors=col.reshape(n, 3),
                triangles=basis.triangles)


def decode_mesh_vjp(basis: ModelBasis, d_positions: np.ndarray,
                    d_colors: np.ndarray) -> FaceParameters:
    """Transpose of the linear decode map.

    ``d_positions``/``d_colors`` are (N, 3) adjoints of the mesh fields; the
    result is the gradient with respect to the parameter vectors.
    """
    n = basis.num_vertices
    if d_positions.shape != (n, 3) or d_colors.shape != (n, 3):
        raise ValueError("adjoint shapes must be (N, 3)")
    dp = d_positions.ravel()
    dc = d_colors.ravel()
    return FaceParameters(
        shape=basis.W_shape * (basis.P_shape.T @ dp),
        texture=basis.W_texture * (basis.P_texture.T @ dc),
        expression=basis.W_expr * (basis.P_expr.T @ dp),
    )


def sample_parameters(rng: np.random.Generator, basis: ModelBasis,
                      sample_expression: bool = False) -> FaceParameters:
    """Draw i.i.d. standard-normal shape/texture; expression zero by default."""
    d_s, d_t, d_e = basis.dims
    shape = rng.standard_normal(d_s)
    texture = rng.standard_normal(d_t)
    if sample_expression:
        expression = rng.standard_normal(d_e)
    else:
        expression = np.zeros(d_e)
    return FaceParameters(shape=shape, texture=texture, expression=expression)


def vertex_normals(positions: np.ndarray,
                   triangles: np.ndarray) -> tuple[np.ndarray, int]:
    """Area-weighted vertex normals and the count of degenerate fallbacks.

    The unnormalized face cross product already carries the area weight, so
    summing it per vertex and normalizing gives the area-weighted average.
    Vertices whose incident faces are all degenerate fall back to +z.
    """
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    face = np.cross(b - a, c - a)
    acc = np.zeros_like(positions)
    for k in range(3):
        np.add.at(acc, triangles[:, k], face)
    norms = np.linalg.norm(acc, axis=1)
    bad = norms < 1e-12
    n_fallback = int(bad.sum())
    out = np.empty_like(acc)
    out[~bad] = acc[~bad] / norms[~bad, None]
    out[bad] = (0.0, 0.0, 1.0)
    return out, n_fallback


def vertex_normals_vjp(positions: np.ndarray, triangles: np.ndarray,
                       d_normals: np.ndarray) -> np.ndarray:
    """Adjoint of vertex_normals with respect to vertex positions."""
    a = positions[triangles[:, 0]]
    b = positions[triangles[:, 1]]
    c = positions[triangles[:, 2]]
    face = np.cross(b - a, c - a)
    acc = np.zeros_like(positions)
    for k in range(3):
        np.add.at(acc, triangles[:, k], face)
    norms = np.linalg.norm(acc, axis=1)
    bad = norms < 1e-12

    # d(acc / |acc|): project the adjoint onto the tangent of normalization.
    d_acc = np.zeros_like(acc)
    ok = ~bad
    n_hat = acc[ok] / norms[ok, None]
    g = d_normals[ok]
    d_acc[ok] = (g - n_hat * np.einsum("ij,ij->i", n_hat, g)[:, None]) \
        / norms[ok, None]

    # Each face normal feeds the accumulators of its three vertices.
    d_face = d_acc[triangles[:, 0]] + d_acc[triangles[:, 1]] \
        + d_acc[triangles[:, 2]]
    # face = cross(u, v), u = b - a, v = c - a.
    u = b - a
    v = c - a
    d_u = np.cross(v, d_face)
    d_v = np.cross(d_face, u)
    d_pos = np.zeros_like(positions)
    np.add.at(d_pos, triangles[:, 1], d_u)
    np.add.at(d_pos, triangles[:, 2], d_v)
    np.add.at(d_pos, triangles[:, 0], -(d_u + d_v))
    return d_pos


def compute_vertex_normals(mesh: Mesh) -> Mesh:
    """Return a copy of the mesh with unit vertex normals attached."""
    normals, _ = vertex_normals(mesh.positions, mesh.triangles)
    return replace(mesh, normals=normals)
