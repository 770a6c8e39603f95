"""Geometry and embedding metrics: ICP alignment, point-to-plane error,
1-D earth mover's distance, recall@k, and landmark pose/expression fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import model, raster
from .errors import NumericError, ValidationError
from .network import EmbeddingPair

OVERLAP_MEDIAN_FACTOR = 5.0
DIVERGENCE_LIMIT = 50


@dataclass
class SimilarityTransform:
    rotation: np.ndarray      # 3x3, orthonormal, det +1
    translation: np.ndarray   # (3,) mm
    scale: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        if np.abs(self.rotation @ self.rotation.T
                  - np.eye(3)).max() > 1e-9:
            raise ValidationError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValidationError("rotation must be proper (det +1)")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass
class Histogram1D:
    """Sorted cosine-score samples in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.sort(np.asarray(self.values, dtype=np.float64))
        if len(self.values) and (self.values[0] < -1.0 - 1e-12
                                 or self.values[-1] > 1.0 + 1e-12):
            raise ValidationError("cosine scores must lie in [-1, 1]")


@dataclass
class PoseExpressionFit:
    rotation: np.ndarray
    translation: np.ndarray
    expression: np.ndarray
    residual: float        # RMS reprojection error, pixels
    steps: int


def crop_scan(mesh: model.Mesh, center: np.ndarray,
              radius_mm: float) -> model.Mesh:
    """Keep vertices within a Euclidean ball and the triangles they span."""
    if radius_mm <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    keep = np.linalg.norm(mesh.positions - center, axis=1) <= radius_mm
    if not keep.any():
        raise ValueError("crop removed every vertex")
    new_index = np.cumsum(keep) - 1
    tri_keep = keep[mesh.triangles].all(axis=1)
    triangles = new_index[mesh.triangles[tri_keep]]
    return model.Mesh(positions=mesh.positions[keep],
                      colors=mesh.colors[keep],
                      triangles=triangles.astype(np.int64))


def _umeyama(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    """Closed-form least-squares similarity between paired point sets."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    xs = source - mu_s
    xt = target - mu_t
    cov = xt.T @ xs / len(source)
    u, s, vt = np.linalg.svd(cov)
    if s[-1] < 1e-12 * max(s[0], 1.0):
        raise NumericError("degenerate covariance in similarity fit")
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rotation = u @ fix @ vt
    var_s = (xs ** 2).sum() / len(source)
    scale = np.trace(np.diag(s) @ fix) / var_s
    translation = mu_t - scale * rotation @ mu_s
    return SimilarityTransform(rotation=rotation, translation=translation,
                               scale=scale)


def _principal_axes(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evecs = evecs[:, order]
    if np.linalg.det(evecs) < 0:
        evecs[:, -1] *= -1.0    # keep a right-handed axis frame
    return evals[order], evecs


def _initial_transform(source: np.ndarray,
                       target: np.ndarray) -> SimilarityTransform:
    """Centroid plus principal-axes alignment.

    Axis alignment is only attempted when the spectra are well separated;
    the four proper sign combinations are disambiguated by residual.
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    ev_s, ax_s = _principal_axes(source)
    ev_t, ax_t = _principal_axes(target)
    scale = np.sqrt(ev_t.sum() / max(ev_s.sum(), 1e-30))
    separated = np.all(ev_s[:-1] > 1.2 * ev_s[1:]) \
        and np.all(ev_t[:-1] > 1.2 * ev_t[1:])
    candidates = [np.eye(3)]
    if separated:
        for signs in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
            candidates.append(ax_t @ np.diag(signs) @ ax_s.T)
    tree = cKDTree(target)
    best = None
    for rotation in candidates:
        transform = SimilarityTransform(
            rotation=rotation, translation=mu_t - scale * rotation @ mu_s,
            scale=scale)
        residual = np.mean(tree.query(transform.apply(source))[0] ** 2)
        if best is None or residual < best[0]:
            best = (residual, transform)
    return best[1]


def icp_similarity(source: model.Mesh, target: model.Mesh,
                   max_iters: int = 50, tol: float = 1e-10
                   ) -> tuple[SimilarityTransform, float]:
    """Iterative closest point with isotropic scale.

    Alternates exact nearest-neighbor correspondence with the closed-form
    similarity update; returns the transform and the final RMS residual in
    millimeters.  The residual is non-increasing across iterations.
    """
    src = np.asarray(source.positions, dtype=np.float64)
    tgt = np.asarray(target.positions, dtype=np.float64)
    if len(src) < 3 or len(tgt) < 3:
        raise ValueError("both meshes need at least three vertices")
    tree = cKDTree(tgt)
    transform = _initial_transform(src, tgt)
    prev = np.inf
    residual = np.inf
    for _ in range(max_iters):
        moved = transform.apply(src)
        dists, idx = tree.query(moved)
        candidate = _umeyama(src, tgt[idx])
        new_residual = np.sqrt(np.mean(
            np.sum((candidate.apply(src) - tgt[idx]) ** 2, axis=1)))
        if new_residual <= residual:
            transform = candidate
            residual = new_residual
        if prev - residual < tol:
            break
        prev = residual
    return transform, float(residual)


def _directed_point_to_plane(points: np.ndarray, surface: np.ndarray,
                             surface_normals: np.ndarray
                             ) -> tuple[np.ndarray, np.ndarray]:
    tree = cKDTree(surface)
    dists, idx = tree.query(points)
    plane = np.abs(np.einsum("ij,ij->i", points - surface[idx],
                             surface_normals[idx]))
    return plane, dists


def symmetric_point_to_plane(mesh_a: model.Mesh, mesh_b: model.Mesh,
                             region: Optional[tuple] = None) -> float:
    """Mean point-to-plane distance in mm, averaged over both directions.

    Unless an explicit (mask_a, mask_b) region is given, the overlap is
    vertices whose nearest-neighbor distance is below five times the
    median, which discards non-intersecting rims.
    """
    a = mesh_a if mesh_a.normals is not None \
        else model.compute_vertex_normals(mesh_a)
    b = mesh_b if mesh_b.normals is not None \
        else model.compute_vertex_normals(mesh_b)
    p_ab, d_ab = _directed_point_to_plane(a.positions, b.positions,
                                          b.normals)
    p_ba, d_ba = _directed_point_to_plane(b.positions, a.positions,
                                          a.normals)
    if region is not None:
        mask_ab, mask_ba = region
    else:
        mask_ab = d_ab <= OVERLAP_MEDIAN_FACTOR * np.median(d_ab)
        mask_ba = d_ba <= OVERLAP_MEDIAN_FACTOR * np.median(d_ba)
    if not mask_ab.any() or not mask_ba.any():
        raise ValueError("empty overlap region")
    return 0.5 * (float(p_ab[mask_ab].mean()) + float(p_ba[mask_ba].mean()))


def video_average_embeddings(pairs: Sequence[EmbeddingPair]
                             ) -> EmbeddingPair:
    """Per-video aggregation: mean features, renormalized mean identity."""
    if not pairs:
        raise ValueError("need at least one embedding")
    features = np.mean([p.features for p in pairs], axis=0)
    identity = np.mean([p.identity for p in pairs], axis=0)
    norm = np.linalg.norm(identity)
    if norm < 1e-9:
        raise ValueError("identity vectors cancel; mean has zero norm")
    return EmbeddingPair(features=features, identity=identity / norm)


def emd_1d(h1: Histogram1D, h2: Histogram1D) -> float:
    """Exact 1-D earth mover's distance between equal-weight sample sets.

    Computed as the integral of |CDF1 - CDF2| over the merged support,
    which equals the optimal transport cost for the absolute-difference
    ground metric; sample counts may differ.
    """
    x1 = h1.values
    x2 = h2.values
    if not len(x1) or not len(x2):
        raise ValueError("histograms must be non-empty")
    grid = np.union1d(x1, x2)
    cdf1 = np.searchsorted(x1, grid, side="right") / len(x1)
    cdf2 = np.searchsorted(x2, grid, side="right") / len(x2)
    return float(np.sum(np.abs(cdf1 - cdf2)[:-1] * np.diff(grid)))


def clustering_recall(renders: dict, photos: dict,
                      k_list: Sequence[int]) -> dict[int, float]:
    """Recall@k of same-identity photos under cosine ranking.

    Both arguments map keys to ``(identity, vector)`` tuples.  For each
    render the photos are ranked by cosine similarity descending; ties are
    broken by photo key order (insertion order).  Returns the fraction of
    renders whose top-k contains a photo of the same identity, per k.
    """
    if not renders or not photos:
        raise ValueError("render and photo sets must be non-empty")
    photo_keys = list(photos)
    photo_ids = [photos[k][0] for k in photo_keys]
    mat = np.stack([photos[k][1] for k in photo_keys])
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    results = {k: 0 for k in k_list}
    for identity, vec in renders.values():
        scores = mat @ (np.asarray(vec) / np.linalg.norm(vec))
        order = np.argsort(-scores, kind="stable")
        for k in k_list:
            top = order[:k]
            if any(photo_ids[i] == identity for i in top):
                results[k] += 1
    return {k: results[k] / len(renders) for k in k_list}


def similarity_stats(pairs: Sequence[tuple]) -> tuple[Histogram1D, float]:
    """Cosine score per pair plus the arithmetic mean."""
    if not pairs:
        raise ValueError("need at least one pair")
    scores = []
    for g1, g2 in pairs:
        n1 = np.linalg.norm(g1)
        n2 = np.linalg.norm(g2)
        if n1 < 1e-12 or n2 < 1e-12:
            raise ValueError("zero vector in similarity pair")
        scores.append(float(np.dot(g1, g2) / (n1 * n2)))
    return Histogram1D(np.array(scores)), float(np.mean(scores))


def _rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(axis_angle)
    if theta < 1e-12:
        return np.eye(3)
    k = axis_angle / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def _project_pixels(camera: raster.Camera,
                    points: np.ndarray) -> np.ndarray:
    proj = raster.project_vertices(camera, points)
    screen = np.column_stack([
        (proj.ndc[:, 0] + 1.0) * 0.5 * camera.width,
        (1.0 - proj.ndc[:, 1]) * 0.5 * camera.height])
    return screen, proj


def fit_pose_expression(basis: model.ModelBasis,
                        params: model.FaceParameters,
                        landmark_indices: np.ndarray,
                        target_2d: np.ndarray,
                        camera: raster.Camera,
                        max_steps: int = 400,
                        tol: float = 1e-12) -> PoseExpressionFit:
    """Fit a 6-DoF pose and expression coefficients to 2-D landmarks.

    Minimizes the summed squared pixel distance of the projected landmark
    vertices by diagonally preconditioned gradient descent with
    backtracking halving, starting from the neutral expression and
    identity pose.  Expression is optimized in whitened coordinates
    (scaled by the expression standard deviations) for conditioning.
    """
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)
    target_2d = np.asarray(target_2d, dtype=np.float64)
    if landmark_indices.shape != (68,) or target_2d.shape != (68, 2):
        raise ValueError("need 68 landmark correspondences")
    n = len(landmark_indices)
    # Fixed shape/texture contribution at the landmark vertices.
    base_mesh = model.decode_mesh(basis, model.FaceParameters(
        params.shape, params.texture, np.zeros(basis.dims[2])))
    base = base_mesh.positions[landmark_indices]           # (68, 3)
    p_expr = basis.P_expr.reshape(-1, 3, basis.dims[2])[landmark_indices]
    p_expr = p_expr * basis.W_expr[None, None, :]          # whitened basis

    rotation = np.eye(3)
    translation = np.zeros(3)
    e_white = np.zeros(basis.dims[2])

    def landmarks_world(rot, trans, ew):
        verts = base + p_expr @ ew
        return verts @ rot.T + trans

    def residual_and_grads(rot, trans, ew):
        world = landmarks_world(rot, trans, ew)
        pix, proj = _project_pixels(camera, world)
        diff = pix - target_2d                              # (68, 2)
        value = float(np.sum(diff ** 2))
        # Pixel -> world Jacobian via the projection adjoint.
        d_ndc = np.zeros((n, 3))
        d_ndc[:, 0] = 2.0 * diff[:, 0] * 0.5 * camera.width
        d_ndc[:, 1] = -2.0 * diff[:, 1] * 0.5 * camera.height
        d_world = raster.project_vertices_vjp(camera, world, d_ndc)
        g_trans = d_world.sum(axis=0)
        # Left-increment rotation: d(exp([d]x) R v)/dd at 0 is -[R v]x.
        rotated = (world - translation)
        g_rot = np.sum(np.cross(rotated, d_world), axis=0)
        g_expr = np.einsum("ij,ijk->k", d_world @ rot, p_expr)
        return value, g_rot, g_trans, g_expr

    # Diagonal preconditioning from rough parameter sensitivities.
    depth = max(np.linalg.norm(camera.eye - camera.look_at), 1.0)
    px_per_mm = camera.height / (2.0 * depth
                                 * np.tan(camera.vertical_fov / 2.0))
    scale_t = 1.0 / (n * px_per_mm ** 2)
    extent = float(np.abs(base).max())
    scale_r = scale_t / max(extent ** 2, 1.0)
    scale_e = scale_t

    value = residual_and_grads(rotation, translation, e_white)[0]
    step = 0.25
    increases = 0
    trace = [value]
    steps_done = 0
    for steps_done in range(1, max_steps + 1):
        _, g_rot, g_trans, g_expr = residual_and_grads(
            rotation, translation, e_white)
        improved = False
        trial = step
        for _ in range(50):
            rot_new = _rodrigues(-trial * scale_r * g_rot) @ rotation
            trans_new = translation - trial * scale_t * g_trans
            e_new = e_white - trial * scale_e * g_expr
            new_value = residual_and_grads(rot_new, trans_new, e_new)[0]
            if new_value < value:
                improved = True
                break
            trial *= 0.5
        if not improved:
            break
        rotation, translation, e_white = rot_new, trans_new, e_new
        if new_value > value:
            increases += 1
            if increases >= DIVERGENCE_LIMIT:
                raise NumericError(
                    "landmark fit diverged; residual trace: "
                    f"{trace[-DIVERGENCE_LIMIT:]}")
        else:
            increases = 0
        converged = value - new_value < tol
        value = new_value
        trace.append(value)
        step = min(trial * 2.0, 4.0)
        if converged:
            break
    rms = np.sqrt(value / n)
    return PoseExpressionFit(rotation=rotation, translation=translation,
                             expression=e_white / basis.W_expr,
                             residual=float(rms), steps=steps_done)
