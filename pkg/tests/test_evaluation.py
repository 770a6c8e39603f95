"""Metric protocol tests: crop, ICP, point-to-plane, EMD, recall, fitting."""

import numpy as np
import pytest
from scipy.optimize import linprog

from morphrec import evaluation, model, raster
from morphrec.errors import NumericError, ValidationError
from morphrec.evaluation import (Histogram1D, SimilarityTransform, crop_scan,
                                 clustering_recall, emd_1d,
                                 fit_pose_expression, icp_similarity,
                                 similarity_stats, symmetric_point_to_plane,
                                 video_average_embeddings)
from morphrec.network import EmbeddingPair


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis /= np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]],
                   [axis[2], 0, -axis[0]],
                   [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def deformed_sphere_mesh(seed=0, n=400, axes=(120.0, 100.0, 80.0)):
    """Anisotropic ellipsoid-ish mesh, free of rotational degeneracy."""
    basis = model.make_test_basis(seed, n, dims=(4, 3, 2))
    mesh = model.decode_mesh(basis, model.FaceParameters(
        np.zeros(4), np.zeros(3), np.zeros(2)))
    positions = mesh.positions * (np.array(axes) / 100.0)
    return model.Mesh(positions=positions, colors=mesh.colors,
                      triangles=mesh.triangles)


def emd_lp_oracle(a, b):
    """Optimal transport between equal-weight samples via linear program."""
    na, nb = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :]).ravel()
    a_eq = []
    b_eq = []
    for i in range(na):
        row = np.zeros((na, nb))
        row[i, :] = 1.0
        a_eq.append(row.ravel())
        b_eq.append(1.0 / na)
    for j in range(nb):
        row = np.zeros((na, nb))
        row[:, j] = 1.0
        a_eq.append(row.ravel())
        b_eq.append(1.0 / nb)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.success
    return res.fun


class TestCropScan:
    def make_mesh(self):
        pos = np.array([[0.0, 0, 0], [10.0, 0, 0], [0, 10.0, 0],
                        [200.0, 0, 0]])
        tri = np.array([[0, 1, 2], [1, 3, 2]])
        return model.Mesh(pos, np.full((4, 3), 0.5), tri)

    def test_all_inside_unchanged(self):
        mesh = self.make_mesh()
        out = crop_scan(mesh, np.zeros(3), 300.0)
        np.testing.assert_array_equal(out.positions, mesh.positions)
        np.testing.assert_array_equal(out.triangles, mesh.triangles)

    def test_boundary_exclusion(self):
        mesh = self.make_mesh()
        out = crop_scan(mesh, np.zeros(3), 95.0)
        assert len(out.positions) == 3
        # Only the triangle entirely inside survives, reindexed.
        np.testing.assert_array_equal(out.triangles, [[0, 1, 2]])

    def test_sphere_cropped_inside_radius(self):
        mesh = deformed_sphere_mesh(axes=(100.0, 100.0, 100.0))
        with pytest.raises(ValueError):
            crop_scan(mesh, np.zeros(3), 95.0)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            crop_scan(self.make_mesh(), np.zeros(3), -1.0)


class TestSimilarityTransform:
    def test_validation(self):
        with pytest.raises(ValidationError):
            SimilarityTransform(np.eye(3), np.zeros(3), -1.0)
        with pytest.raises(ValidationError):
            SimilarityTransform(2 * np.eye(3), np.zeros(3), 1.0)
        reflect = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValidationError):
            SimilarityTransform(reflect, np.zeros(3), 1.0)


class TestIcpSimilarity:
    def test_identity_on_self(self):
        mesh = deformed_sphere_mesh()
        transform, residual = icp_similarity(mesh, mesh)
        assert residual < 1e-9
        np.testing.assert_allclose(transform.rotation, np.eye(3), atol=1e-7)
        np.testing.assert_allclose(transform.scale, 1.0, atol=1e-7)

    @pytest.mark.parametrize("seed", range(8))
    def test_recovers_known_transform(self, seed):
        rng = np.random.default_rng(seed)
        mesh = deformed_sphere_mesh(seed=3)
        axis = rng.standard_normal(3)
        angle = rng.uniform(-np.pi / 6, np.pi / 6)
        rot = rotation_matrix(axis, angle)
        scale = rng.uniform(0.8, 1.25)
        trans = rng.uniform(-20, 20, size=3)
        moved = model.Mesh(scale * mesh.positions @ rot.T + trans,
                           mesh.colors, mesh.triangles)
        transform, residual = icp_similarity(mesh, moved)
        delta = transform.rotation @ rot.T
        angle_err = np.arccos(np.clip((np.trace(delta) - 1) / 2, -1, 1))
        assert angle_err < 1e-3
        assert abs(transform.scale - scale) < 1e-3
        assert residual < 1e-3

    def test_scale_only(self):
        mesh = deformed_sphere_mesh(seed=5)
        moved = model.Mesh(0.9 * mesh.positions, mesh.colors, mesh.triangles)
        transform, _ = icp_similarity(mesh, moved)
        assert abs(transform.scale - 0.9) < 1e-4

    def test_degenerate_covariance(self):
        # Collinear points have rank-1 spread.
        pos = np.column_stack([np.linspace(0, 10, 12),
                               np.zeros(12), np.zeros(12)])
        mesh = model.Mesh(pos, np.full((12, 3), 0.5),
                          np.array([[0, 1, 2]]))
        with pytest.raises(NumericError):
            icp_similarity(mesh, mesh)


class TestSymmetricPointToPlane:
    def flat_grid(self, offset=0.0, n=10):
        xs, ys = np.meshgrid(np.linspace(0, 90, n), np.linspace(0, 90, n))
        pos = np.column_stack([xs.ravel(), ys.ravel(),
                               np.full(n * n, offset)])
        tri = []
        for r in range(n - 1):
            for c in range(n - 1):
                a = r * n + c
                tri.append([a, a + 1, a + n])
                tri.append([a + 1, a + n + 1, a + n])
        return model.Mesh(pos, np.full((n * n, 3), 0.5), np.array(tri))

    def test_identical_meshes(self):
        mesh = deformed_sphere_mesh()
        assert symmetric_point_to_plane(mesh, mesh) == pytest.approx(0.0)

    def test_parallel_planes(self):
        a = self.flat_grid(0.0)
        b = self.flat_grid(3.0)
        assert symmetric_point_to_plane(a, b) == pytest.approx(3.0,
                                                               abs=1e-9)

    def test_symmetry(self):
        a = deformed_sphere_mesh(seed=1)
        b = deformed_sphere_mesh(seed=2, axes=(118.0, 99.0, 82.0))
        assert symmetric_point_to_plane(a, b) \
            == symmetric_point_to_plane(b, a)

    def test_aligned_after_icp(self):
        mesh = deformed_sphere_mesh(seed=4)
        rot = rotation_matrix([0.2, 1.0, 0.1], 0.3)
        moved = model.Mesh(1.1 * mesh.positions @ rot.T + [5.0, -3.0, 2.0],
                           mesh.colors, mesh.triangles)
        transform, _ = icp_similarity(mesh, moved)
        aligned = model.Mesh(transform.apply(mesh.positions), mesh.colors,
                             mesh.triangles)
        assert symmetric_point_to_plane(aligned, moved) < 1e-6


class TestVideoAverage:
    def make_pair(self, rng):
        ident = rng.standard_normal(8)
        return EmbeddingPair(rng.standard_normal(6),
                             ident / np.linalg.norm(ident))

    def test_single(self):
        pair = self.make_pair(np.random.default_rng(0))
        out = video_average_embeddings([pair])
        np.testing.assert_allclose(out.features, pair.features)
        np.testing.assert_allclose(out.identity, pair.identity)

    def test_copies(self):
        pair = self.make_pair(np.random.default_rng(1))
        out = video_average_embeddings([pair] * 5)
        np.testing.assert_allclose(out.identity, pair.identity, atol=1e-12)

    def test_opposite_identities(self):
        pair = self.make_pair(np.random.default_rng(2))
        flipped = EmbeddingPair(pair.features, -pair.identity)
        with pytest.raises(ValueError):
            video_average_embeddings([pair, flipped])

    def test_empty(self):
        with pytest.raises(ValueError):
            video_average_embeddings([])


class TestEmd1d:
    def test_identical(self):
        h = Histogram1D(np.array([0.1, -0.5, 0.7]))
        assert emd_1d(h, h) == pytest.approx(0.0)

    def test_deltas(self):
        assert emd_1d(Histogram1D(np.array([0.0])),
                      Histogram1D(np.array([1.0]))) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_lp_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, size=20)
        b = rng.uniform(-1, 1, size=20)
        ours = emd_1d(Histogram1D(a), Histogram1D(b))
        assert abs(ours - emd_lp_oracle(np.sort(a), np.sort(b))) < 1e-9

    @pytest.mark.parametrize("seed", range(4))
    def test_unequal_sizes_lp_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = rng.uniform(-1, 1, size=15)
        b = rng.uniform(-1, 1, size=23)
        ours = emd_1d(Histogram1D(a), Histogram1D(b))
        assert abs(ours - emd_lp_oracle(np.sort(a), np.sort(b))) < 1e-9

    def test_metric_axioms(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            hs = [Histogram1D(rng.uniform(-1, 1, size=12)) for _ in range(3)]
            d01 = emd_1d(hs[0], hs[1])
            d10 = emd_1d(hs[1], hs[0])
            assert d01 == pytest.approx(d10, abs=1e-12)
            assert d01 >= 0
            assert d01 <= emd_1d(hs[0], hs[2]) + emd_1d(hs[2], hs[1]) + 1e-9

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            Histogram1D(np.array([1.5]))


class TestClusteringRecall:
    def unit(self, rng, d=16):
        v = rng.standard_normal(d)
        return v / np.linalg.norm(v)

    def test_identical_embeddings(self):
        rng = np.random.default_rng(0)
        photos = {f"p{i}": (f"id{i}", self.unit(rng)) for i in range(10)}
        renders = {f"r{i}": (f"id{i}", photos[f"p{i}"][1])
                   for i in range(10)}
        out = clustering_recall(renders, photos, [1, 5])
        assert out[1] == 1.0 and out[5] == 1.0

    def brute_force(self, renders, photos, k_list):
        photo_items = list(photos.items())
        hits = {k: 0 for k in k_list}
        for identity, vec in renders.values():
            scored = []
            for pos, (key, (pid, pv)) in enumerate(photo_items):
                cos = np.dot(vec, pv) / (np.linalg.norm(vec)
                                         * np.linalg.norm(pv))
                scored.append((-cos, pos, pid))
            scored.sort()
            for k in k_list:
                if any(pid == identity for _, _, pid in scored[:k]):
                    hits[k] += 1
        return {k: hits[k] / len(renders) for k in k_list}

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        photos = {f"p{i}": (f"id{i % 6}", self.unit(rng))
                  for i in range(20)}
        renders = {f"r{i}": (f"id{i % 6}", self.unit(rng))
                   for i in range(12)}
        k_list = [1, 3, 5]
        assert clustering_recall(renders, photos, k_list) \
            == self.brute_force(renders, photos, k_list)

    def test_global_rotation_invariance(self):
        rng = np.random.default_rng(4)
        d = 8
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        photos = {f"p{i}": (f"id{i % 4}", self.unit(rng, d))
                  for i in range(12)}
        renders = {f"r{i}": (f"id{i % 4}", self.unit(rng, d))
                   for i in range(8)}
        rotated_p = {k: (ident, q @ v) for k, (ident, v) in photos.items()}
        rotated_r = {k: (ident, q @ v) for k, (ident, v) in renders.items()}
        assert clustering_recall(renders, photos, [1, 5]) \
            == clustering_recall(rotated_r, rotated_p, [1, 5])

    def test_empty_error(self):
        with pytest.raises(ValueError):
            clustering_recall({}, {"p": ("a", np.ones(4))}, [1])


class TestSimilarityStats:
    def test_identical_pairs(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal(8)
        hist, mean = similarity_stats([(v, v)] * 4)
        assert mean == pytest.approx(1.0)

    def test_orthogonal(self):
        e1 = np.zeros(4)
        e1[0] = 1
        e2 = np.zeros(4)
        e2[1] = 1
        _, mean = similarity_stats([(e1, e2)])
        assert mean == pytest.approx(0.0)

    def test_direct_oracle(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.standard_normal(8), rng.standard_normal(8))
                 for _ in range(9)]
        hist, mean = similarity_stats(pairs)
        direct = [float(np.dot(a, b)
                        / (np.linalg.norm(a) * np.linalg.norm(b)))
                  for a, b in pairs]
        assert mean == pytest.approx(np.mean(direct), abs=1e-12)
        np.testing.assert_allclose(hist.values, np.sort(direct))

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            similarity_stats([(np.zeros(4), np.ones(4))])


class TestFitPoseExpression:
    def setup_scene(self, seed=0):
        basis = model.make_test_basis(seed, 500)
        rng = np.random.default_rng(seed + 50)
        params = model.sample_parameters(rng, basis)
        camera = raster.Camera(eye=np.array([0.0, 0.0, 533.0]),
                               look_at=np.zeros(3),
                               up=np.array([0.0, 1.0, 0.0]),
                               vertical_fov=np.deg2rad(30.0),
                               near=10.0, far=5000.0,
                               width=256, height=256)
        idx = rng.choice(len(basis.mu_shape) // 3, size=68, replace=False)
        return basis, params, camera, idx, rng

    def targets_for(self, basis, params, camera, idx, rot, trans, expr):
        mesh = model.decode_mesh(basis, model.FaceParameters(
            params.shape, params.texture, expr))
        world = mesh.positions[idx] @ rot.T + trans
        pix, _ = evaluation._project_pixels(camera, world)
        return pix

    def test_neutral_fixed_point(self):
        basis, params, camera, idx, _ = self.setup_scene()
        targets = self.targets_for(basis, params, camera, idx, np.eye(3),
                                   np.zeros(3), np.zeros(basis.dims[2]))
        fit = fit_pose_expression(basis, params, idx, targets, camera)
        assert fit.residual < 1e-6
        assert np.linalg.norm(fit.expression) < 1e-3

    @pytest.mark.parametrize("seed", range(4))
    def test_synthesize_then_fit(self, seed):
        basis, params, camera, idx, rng = self.setup_scene(seed)
        rot = rotation_matrix(rng.standard_normal(3),
                              rng.uniform(-0.3, 0.3))
        trans = rng.uniform(-15, 15, size=3)
        expr = rng.standard_normal(basis.dims[2]) * 0.5
        targets = self.targets_for(basis, params, camera, idx, rot, trans,
                                   expr)
        fit = fit_pose_expression(basis, params, idx, targets, camera)
        assert fit.residual < 0.5

    def test_residual_zero_at_truth(self):
        basis, params, camera, idx, _ = self.setup_scene(2)
        expr = np.zeros(basis.dims[2])
        targets = self.targets_for(basis, params, camera, idx, np.eye(3),
                                   np.zeros(3), expr)
        fit = fit_pose_expression(basis, params, idx, targets, camera)
        assert fit.residual == pytest.approx(0.0, abs=1e-6)

    def test_bad_landmark_count(self):
        basis, params, camera, idx, _ = self.setup_scene(3)
        with pytest.raises(ValueError):
            fit_pose_expression(basis, params, idx[:10],
                                np.zeros((10, 2)), camera)
