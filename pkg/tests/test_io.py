"""Mesh/image/config/manifest IO round trips and error reporting."""

import numpy as np
import pytest

from morphrec import io, model
from morphrec.errors import FormatError


def sample_mesh(seed=0, n=40, n_tri=30):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-50, 50, size=(n, 3))
    colors = rng.uniform(0, 1, size=(n, 3))
    triangles = rng.integers(0, n, size=(n_tri, 3))
    return model.Mesh(positions=positions, colors=colors,
                      triangles=triangles)


class TestObj:
    def test_round_trip_within_f32(self, tmp_path):
        mesh = sample_mesh()
        path = tmp_path / "m.obj"
        io.write_obj(mesh, path)
        back = io.read_obj(path)
        np.testing.assert_allclose(back.positions, mesh.positions,
                                   rtol=2e-7, atol=1e-6)
        np.testing.assert_allclose(back.colors, mesh.colors, rtol=2e-7,
                                   atol=1e-7)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)

    def test_missing_colors_warn_gray(self, tmp_path):
        path = tmp_path / "plain.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        with pytest.warns(UserWarning, match="gray"):
            mesh = io.read_obj(path)
        np.testing.assert_array_equal(mesh.colors, 0.5)

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0 1 1 1\nv nope 0 0 1 1 1\n")
        with pytest.raises(FormatError, match="bad.obj:2"):
            io.read_obj(path)

    def test_bad_vertex_arity(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0\n")
        with pytest.raises(FormatError, match=":1"):
            io.read_obj(path)

    def test_quad_face_rejected(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0 1 1 1\nf 1 1 1 1\n")
        with pytest.raises(FormatError, match="triangular"):
            io.read_obj(path)

    def test_comments_and_unknown_directives_skipped(self, tmp_path):
        path = tmp_path / "m.obj"
        path.write_text("# header\no thing\nv 1 2 3 0.1 0.2 0.3\n"
                        "vn 0 0 1\nf 1 1 1\n")
        mesh = io.read_obj(path)
        assert len(mesh.positions) == 1
        np.testing.assert_allclose(mesh.colors[0], [0.1, 0.2, 0.3])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("")
        with pytest.raises(FormatError, match="no vertices"):
            io.read_obj(path)


class TestPly:
    def test_round_trip_exact_f32(self, tmp_path):
        mesh = sample_mesh(seed=1)
        path = tmp_path / "m.ply"
        io.write_ply(mesh, path)
        back = io.read_ply(path)
        np.testing.assert_array_equal(
            back.positions, mesh.positions.astype(np.float32))
        np.testing.assert_array_equal(
            back.colors, mesh.colors.astype(np.float32))
        np.testing.assert_array_equal(back.triangles, mesh.triangles)

    def test_cross_format_round_trip(self, tmp_path):
        mesh = sample_mesh(seed=2)
        obj_path = tmp_path / "m.obj"
        ply_path = tmp_path / "m.ply"
        io.write_mesh(mesh, obj_path)
        io.write_mesh(io.read_mesh(obj_path), ply_path)
        back = io.read_mesh(ply_path)
        np.testing.assert_allclose(back.positions, mesh.positions,
                                   rtol=2e-7, atol=1e-5)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"plyx\nend_header\n")
        with pytest.raises(FormatError):
            io.read_ply(path)

    def test_truncated_vertices(self, tmp_path):
        mesh = sample_mesh(seed=3)
        path = tmp_path / "m.ply"
        io.write_ply(mesh, path)
        data = path.read_bytes()
        path.write_bytes(data[:-40])
        with pytest.raises(FormatError, match="truncated"):
            io.read_ply(path)

    def test_ascii_format_rejected(self, tmp_path):
        path = tmp_path / "a.ply"
        path.write_text("ply\nformat ascii 1.0\nend_header\n")
        with pytest.raises(FormatError, match="little-endian"):
            io.read_ply(path)


class TestImage:
    def test_round_trip_srgb(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, size=(16, 16, 3))
        path = tmp_path / "img.png"
        io.write_image(img, path)
        back = io.read_image(path)
        # Quantization adds at most half a step in sRGB space; decoding
        # stretches that by the curve's slope, which peaks near 2.4 at
        # the bright end.
        assert np.max(np.abs(back - img)) <= 0.5 * 2.4 / 255.0 + 1e-9

    def test_linear_flag_skips_transfer(self, tmp_path):
        img = np.full((4, 4, 3), 0.5)
        path = tmp_path / "lin.png"
        io.write_image(img, path, linear=True)
        raw = io.read_image(path, linear=True)
        np.testing.assert_allclose(raw, 128 / 255, atol=1e-12)

    def test_black_stays_zero(self, tmp_path):
        path = tmp_path / "black.png"
        io.write_image(np.zeros((8, 8, 3)), path)
        np.testing.assert_array_equal(io.read_image(path), 0.0)

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(12, 12, 3))
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        io.write_image(img, p1)
        io.write_image(img, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_shape(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_image(np.zeros((4, 4)), tmp_path / "x.png")

    def test_srgb_transfer_inverse(self):
        x = np.linspace(0, 1, 1001)
        np.testing.assert_allclose(io.srgb_decode(io.srgb_encode(x)), x,
                                   atol=1e-12)


class TestParseConfig:
    def write(self, tmp_path, text):
        path = tmp_path / "train.cfg"
        path.write_text(text)
        return path

    def test_empty_gives_defaults(self, tmp_path):
        config = io.parse_config(self.write(tmp_path, "# nothing here\n"))
        assert config.batch_size == 16
        assert config.weights.w_batch == 10.0

    def test_values_and_weights(self, tmp_path):
        config = io.parse_config(self.write(
            tmp_path,
            "batch_size = 8\nlearning_rate = 3e-4\n"
            "w_batch = 10.0\nw_loop = 0.07\nsteps_stage1 = 7\n"))
        assert config.batch_size == 8
        assert config.learning_rate == pytest.approx(3e-4)
        assert config.weights.w_batch == 10.0
        assert config.weights.w_loop == 0.07
        assert config.steps_stage1 == 7

    def test_unknown_key(self, tmp_path):
        path = self.write(tmp_path, "nope = 3\n")
        with pytest.raises(FormatError, match="unknown key 'nope'"):
            io.parse_config(path)

    def test_duplicate_key(self, tmp_path):
        path = self.write(tmp_path, "seed = 1\nseed = 2\n")
        with pytest.raises(FormatError, match=":2.*duplicate"):
            io.parse_config(path)

    def test_type_mismatch_names_key_and_line(self, tmp_path):
        path = self.write(tmp_path, "seed = 1\nbatch_size = big\n")
        with pytest.raises(FormatError,
                           match=r":2.*'batch_size'.*int"):
            io.parse_config(path)

    def test_missing_equals(self, tmp_path):
        path = self.write(tmp_path, "just words\n")
        with pytest.raises(FormatError, match=":1"):
            io.parse_config(path)

    def test_invalid_combination(self, tmp_path):
        path = self.write(tmp_path, "batch_size = 1\n")
        with pytest.raises(FormatError, match="batch_size"):
            io.parse_config(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text("hello")
        out = tmp_path / "out.txt"
        out.write_text("world")
        manifest = io.RunManifest(command=["prog", "--seed", "3"], seed=3)
        manifest.add_input(src)
        manifest.add_output(out)
        path = tmp_path / "manifest.json"
        manifest.write(path)
        back = io.RunManifest.read(path)
        assert back.command == manifest.command
        assert back.seed == 3
        assert back.inputs == manifest.inputs
        assert back.outputs == manifest.outputs

    def test_hash_matches_hashlib(self, tmp_path):
        import hashlib
        p = tmp_path / "f.bin"
        p.write_bytes(b"\x00\x01\x02" * 1000)
        assert io.file_sha256(p) == hashlib.sha256(p.read_bytes()).hexdigest()

    def test_hash_changes_with_content(self, tmp_path):
        p = tmp_path / "f.txt"
        p.write_text("a")
        h1 = io.file_sha256(p)
        p.write_text("b")
        assert io.file_sha256(p) != h1
