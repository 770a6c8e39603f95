"""Mesh, image, config, and manifest IO.

Meshes travel as colored-vertex OBJ (``v x y z r g b``) or binary
little-endian PLY; images as PNG with an sRGB transfer unless written
linear; train configs as line-based ``key = value`` text; run manifests as
JSON with content hashes of every input and output.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import warnings

import numpy as np
from PIL import Image

from . import losses, trainer
from .errors import FormatError
from .model import Mesh

DEFAULT_GRAY = 0.5


def _parse_floats(parts, count, path, lineno):
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: expected numbers, got "
                          f"{' '.join(parts)!r}")
    if len(values) != count:
        raise FormatError(f"{path}:{lineno}: expected {count} values, "
                          f"got {len(values)}")
    return values


def read_obj(path) -> Mesh:
    positions = []
    colors = []
    faces = []
    missing_colors = False
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) == 4:
                    positions.append(_parse_floats(parts[1:], 3, path,
                                                   lineno))
                    colors.append([DEFAULT_GRAY] * 3)
                    missing_colors = True
                elif len(parts) == 7:
                    vals = _parse_floats(parts[1:], 6, path, lineno)
                    positions.append(vals[:3])
                    colors.append(vals[3:])
                else:
                    raise FormatError(
                        f"{path}:{lineno}: vertex needs 3 or 6 components")
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise FormatError(
                        f"{path}:{lineno}: only triangular faces supported")
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise FormatError(
                        f"{path}:{lineno}: bad face index in {line!r}")
                if min(idx) < 1:
                    raise FormatError(
                        f"{path}:{lineno}: face indices are 1-based")
                faces.append([i - 1 for i in idx])
            # Other directives (vn, vt, o, ...) are ignored.
    if not positions:
        raise FormatError(f"{path}: no vertices found")
    if missing_colors:
        warnings.warn(f"{path}: vertices without colors default to "
                      f"{DEFAULT_GRAY} gray")
    return Mesh(positions=np.array(positions, dtype=np.float64),
                colors=np.array(colors, dtype=np.float64),
                triangles=np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p, c in zip(mesh.positions, mesh.colors):
            f.write("v %.9g %.9g %.9g %.9g %.9g %.9g\n"
                    % (p[0], p[1], p[2], c[0], c[1], c[2]))
        for tri in mesh.triangles:
            f.write("f %d %d %d\n" % (tri[0] + 1, tri[1] + 1, tri[2] + 1))


_PLY_VERTEX_PROPS = ("x", "y", "z", "red", "green", "blue")


def write_ply(mesh: Mesh, path) -> None:
    n_v = len(mesh.positions)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n_v}"]
    header += [f"property float {p}" for p in _PLY_VERTEX_PROPS]
    header += [f"element face {len(mesh.triangles)}",
               "property list uchar int vertex_indices", "end_header"]
    data = np.column_stack([mesh.positions, mesh.colors]).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())
        for tri in mesh.triangles:
            f.write(struct.pack("<Biii", 3, tri[0], tri[1], tri[2]))


def read_ply(path) -> Mesh:
    with open(path, "rb") as f:
        header = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated PLY header")
            header.append(line.decode("ascii", "replace").strip())
            if header[-1] == "end_header":
                break
        if not header or header[0] != "ply":
            raise FormatError(f"{path}:1: not a PLY file")
        n_v = n_f = None
        props = []
        element = None
        for lineno, line in enumerate(header[1:], start=2):
            parts = line.split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                if parts[1] != "binary_little_endian":
                    raise FormatError(
                        f"{path}:{lineno}: only binary little-endian "
                        "PLY is supported")
            elif parts[0] == "element":
                element = parts[1]
                if element == "vertex":
                    n_v = int(parts[2])
                elif element == "face":
                    n_f = int(parts[2])
                else:
                    raise FormatError(
                        f"{path}:{lineno}: unsupported element "
                        f"{element!r}")
            elif parts[0] == "property" and element == "vertex":
                if parts[1] != "float":
                    raise FormatError(
                        f"{path}:{lineno}: vertex properties must be "
                        "float")
                props.append(parts[2])
        if n_v is None or n_f is None:
            raise FormatError(f"{path}: missing vertex or face element")
        if tuple(props) != _PLY_VERTEX_PROPS:
            raise FormatError(
                f"{path}: vertex properties must be {_PLY_VERTEX_PROPS}, "
                f"got {tuple(props)}")
        payload = f.read(4 * 6 * n_v)
        if len(payload) != 4 * 6 * n_v:
            raise FormatError(f"{path}: truncated vertex data")
        data = np.frombuffer(payload, dtype="<f4").reshape(n_v, 6)
        faces = np.empty((n_f, 3), dtype=np.int64)
        for i in range(n_f):
            raw = f.read(13)
            if len(raw) != 13:
                raise FormatError(f"{path}: truncated face {i}")
            count, a, b, c = struct.unpack("<Biii", raw)
            if count != 3:
                raise FormatError(f"{path}: face {i} is not a triangle")
            faces[i] = (a, b, c)
    return Mesh(positions=data[:, :3].astype(np.float64),
                colors=data[:, 3:].astype(np.float64), triangles=faces)


def read_mesh(path) -> Mesh:
    path = str(path)
    if path.endswith(".ply"):
        return read_ply(path)
    return read_obj(path)


def write_mesh(mesh: Mesh, path) -> None:
    path = str(path)
    if path.endswith(".ply"):
        write_ply(mesh, path)
    else:
        write_obj(mesh, path)


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308, 12.92 * linear,
                    1.055 * linear ** (1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    return np.where(encoded <= 0.04045, encoded / 12.92,
                    ((encoded + 0.055) / 1.055) ** 2.4)


def write_image(buffer: np.ndarray, path, linear: bool = False) -> None:
    """Write a float image in [0, 1] as 8-bit PNG.

    Values pass through the sRGB transfer curve unless ``linear`` is set;
    the byte stream is deterministic for a fixed buffer.
    """
    if buffer.ndim != 3 or buffer.shape[2] != 3:
        raise ValueError("image buffer must be (H, W, 3)")
    encoded = np.clip(buffer, 0.0, 1.0) if linear else srgb_encode(buffer)
    quantized = np.round(encoded * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def read_image(path, linear: bool = False) -> np.ndarray:
    with Image.open(path) as img:
        encoded = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return encoded if linear else srgb_decode(encoded)


_WEIGHT_KEYS = {"w_s", "w_t", "w_batch", "w_loop"}
_CONFIG_TYPES = {f.name: f.type for f in
                 dataclasses.fields(trainer.TrainConfig)
                 if f.name != "weights"}


def parse_config(path) -> trainer.TrainConfig:
    """Parse a ``key = value`` training config with strict key checking."""
    values = {}
    weight_values = {}
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(
                    f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key in seen:
                raise FormatError(f"{path}:{lineno}: duplicate key "
                                  f"{key!r}")
            seen.add(key)
            if key in _WEIGHT_KEYS:
                target, caster = weight_values, float
            elif key in _CONFIG_TYPES:
                target = values
                caster = int if _CONFIG_TYPES[key] in ("int", int) \
                    else float
            else:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                target[key] = caster(text)
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: key {key!r} needs a "
                    f"{caster.__name__}, got {text!r}")
    try:
        weights = losses.LossWeights(**weight_values)
        return trainer.TrainConfig(weights=weights, **values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}")


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclasses.dataclass
class RunManifest:
    """Reproducibility record: what ran, on what, producing which bytes."""

    command: list
    seed: int
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(**data)
