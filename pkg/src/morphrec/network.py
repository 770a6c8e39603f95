"""Trainable decoder MLP, toy image encoder, and embedding providers.

The decoder maps identity features to morphable-model coefficients through
two hidden ReLU layers.  The encoder abstraction stands in for a fixed face
recognition network: the toy encoder is a seeded linear projection of a
downsampled image (so the whole render-encode loop stays differentiable),
and the file provider serves externally computed embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import FormatError, ValidationError
from .model import FaceParameters

EMBEDDING_MAGIC = b"EMB1"
FEATURE_DIM = 1024
IDENTITY_DIM = 128

DEFAULT_PARAM_DIMS = (199, 199, 100)
DEFAULT_HIDDEN = 1024


@dataclass
class EmbeddingPair:
    """Decoder-input features plus the unit identity vector."""

    features: np.ndarray   # (feature_dim,)
    identity: np.ndarray   # (identity_dim,), unit norm

    def validate(self) -> None:
        norm = np.linalg.norm(self.identity)
        if abs(norm - 1.0) > 1e-4:
            raise ValidationError(
                f"identity vector norm {norm:.6f} is not 1")


@dataclass
class DecoderWeights:
    """Two hidden layers plus the regression output layer.

    The same structure doubles as the gradient container.  ``param_dims``
    records the (shape, texture, expression) split of the output; the
    output layer covers shape + texture, expression is pinned to zero.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    param_dims: tuple = DEFAULT_PARAM_DIMS

    FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3")

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.FIELDS:
            yield name, getattr(self, name)

    def copy(self) -> "DecoderWeights":
        return DecoderWeights(*(getattr(self, n).copy()
                                for n in self.FIELDS), self.param_dims)

    @classmethod
    def zeros_like(cls, other: "DecoderWeights") -> "DecoderWeights":
        return cls(*(np.zeros_like(getattr(other, n))
                     for n in cls.FIELDS), other.param_dims)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W3.shape[0]


def init_decoder_weights(rng: np.random.Generator,
                         in_dim: int = FEATURE_DIM,
                         hidden: int = DEFAULT_HIDDEN,
                         param_dims: tuple = DEFAULT_PARAM_DIMS
                         ) -> DecoderWeights:
    """Scaled-uniform fan-in initialization, biases zero."""
    d_s, d_t, _ = param_dims
    out = d_s + d_t

    def layer(n_out, n_in):
        bound = np.sqrt(3.0 / n_in)
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    return DecoderWeights(
        W1=layer(hidden, in_dim), b1=np.zeros(hidden),
        W2=layer(hidden, hidden), b2=np.zeros(hidden),
        W3=layer(out, hidden), b3=np.zeros(out),
        param_dims=param_dims)


def decoder_forward_raw(weights: DecoderWeights,
                        features: np.ndarray) -> np.ndarray:
    """Batched forward pass: (B, in) -> (B, out) raw regression outputs."""
    h1 = np.maximum(0.0, features @ weights.W1.T + weights.b1)
    h2 = np.maximum(0.0, h1 @ weights.W2.T + weights.b2)
    return h2 @ weights.W3.T + weights.b3


def decoder_forward(weights: DecoderWeights,
                    features: np.ndarray) -> FaceParameters:
    """Single-sample forward pass split into FaceParameters."""
    if features.shape != (weights.in_dim,):
        raise ValueError(
            f"features must be ({weights.in_dim},), got {features.shape}")
    out = decoder_forward_raw(weights, features[None, :])[0]
    d_s, d_t, d_e = weights.param_dims
    return FaceParameters(shape=out[:d_s], texture=out[d_s:d_s + d_t],
                          expression=np.zeros(d_e))


def decoder_backward(weights: DecoderWeights, features: np.ndarray,
                     cotangent: np.ndarray, weight_decay: float = 0.0
                     ) -> tuple[DecoderWeights, np.ndarray]:
    """Reverse-mode gradients for a batch.

    ``features`` is (B, in) and ``cotangent`` (B, out); single samples may
    pass 1-D arrays.  Returns (weight gradients, input gradient).  Weight
    matrices (not biases) additionally receive the L2 decay term
    ``weight_decay * W``.
    """
    squeeze = features.ndim == 1
    x = np.atleast_2d(features)
    g3 = np.atleast_2d(cotangent)
    z1 = x @ weights.W1.T + weights.b1
    h1 = np.maximum(0.0, z1)
    z2 = h1 @ weights.W2.T + weights.b2
    h2 = np.maximum(0.0, z2)

    grads = DecoderWeights.zeros_like(weights)
    grads.W3 += g3.T @ h2
    grads.b3 += g3.sum(axis=0)
    g2 = (g3 @ weights.W3) * (z2 > 0)
    grads.W2 += g2.T @ h1
    grads.b2 += g2.sum(axis=0)
    g1 = (g2 @ weights.W2) * (z1 > 0)
    grads.W1 += g1.T @ x
    grads.b1 += g1.sum(axis=0)
    d_features = g1 @ weights.W1

    if weight_decay:
        grads.W1 += weight_decay * weights.W1
        grads.W2 += weight_decay * weights.W2
        grads.W3 += weight_decay * weights.W3
    return grads, d_features[0] if squeeze else d_features


def split_parameters(weights: DecoderWeights,
                     raw_out: np.ndarray) -> FaceParameters:
    """Slice a raw output row into FaceParameters with zero expression."""
    d_s, d_t, d_e = weights.param_dims
    return FaceParameters(shape=raw_out[:d_s],
                          texture=raw_out[d_s:d_s + d_t],
                          expression=np.zeros(d_e))


def merge_param_gradient(weights: DecoderWeights,
                         grad: FaceParameters) -> np.ndarray:
    """Concatenate shape/texture gradients into a raw-output cotangent."""
    return np.concatenate([grad.shape, grad.texture])


class ToyEncoder:
    """Deterministic seeded stand-in for a recognition network.

    The image is block-averaged to a coarse grid, flattened, and linearly
    projected to the feature and identity spaces; the identity vector is
    normalized.  Everything is piecewise-linear in pixel values, so exact
    gradients flow through the identity and loopback paths.
    """

    def __init__(self, seed: int, image_size: tuple[int, int],
                 feature_dim: int = FEATURE_DIM,
                 identity_dim: int = IDENTITY_DIM, grid: int = 16):
        h, w = image_size
        if h % grid or w % grid:
            raise ValueError(
                f"image size {image_size} must be divisible by grid {grid}")
        self.image_size = (h, w)
        self.grid = grid
        self.feature_dim = feature_dim
        self.identity_dim = identity_dim
        flat = grid * grid * 3
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(flat)
        self._feat_proj = scale * rng.standard_normal((feature_dim, flat))
        self._id_proj = scale * rng.standard_normal((identity_dim, flat))

    def _pool(self, image: np.ndarray) -> np.ndarray:
        h, w = self.image_size
        g = self.grid
        blocks = image.reshape(g, h // g, g, w // g, 3)
        return blocks.mean(axis=(1, 3)).ravel()

    def embed(self, image: np.ndarray) -> EmbeddingPair:
        if image.shape != (*self.image_size, 3):
            raise ValueError(
                f"image must be {(*self.image_size, 3)}, got {image.shape}")
        pooled = self._pool(image)
        raw_id = self._id_proj @ pooled
        norm = np.linalg.norm(raw_id)
        if norm < 1e-12:
            # Degenerate all-black input; pick a fixed point on the sphere.
            identity = np.zeros(self.identity_dim)
            identity[0] = 1.0
        else:
            identity = raw_id / norm
        return EmbeddingPair(features=self._feat_proj @ pooled,
                             identity=identity)

    def embed_vjp(self, image: np.ndarray, d_features: np.ndarray,
                  d_identity: np.ndarray) -> np.ndarray:
        """Adjoint of embed with respect to the input image."""
        pooled = self._pool(image)
        d_pooled = self._feat_proj.T @ d_features
        raw_id = self._id_proj @ pooled
        norm = np.linalg.norm(raw_id)
        if norm >= 1e-12:
            n_hat = raw_id / norm
            d_raw = (d_identity - n_hat * (n_hat @ d_identity)) / norm
            d_pooled += self._id_proj.T @ d_raw
        h, w = self.image_size
        g = self.grid
        cell = (h // g) * (w // g)
        d_blocks = d_pooled.reshape(g, 1, g, 1, 3) / cell
        return np.broadcast_to(d_blocks,
                               (g, h // g, g, w // g, 3)).reshape(h, w, 3)


def write_embedding_file(path, records: dict[str, EmbeddingPair]) -> None:
    """Write the binary embedding container (little-endian, EMB1)."""
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<I", len(records)))
        for key, pair in records.items():
            pair.validate()
            if pair.features.shape != (FEATURE_DIM,) \
                    or pair.identity.shape != (IDENTITY_DIM,):
                raise ValidationError(
                    f"record {key!r} has wrong embedding dimensions")
            kb = key.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(np.ascontiguousarray(pair.features,
                                         dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(pair.identity,
                                         dtype="<f4").tobytes())


def read_embedding_file(path) -> dict[str, EmbeddingPair]:
    """Read an EMB1 container, validating identity norms."""
    records = {}
    with open(path, "rb") as f:
        if f.read(4) != EMBEDDING_MAGIC:
            raise FormatError(f"{path}: bad embedding magic")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            raw = f.read(2)
            if len(raw) != 2:
                raise FormatError(f"{path}: truncated record header")
            (klen,) = struct.unpack("<H", raw)
            key = f.read(klen).decode("utf-8")
            payload = f.read(4 * (FEATURE_DIM + IDENTITY_DIM))
            if len(payload) != 4 * (FEATURE_DIM + IDENTITY_DIM):
                raise FormatError(f"{path}: truncated record {key!r}")
            vec = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            pair = EmbeddingPair(features=vec[:FEATURE_DIM],
                                 identity=vec[FEATURE_DIM:])
            pair.validate()
            records[key] = pair
    return records


class FileEmbeddingProvider:
    """Serves precomputed embeddings listed in a manifest.

    The manifest is a text file of ``key<TAB>path`` lines (paths relative
    to the manifest); referenced containers are loaded lazily and cached.
    """

    def __init__(self, manifest_path):
        import os
        self._dir = os.path.dirname(os.path.abspath(manifest_path))
        self._index: dict[str, str] = {}
        self._cache: dict[str, dict[str, EmbeddingPair]] = {}
        with open(manifest_path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(
                        f"manifest line {lineno}: expected 'key<TAB>path'")
                key, rel = parts
                self._index[key] = os.path.join(self._dir, rel)

    def embed(self, key: str) -> EmbeddingPair:
        if key not in self._index:
            raise KeyError(f"no embedding for key {key!r}")
        path = self._index[key]
        if path not in self._cache:
            self._cache[path] = read_embedding_file(path)
        records = self._cache[path]
        if key not in records:
            raise KeyError(
                f"key {key!r} not present in container {path}")
        return records[key]

    def keys(self):
        return list(self._index)
