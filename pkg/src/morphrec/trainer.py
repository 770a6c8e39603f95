"""Two-stage decoder training on rendered faces.

Stage 1 fits the decoder on synthetic supervision only: sample coefficients,
render, embed, and regress the coefficients back.  Stage 2 mixes real photos
into each batch and adds the identity, batch-distribution, and loopback
terms, backpropagating through the renderer and encoder.
"""

from __future__ import annotations

import pickle
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses, model, network, pipeline, raster, shading
from .errors import FormatError, NumericError

CHECKPOINT_MAGIC = b"CKP1"
CHECKPOINT_VERSION = 1

DEFAULT_FOV = np.deg2rad(30.0)
FRAME_FILL = 0.7          # mean-face height as a fraction of frame height
FACE_HALF_EXTENT = 100.0  # mm, matches the mean head radius
MAX_POSE_RETRIES = 5


@dataclass
class TrainConfig:
    batch_size: int = 16
    real_fraction: float = 0.5
    views_per_real: int = 3
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    steps_stage1: int = 500
    steps_stage2: int = 200
    seed: int = 0
    image_size: int = 32
    hidden_dim: int = 1024
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ValueError("real_fraction must lie in [0, 1]")
        if self.views_per_real < 1:
            raise ValueError("views_per_real must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ValueError("step counts must be >= 0")
        if self.image_size % 16:
            raise ValueError("image_size must be a multiple of 16")


@dataclass
class TrainState:
    weights: network.DecoderWeights
    adam_m: network.DecoderWeights
    adam_v: network.DecoderWeights
    step: int
    rng: np.random.Generator


@dataclass
class SyntheticSample:
    truth: model.FaceParameters
    image: np.ndarray
    embedding: network.EmbeddingPair

    @property
    def features(self) -> np.ndarray:
        return self.embedding.features


def init_state(config: TrainConfig, basis: model.ModelBasis,
               feature_dim: int = network.FEATURE_DIM) -> TrainState:
    rng = np.random.default_rng(config.seed)
    weights = network.init_decoder_weights(
        rng, in_dim=feature_dim, hidden=config.hidden_dim,
        param_dims=basis.dims)
    return TrainState(weights=weights,
                      adam_m=network.DecoderWeights.zeros_like(weights),
                      adam_v=network.DecoderWeights.zeros_like(weights),
                      step=0, rng=rng)


def pose_distance(fov: float = DEFAULT_FOV) -> float:
    """Camera distance placing the mean face at the target frame fill."""
    return FACE_HALF_EXTENT / (FRAME_FILL * np.tan(fov / 2.0))


def sample_pose(rng: np.random.Generator, width: int = 32, height: int = 32,
                fov: float = DEFAULT_FOV) -> raster.Camera:
    """Random frontal-ish camera: yaw within 45 deg, pitch within 15 deg."""
    yaw = rng.uniform(-np.pi / 4, np.pi / 4)
    pitch = rng.uniform(-np.pi / 12, np.pi / 12)
    d = pose_distance(fov)
    eye = d * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch),
                        np.cos(yaw) * np.cos(pitch)])
    return raster.Camera(eye=eye, look_at=np.zeros(3),
                         up=np.array([0.0, 1.0, 0.0]), vertical_fov=fov,
                         near=10.0, far=10.0 * d, width=width, height=height)


def render_sample(rng: np.random.Generator, mesh: model.Mesh,
                  size: int) -> tuple[np.ndarray, pipeline.RenderCache]:
    """Render a mesh in a fresh random pose and lighting.

    Degenerate zero-coverage draws are resampled a few times before giving
    up with a numeric error.
    """
    for _ in range(MAX_POSE_RETRIES):
        camera = sample_pose(rng, size, size)
        rig = shading.sample_lighting(rng)
        image, cache = pipeline.render_mesh(mesh, camera, rig)
        if pipeline.coverage_fraction(cache) > 0.0:
            return image, cache
    raise NumericError("render coverage stayed at zero after "
                       f"{MAX_POSE_RETRIES} pose resamples")


def make_synthetic_sample(rng: np.random.Generator, basis: model.ModelBasis,
                          encoder, config: TrainConfig) -> SyntheticSample:
    truth = model.sample_parameters(rng, basis)
    mesh = model.decode_mesh(basis, truth)
    image, _ = render_sample(rng, mesh, config.image_size)
    return SyntheticSample(truth=truth, image=image,
                           embedding=encoder.embed(image))


def optimizer_step(state: TrainState, grads: network.DecoderWeights,
                   config: TrainConfig) -> None:
    """One Adam update in place, with bias correction."""
    state.step += 1
    t = state.step
    for name, g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient in {name} at step {t}")
        m = getattr(state.adam_m, name)
        v = getattr(state.adam_v, name)
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        getattr(state.weights, name)[...] -= \
            config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)


def train_stage1(config: TrainConfig, basis: model.ModelBasis, encoder,
                 state: Optional[TrainState] = None,
                 log: Optional[list] = None) -> TrainState:
    """Synthetic-only supervision: parameter loss on regressed coefficients."""
    if state is None:
        state = init_state(config, basis, encoder.feature_dim)
    for _ in range(config.steps_stage1):
        batch = [make_synthetic_sample(state.rng, basis, encoder, config)
                 for _ in range(config.batch_size)]
        report, grads = batch_loss_and_grads(config, basis, encoder,
                                             state.weights, batch, [],
                                             state.rng)
        _apply_decay(grads, state.weights, config.weight_decay)
        optimizer_step(state, grads, config)
        if log is not None:
            log.append({"step": state.step, "l_param": report.l_param,
                        "l_id": 0.0, "l_batch": 0.0, "l_loop": 0.0,
                        "total": report.total})
    return state


def _identity_backward(encoder, cache: pipeline.RenderCache,
                       d_identity: np.ndarray,
                       basis: model.ModelBasis) -> model.FaceParameters:
    """Image-identity cotangent back to decoded coefficients."""
    d_image = encoder.embed_vjp(cache.image,
                                np.zeros(encoder.feature_dim), d_identity)
    d_pos, d_col = pipeline.render_mesh_vjp(cache, d_image)
    return model.decode_mesh_vjp(basis, d_pos, d_col)


def _accumulate(target: model.FaceParameters, other: model.FaceParameters,
                scale: float = 1.0) -> None:
    target.shape += scale * other.shape
    target.texture += scale * other.texture


def train_stage2(config: TrainConfig, basis: model.ModelBasis, encoder,
                 real_source: Callable[[np.random.Generator], np.ndarray],
                 state: TrainState,
                 log: Optional[list] = None) -> TrainState:
    """Hybrid batches of real photos and synthetic renders.

    Real samples contribute the multi-view identity loss, the batch
    distribution loss over their regressed coefficients, and the loopback
    loss between the two decoder passes; synthetic samples keep the stage-1
    parameter loss.  Gradients flow through the renderer and encoder on
    both the identity and loopback paths.
    """
    n_real = int(np.ceil(config.batch_size * config.real_fraction))
    n_syn = config.batch_size - n_real
    for _ in range(config.steps_stage2):
        synthetic = [make_synthetic_sample(state.rng, basis, encoder,
                                           config) for _ in range(n_syn)]
        photos = [real_source(state.rng) for _ in range(n_real)]
        report, grads = batch_loss_and_grads(config, basis, encoder,
                                             state.weights, synthetic,
                                             photos, state.rng)
        _apply_decay(grads, state.weights, config.weight_decay)
        optimizer_step(state, grads, config)
        if log is not None:
            log.append({"step": state.step, "l_param": report.l_param,
                        "l_id": report.l_id, "l_batch": report.l_batch,
                        "l_loop": report.l_loop, "total": report.total})
    return state


def _apply_decay(grads: network.DecoderWeights,
                 weights: network.DecoderWeights, decay: float) -> None:
    for name in ("W1", "W2", "W3"):
        getattr(grads, name)[...] += decay * getattr(weights, name)


def batch_loss_and_grads(config: TrainConfig, basis: model.ModelBasis,
                         encoder, weights: network.DecoderWeights,
                         synthetic: list, photos: list,
                         rng: Optional[np.random.Generator]
                         ) -> tuple[losses.LossReport,
                                    network.DecoderWeights]:
    """Loss report and decoder-weight gradients for one hybrid batch.

    Synthetic samples contribute the parameter loss; photos contribute the
    identity, batch-distribution, and loopback terms, with gradients
    flowing through the renderer and encoder on both the identity and
    loopback paths.  ``rng`` drives the per-photo view and loopback poses
    and may be None for all-synthetic batches.  Weight decay is not
    included.
    """
    w = config.weights
    n_real = len(photos)
    l_param = l_id = l_batch = l_loop = 0.0
    grads = None

    if synthetic:
        feats = np.stack([s.features for s in synthetic])
        raw = network.decoder_forward_raw(weights, feats)
        pred = [network.split_parameters(weights, row) for row in raw]
        l_param, grads_p = losses.parameter_loss(
            pred, [s.truth for s in synthetic], w)
        cot = np.stack([network.merge_param_gradient(weights, g)
                        for g in grads_p])
        grads, _ = network.decoder_backward(weights, feats, cot)
    if grads is None:
        grads = network.DecoderWeights.zeros_like(weights)

    if n_real:
        # First decoder pass on photo features.
        photo_pairs = [encoder.embed(img) for img in photos]
        photo_feats = np.stack([p.features for p in photo_pairs])
        first_raw = network.decoder_forward_raw(weights, photo_feats)
        first = [network.split_parameters(weights, row)
                 for row in first_raw]
        meshes = [model.decode_mesh(basis, p) for p in first]

        # Identity term over several fresh views per photo.
        d_first = [model.FaceParameters(np.zeros_like(p.shape),
                                        np.zeros_like(p.texture),
                                        np.zeros_like(p.expression))
                   for p in first]
        for i, (pair, mesh) in enumerate(zip(photo_pairs, meshes)):
            caches = []
            idents = []
            for _ in range(config.views_per_real):
                _, cache = render_sample(rng, mesh, config.image_size)
                caches.append(cache)
                idents.append(encoder.embed(cache.image).identity)
            value, _, d_idents = losses.multiview_identity_loss(
                pair.identity, idents)
            l_id += value
            for cache, d_ident in zip(caches, d_idents):
                _accumulate(d_first[i],
                            _identity_backward(encoder, cache, d_ident,
                                               basis))

        # Loopback: re-render, re-embed, re-decode.
        lb_caches = [render_sample(rng, mesh, config.image_size)[1]
                     for mesh in meshes]
        lb_pairs = [encoder.embed(c.image) for c in lb_caches]
        lb_feats = np.stack([p.features for p in lb_pairs])
        second_raw = network.decoder_forward_raw(weights, lb_feats)
        second = [network.split_parameters(weights, row)
                  for row in second_raw]
        l_loop, d_loop_first, d_loop_second = losses.loopback_loss(
            first, second, w)

        # Second-pass backward: decoder, then encoder and renderer back
        # to the first-pass coefficients.
        cot2 = np.stack([w.w_loop
                         * network.merge_param_gradient(weights, g)
                         for g in d_loop_second])
        g2, d_lb_feats = network.decoder_backward(weights, lb_feats, cot2)
        for name, arr in g2.arrays():
            getattr(grads, name)[...] += arr
        for i, cache in enumerate(lb_caches):
            d_image = encoder.embed_vjp(cache.image, d_lb_feats[i],
                                        np.zeros(encoder.identity_dim))
            d_pos, d_col = pipeline.render_mesh_vjp(cache, d_image)
            _accumulate(d_first[i],
                        model.decode_mesh_vjp(basis, d_pos, d_col))

        # Distribution term over the regressed real coefficients (needs
        # at least two real samples to form moments).
        if n_real >= 2:
            l_batch, d_batch = losses.batch_distribution_loss(first)
            for i in range(n_real):
                _accumulate(d_first[i], d_batch[i], w.w_batch)

        # Combine the first-pass cotangents and close decoder backward.
        for i in range(n_real):
            _accumulate(d_first[i], d_loop_first[i], w.w_loop)
        cot1 = np.stack([network.merge_param_gradient(weights, g)
                         for g in d_first])
        g1, _ = network.decoder_backward(weights, photo_feats, cot1)
        for name, arr in g1.arrays():
            getattr(grads, name)[...] += arr

    return losses.total_loss(l_param, l_id, l_batch, l_loop, w), grads


def evaluate_parameter_loss(weights: network.DecoderWeights,
                            basis: model.ModelBasis, encoder,
                            config: TrainConfig, n_samples: int,
                            seed: int) -> float:
    """Mean parameter loss on freshly sampled held-out synthetic faces."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_samples):
        sample = make_synthetic_sample(rng, basis, encoder, config)
        pred = network.decoder_forward(weights, sample.features)
        value, _ = losses.parameter_loss([pred], [sample.truth],
                                         config.weights)
        total += value
    return total / n_samples


def make_render_source(basis: model.ModelBasis, config: TrainConfig,
                       n_identities: int, seed: int
                       ) -> Callable[[np.random.Generator], np.ndarray]:
    """A photo source backed by a held-out pool of rendered identities.

    Stands in for a directory of real photographs at desk scale; each call
    draws a pooled identity and renders it in a fresh pose and lighting.
    """
    pool_rng = np.random.default_rng(seed)
    meshes = [model.decode_mesh(basis,
                                model.sample_parameters(pool_rng, basis))
              for _ in range(n_identities)]

    def source(rng: np.random.Generator) -> np.ndarray:
        mesh = meshes[rng.integers(len(meshes))]
        image, _ = render_sample(rng, mesh, config.image_size)
        return image

    return source


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    """Write a resumable snapshot (weights, Adam moments, RNG state)."""
    payload = {
        "weights": {n: a for n, a in state.weights.arrays()},
        "adam_m": {n: a for n, a in state.adam_m.arrays()},
        "adam_v": {n: a for n, a in state.adam_v.arrays()},
        "param_dims": state.weights.param_dims,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "config": config,
    }
    blob = pickle.dumps(payload)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        header = f.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated checkpoint header")
        version, size = struct.unpack("<II", header)
        if version != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint version {version}")
        blob = f.read(size)
        if len(blob) != size:
            raise FormatError(f"{path}: truncated checkpoint payload")
    payload = pickle.loads(blob)

    def unpack(d):
        return network.DecoderWeights(
            *(d[n] for n in network.DecoderWeights.FIELDS),
            payload["param_dims"])

    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    state = TrainState(weights=unpack(payload["weights"]),
                       adam_m=unpack(payload["adam_m"]),
                       adam_v=unpack(payload["adam_v"]),
                       step=payload["step"], rng=rng)
    return state, payload["config"]
