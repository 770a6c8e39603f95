"""The four training loss terms and their exact gradients.

Parameter and loopback losses are weighted squared distances in coefficient
space; the identity loss is one minus the cosine of unit identity vectors;
the batch distribution loss pins the lowest two batch moments of the
predicted coefficients to the standard-normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import FaceParameters


@dataclass
class LossWeights:
    w_s: float = 0.4
    w_t: float = 0.002
    w_batch: float = 10.0
    w_loop: float = 0.07

    def __post_init__(self):
        if min(self.w_s, self.w_t, self.w_batch, self.w_loop) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    """Scalar loss terms and the combined total."""

    l_param: float
    l_id: float
    l_batch: float
    l_loop: float
    total: float
    gradients: dict = field(default_factory=dict)


def parameter_loss(pred: Sequence[FaceParameters],
                   truth: Sequence[FaceParameters],
                   weights: Optional[LossWeights] = None,
                   mean_reduction: bool = False
                   ) -> tuple[float, list[FaceParameters]]:
    """Weighted squared shape/texture distance, summed over the batch.

    Returns the scalar and per-sample gradients with respect to ``pred``.
    """
    if weights is None:
        weights = LossWeights()
    if len(pred) != len(truth):
        raise ValueError("pred and truth batches differ in size")
    if not pred:
        raise ValueError("empty batch")
    scale = 1.0 / len(pred) if mean_reduction else 1.0
    total = 0.0
    grads = []
    for p, t in zip(pred, truth):
        ds = p.shape - t.shape
        dt = p.texture - t.texture
        total += scale * (weights.w_s * ds @ ds + weights.w_t * dt @ dt)
        grads.append(FaceParameters(
            shape=scale * 2.0 * weights.w_s * ds,
            texture=scale * 2.0 * weights.w_t * dt,
            expression=np.zeros_like(p.expression)))
    return total, grads


def identity_loss(g1: np.ndarray, g2: np.ndarray
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """1 - cosine similarity, with gradients to both raw vectors.

    Inputs are renormalized internally, so gradients include the
    normalization chain; zero vectors are rejected.
    """
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise ValueError("identity vectors must be nonzero")
    u1 = g1 / n1
    u2 = g2 / n2
    cos = u1 @ u2
    d_g1 = -(u2 - cos * u1) / n1
    d_g2 = -(u1 - cos * u2) / n2
    return 1.0 - cos, d_g1, d_g2


def multiview_identity_loss(photo_identity: np.ndarray,
                            render_identities: Sequence[np.ndarray]
                            ) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Mean identity loss between one photo and several rendered views."""
    if not render_identities:
        raise ValueError("need at least one rendered view")
    k = len(render_identities)
    total = 0.0
    d_photo = np.zeros_like(photo_identity)
    d_renders = []
    for ident in render_identities:
        val, d1, d2 = identity_loss(photo_identity, ident)
        total += val / k
        d_photo += d1 / k
        d_renders.append(d2 / k)
    return total, d_photo, d_renders


def batch_distribution_loss(batch: Sequence[FaceParameters]
                            ) -> tuple[float, list[FaceParameters]]:
    """Squared deviation of batch mean from 0 and batch variance from 1.

    Variance is the population estimator (divide by B).  Applied to the
    shape and texture blocks independently; expression is ignored.
    """
    b = len(batch)
    if b < 2:
        raise ValueError("batch distribution loss needs batch size >= 2")
    total = 0.0
    grads = [FaceParameters(np.zeros_like(p.shape), np.zeros_like(p.texture),
                            np.zeros_like(p.expression)) for p in batch]
    for attr in ("shape", "texture"):
        mat = np.stack([getattr(p, attr) for p in batch])   # (B, D)
        mean = mat.mean(axis=0)
        var = mat.var(axis=0)                               # population
        total += mean @ mean + (var - 1.0) @ (var - 1.0)
        centered = mat - mean
        d_mat = 2.0 * mean / b + 4.0 * (var - 1.0) * centered / b
        for g, row in zip(grads, d_mat):
            setattr(g, attr, row)
    return total, grads


def loopback_loss(first_pass: Sequence[FaceParameters],
                  second_pass: Sequence[FaceParameters],
                  weights: Optional[LossWeights] = None
                  ) -> tuple[float, list[FaceParameters],
                             list[FaceParameters]]:
    """Parameter loss between the two decoder passes, gradients to both."""
    value, d_second = parameter_loss(second_pass, first_pass, weights)
    d_first = [FaceParameters(-g.shape, -g.texture,
                              np.zeros_like(g.expression))
               for g in d_second]
    return value, d_first, d_second


def total_loss(l_param: float, l_id: float, l_batch: float, l_loop: float,
               weights: Optional[LossWeights] = None,
               gradients: Optional[dict] = None) -> LossReport:
    """Combine the four terms into the training total."""
    if weights is None:
        weights = LossWeights()
    total = l_param + l_id + weights.w_batch * l_batch \
        + weights.w_loop * l_loop
    return LossReport(l_param=l_param, l_id=l_id, l_batch=l_batch,
                      l_loop=l_loop, total=total,
                      gradients=gradients or {})
