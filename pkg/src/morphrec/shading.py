"""Per-pixel Phong illumination with two randomized point lights.

Shading runs after rasterization on interpolated attribute buffers, so all
operations here are pure per-pixel maps.  Specular color is derived from
diffuse via the constant-c heuristic; lights carry received irradiance
directly (no distance falloff, they sit meters from the face).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .raster import Camera

DEFAULT_SPECULAR_C = 0.35
DEFAULT_SHININESS = 40.0
COLOR_TEMPERATURES_K = (2700.0, 4000.0, 5000.0, 6500.0, 7500.0)

_NORMAL_EPSILON = 1e-12


@dataclass
class PointLight:
    position: np.ndarray       # (3,) mm, world space
    rgb_intensity: np.ndarray  # (3,) linear, >= 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rgb_intensity = np.asarray(self.rgb_intensity, dtype=np.float64)
        if np.any(self.rgb_intensity < 0):
            raise ValueError("light intensity components must be >= 0")


@dataclass
class LightingRig:
    lights: tuple                       # exactly two PointLight
    ambient: np.ndarray = field(default_factory=lambda: np.zeros(3))
    specular_constant_c: float = DEFAULT_SPECULAR_C
    shininess: float = DEFAULT_SHININESS

    def __post_init__(self):
        self.ambient = np.asarray(self.ambient, dtype=np.float64)
        if len(self.lights) != 2:
            raise ValueError("a lighting rig holds exactly two point lights")
        if not 0.0 <= self.specular_constant_c <= 1.0:
            raise ValueError("specular constant must lie in [0, 1]")
        if self.shininess <= 0:
            raise ValueError("shininess must be positive")


def color_temperature_to_rgb(kelvin: float) -> np.ndarray:
    """Max-normalized linear RGB on a smooth Planckian-locus fit.

    Piecewise log/power approximation of blackbody chromaticity (the widely
    used 8-bit fit, rescaled to [0, 1] and normalized so the largest channel
    is exactly 1).
    """
    if not 1000.0 <= kelvin <= 12000.0:
        raise ValueError(f"kelvin {kelvin} outside supported [1000, 12000]")
    t = kelvin / 100.0
    if t <= 66.0:
        r = 255.0
        g = 99.4708025861 * np.log(t) - 161.1195681661
    else:
        r = 329.698727446 * (t - 60.0) ** -0.1332047592
        g = 288.1221695283 * (t - 60.0) ** -0.0755148492
    if t >= 66.0:
        b = 255.0
    elif t <= 19.0:
        b = 0.0
    else:
        b = 138.5177312231 * np.log(t - 10.0) - 305.0447927307
    rgb = np.clip([r, g, b], 0.0, 255.0) / 255.0
    return rgb / rgb.max()


def specular_from_diffuse(k_d: np.ndarray, c: float) -> np.ndarray:
    """Heuristic specular color: per channel c * (1 - k_d), k_d clamped."""
    if not 0.0 <= c <= 1.0:
        raise ValueError("c must lie in [0, 1]")
    return c * (1.0 - np.clip(np.asarray(k_d, dtype=np.float64), 0.0, 1.0))


def sample_lighting(rng: np.random.Generator,
                    specular_constant_c: float = DEFAULT_SPECULAR_C,
                    shininess: float = DEFAULT_SHININESS) -> LightingRig:
    """Two random frontal-hemisphere point lights with a shared temperature.

    Directions are uniform on the +z hemisphere, distances uniform in
    [2000, 4000] mm, per-light scalar intensity uniform in [0.6, 1.2].  One
    color temperature is drawn per rig from the common-illuminant set and
    each channel is perturbed by a uniform [0.95, 1.05] factor.
    """
    kelvin = COLOR_TEMPERATURES_K[rng.integers(len(COLOR_TEMPERATURES_K))]
    base_rgb = color_temperature_to_rgb(kelvin)
    rgb = base_rgb * rng.uniform(0.95, 1.05, size=3)
    lights = []
    for _ in range(2):
        # Uniform direction on the z > 0 hemisphere.
        z = rng.uniform(0.0, 1.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        rho = np.sqrt(1.0 - z * z)
        direction = np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        distance = rng.uniform(2000.0, 4000.0)
        intensity = rng.uniform(0.6, 1.2)
        lights.append(PointLight(position=distance * direction,
                                 rgb_intensity=intensity * rgb))
    return LightingRig(lights=tuple(lights),
                       specular_constant_c=specular_constant_c,
                       shininess=shininess)


def _normalize_rows(vec, eps=_NORMAL_EPSILON):
    norm = np.linalg.norm(vec, axis=-1, keepdims=True)
    return vec / np.maximum(norm, eps), norm[..., 0]


def phong_shade(position_buf: np.ndarray, normal_buf: np.ndarray,
                diffuse_buf: np.ndarray, mask: np.ndarray, rig: LightingRig,
                camera: Camera,
                background: Optional[np.ndarray] = None) -> np.ndarray:
    """Shade covered pixels; uncovered pixels receive the background color.

    Per pixel: ambient * K_d plus, for each light, diffuse
    K_d I max(0, n.l) and specular K_s I max(0, r.v)^shininess with
    r the reflection of the light direction about the (renormalized)
    interpolated normal.  Output is clamped to [0, 1] as the final step.
    """
    if position_buf.shape != normal_buf.shape \
            or position_buf.shape != diffuse_buf.shape:
        raise ValueError("attribute buffers must share dimensions")
    if background is None:
        background = np.zeros(3)
    image = np.broadcast_to(np.asarray(background, dtype=np.float64),
                            diffuse_buf.shape).copy()
    if not mask.any():
        return image
    p = position_buf[mask]
    n, _ = _normalize_rows(normal_buf[mask])
    kd = np.clip(diffuse_buf[mask], 0.0, 1.0)
    ks = rig.specular_constant_c * (1.0 - kd)
    v, _ = _normalize_rows(camera.eye[None, :] - p)
    out = rig.ambient[None, :] * kd
    for light in rig.lights:
        l, _ = _normalize_rows(light.position[None, :] - p)
        ndotl = np.einsum("ij,ij->i", n, l)
        r = 2.0 * ndotl[:, None] * n - l
        rdotv = np.einsum("ij,ij->i", r, v)
        out = out + kd * light.rgb_intensity[None, :] \
            * np.maximum(0.0, ndotl)[:, None]
        out = out + ks * light.rgb_intensity[None, :] \
            * np.maximum(0.0, rdotv)[:, None] ** rig.shininess
    image[mask] = np.clip(out, 0.0, 1.0)
    return image


def phong_shade_vjp(position_buf: np.ndarray, normal_buf: np.ndarray,
                    diffuse_buf: np.ndarray, mask: np.ndarray,
                    rig: LightingRig, camera: Camera,
                    d_image: np.ndarray):
    """Adjoints of phong_shade for positions, normals and diffuse colors.

    Clamps act as gates: pixels saturated at 1 (or diffuse inputs outside
    [0, 1]) propagate zero gradient, matching the forward clamp semantics.
    """
    d_pos_buf = np.zeros_like(position_buf)
    d_norm_buf = np.zeros_like(normal_buf)
    d_kd_buf = np.zeros_like(diffuse_buf)
    if not mask.any():
        return d_pos_buf, d_norm_buf, d_kd_buf
    p = position_buf[mask]
    n_raw = normal_buf[mask]
    n, n_norm = _normalize_rows(n_raw)
    kd_in = diffuse_buf[mask]
    kd = np.clip(kd_in, 0.0, 1.0)
    ks = rig.specular_constant_c * (1.0 - kd)
    e_minus_p = camera.eye[None, :] - p
    v, dv = _normalize_rows(e_minus_p)

    # Recompute the pre-clamp radiance to evaluate the output clamp gate.
    out = rig.ambient[None, :] * kd
    per_light = []
    for light in rig.lights:
        lp_minus_p = light.position[None, :] - p
        l, dl = _normalize_rows(lp_minus_p)
        ndotl = np.einsum("ij,ij->i", n, l)
        r = 2.0 * ndotl[:, None] * n - l
        rdotv = np.einsum("ij,ij->i", r, v)
        per_light.append((l, dl, ndotl, r, rdotv))
        out = out + kd * light.rgb_intensity[None, :] \
            * np.maximum(0.0, ndotl)[:, None]
        out = out + ks * light.rgb_intensity[None, :] \
            * np.maximum(0.0, rdotv)[:, None] ** rig.shininess

    g = d_image[mask] * (out < 1.0)
    d_kd = g * rig.ambient[None, :]
    d_ks = np.zeros_like(d_kd)
    d_p = np.zeros_like(p)
    d_n = np.zeros_like(n)
    d_v = np.zeros_like(v)
    sh = rig.shininess
    for light, (l, dl, ndotl, r, rdotv) in zip(rig.lights, per_light):
        intensity = light.rgb_intensity[None, :]
        relu_nl = np.maximum(0.0, ndotl)
        relu_rv = np.maximum(0.0, rdotv)
        d_kd += g * intensity * relu_nl[:, None]
        d_ks += g * intensity * relu_rv[:, None] ** sh
        # Scalar chains through the two dot products.
        d_s1 = np.einsum("ik,ik->i", g, intensity * kd) * (ndotl > 0)
        spec_gate = rdotv > 0
        d_s2 = np.einsum("ik,ik->i", g, intensity * ks) \
            * sh * np.where(spec_gate, relu_rv, 1.0) ** (sh - 1.0) * spec_gate
        # s2 = r.v with r = 2 s1 n - l.
        d_r = d_s2[:, None] * v
        d_v += d_s2[:, None] * r
        d_s1 += 2.0 * np.einsum("ij,ij->i", d_r, n)
        d_n += 2.0 * ndotl[:, None] * d_r
        d_l = -d_r
        # s1 = n.l.
        d_n += d_s1[:, None] * l
        d_l += d_s1[:, None] * n
        # l = (L - p) / |L - p|.
        d_lmp = (d_l - l * np.einsum("ij,ij->i", l, d_l)[:, None]) \
            / dl[:, None]
        d_p -= d_lmp
    # v = (E - p) / |E - p|.
    d_emp = (d_v - v * np.einsum("ij,ij->i", v, d_v)[:, None]) / dv[:, None]
    d_p -= d_emp
    # ks = c (1 - kd).
    d_kd -= rig.specular_constant_c * d_ks
    # kd clamp gate.
    d_kd *= (kd_in > 0.0) & (kd_in < 1.0)
    # n = n_raw / |n_raw|.
    d_nraw = (d_n - n * np.einsum("ij,ij->i", n, d_n)[:, None]) \
        / np.maximum(n_norm, _NORMAL_EPSILON)[:, None]
    d_pos_buf[mask] = d_p
    d_norm_buf[mask] = d_nraw
    d_kd_buf[mask] = d_kd
    return d_pos_buf, d_norm_buf, d_kd_buf
