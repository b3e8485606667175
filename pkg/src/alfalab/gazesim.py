"""Procedural two-eye images with per-user appearance, flip helpers, the
flip-consistency loss and the angular gaze error.

Angles are radians everywhere except ``angular_error``, which reports degrees.
Pixel coordinates are measured from the image centre so that mirroring a
render is bit-exact: rendering ``(-yaw, pitch)`` gives the column-reversed
image of ``(yaw, pitch)`` before noise is added.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .errors import ContractError, PoseRangeError

SIZE = 32
_CENTER = (SIZE - 1) / 2.0
_COORD = np.arange(SIZE, dtype=np.float64) - _CENTER

# (low, high) of the source population for each appearance scalar
SOURCE_RANGES = {
    "eye_spacing": (11.0, 14.0),
    "eye_height": (-2.0, 1.0),
    "iris_radius": (2.0, 2.6),
    "eyelid_droop": (0.0, 0.25),
    "brightness": (0.45, 0.6),
    "noise_level": (0.01, 0.02),
    "light_gradient": (0.3, 0.5),
}
# hard bounds any profile, shifted or not, must respect
APPEARANCE_BOUNDS = {
    "eye_spacing": (8.0, 18.0),
    "eye_height": (-6.0, 5.0),
    "iris_radius": (1.4, 3.4),
    "eyelid_droop": (0.0, 0.6),
    "brightness": (0.2, 0.85),
    "noise_level": (0.0, 0.05),
    "light_gradient": (-0.6, 0.6),
}
SHIFTED_SCALARS = ("eye_spacing", "eye_height", "iris_radius", "eyelid_droop", "brightness")
# scalars a shifted user draws from the negated source range (lit from the other side)
MIRRORED_SCALARS = ("light_gradient",)

EYE_HALF_WIDTH = 4.2
EYE_HALF_HEIGHT = 2.6
IRIS_GAIN_X = 4.0  # pixels of iris travel per radian
IRIS_GAIN_Y = 4.0
SCLERA = 0.92
IRIS = 0.12
EDGE = 3.0  # sharpness of the soft masks

FRONTAL_YAW = math.radians(15.0)
FRONTAL_PITCH = math.radians(10.0)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    eye_spacing: float
    eye_height: float
    iris_radius: float
    eyelid_droop: float
    brightness: float
    noise_level: float
    light_gradient: float = 0.0
    yaw_max: float = 0.6
    pitch_max: float = 0.4

    def appearance(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in APPEARANCE_BOUNDS}


@dataclass
class GazeSample:
    image: np.ndarray
    yaw: float
    pitch: float
    user_id: int
    index: int = 0


def source_profile(user_id: int, rng: np.random.Generator) -> UserProfile:
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SOURCE_RANGES.items()}
    return UserProfile(user_id, **vals)


def shifted_profile(
    user_id: int, rng: np.random.Generator, margin: float = 0.5, mirror_light: bool = True
) -> UserProfile:
    """Profile whose shifted scalars fall outside the source range.

    Each shifted scalar lands beyond a randomly chosen end of its source range
    by between ``margin/2`` and ``margin`` range-widths, clipped to the hard
    bounds. With ``mirror_light`` the lighting gradient comes from the negated
    source range, so the user is lit from the side the source never was.
    Other scalars are drawn from the source range.
    """
    vals = {}
    for k, (lo, hi) in SOURCE_RANGES.items():
        if k in MIRRORED_SCALARS and mirror_light:
            vals[k] = -float(rng.uniform(lo, hi))
            continue
        if k not in SHIFTED_SCALARS:
            vals[k] = float(rng.uniform(lo, hi))
            continue
        width = hi - lo
        side = rng.integers(0, 2)
        step = width * margin * rng.uniform(0.5, 1.0)
        blo, bhi = APPEARANCE_BOUNDS[k]
        v = hi + step if side else lo - step
        if v < blo or v > bhi:  # flip to the side that fits
            v = lo - step if side else hi + step
        vals[k] = float(min(max(v, blo), bhi))
    return UserProfile(user_id, **vals)


def _soft(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(EDGE * x))


def render(profile: UserProfile, yaw: float, pitch: float) -> np.ndarray:
    """Noise-free image in [0, 1]."""
    p = profile
    v = _COORD[:, None]  # rows, + is down
    u = _COORD[None, :]
    dx = IRIS_GAIN_X * yaw
    dy = -IRIS_GAIN_Y * pitch
    half = 0.5 * p.eye_spacing
    img = np.full((SIZE, SIZE), p.brightness)
    lid_line = -EYE_HALF_HEIGHT + 2.0 * EYE_HALF_HEIGHT * p.eyelid_droop
    total_eye = 0.0
    total = 0.0
    for side in (-1.0, 1.0):
        du = u - side * half
        dv = v - p.eye_height
        ellipse = 1.0 - (du / EYE_HALF_WIDTH) ** 2 - (dv / EYE_HALF_HEIGHT) ** 2
        eye = _soft(ellipse) * _soft(dv - lid_line)
        iu = u - (side * half + dx)
        iv = dv - dy
        iris = _soft(p.iris_radius - np.sqrt(iu * iu + iv * iv))
        total_eye = total_eye + eye
        total = total + eye * (SCLERA * (1.0 - iris) + IRIS * iris)
    img = img * (1.0 - total_eye) + total
    # horizontal shading, brighter on the right for a positive gradient
    img = img * (1.0 + p.light_gradient * (u / _CENTER))
    return np.clip(img, 0.0, 1.0)


def gen_sample(
    profile: UserProfile, yaw: float, pitch: float, rng: np.random.Generator, index: int = 0
) -> GazeSample:
    if abs(yaw) > profile.yaw_max or abs(pitch) > profile.pitch_max:
        raise PoseRangeError(
            f"pose ({yaw:.3f}, {pitch:.3f}) outside (+-{profile.yaw_max}, +-{profile.pitch_max})"
        )
    img = render(profile, yaw, pitch)
    if profile.noise_level > 0:
        img = np.clip(img + rng.normal(0.0, profile.noise_level, size=img.shape), 0.0, 1.0)
    return GazeSample(img, float(yaw), float(pitch), profile.user_id, index)


def sample_pose(profile: UserProfile, rng: np.random.Generator, frontal: bool = False):
    ym = min(profile.yaw_max, FRONTAL_YAW) if frontal else profile.yaw_max
    pm = min(profile.pitch_max, FRONTAL_PITCH) if frontal else profile.pitch_max
    return float(rng.uniform(-ym, ym)), float(rng.uniform(-pm, pm))


def user_samples(
    profile: UserProfile,
    count: int,
    rng: np.random.Generator,
    frontal_first: int = 0,
) -> list[GazeSample]:
    """``count`` samples; the first ``frontal_first`` use near-frontal poses."""
    out = []
    for i in range(count):
        yaw, pitch = sample_pose(profile, rng, frontal=i < frontal_first)
        out.append(gen_sample(profile, yaw, pitch, rng, index=i))
    return out


def stack(samples: Sequence[GazeSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.array([[s.yaw, s.pitch] for s in samples], dtype=np.float64)
    return images, labels


def flip_image(image: np.ndarray) -> np.ndarray:
    """Horizontal mirror (reverses the last axis, so batches work too)."""
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def flip_yaw(g):
    g = np.asarray(g, dtype=np.float64)
    out = g.copy()
    out[..., 0] = -out[..., 0]
    return out


def symmetry_loss(preds: Sequence[tuple]) -> float:
    """Mean over pairs of ||g - FlipYaw(g_flip)||_1."""
    if len(preds) == 0:
        raise ContractError("symmetry loss needs at least one prediction pair")
    g = np.array([p[0] for p in preds], dtype=np.float64)
    gf = np.array([p[1] for p in preds], dtype=np.float64)
    return symmetry_loss_batch(g, gf)[0]


def symmetry_loss_batch(pred: np.ndarray, pred_flip: np.ndarray):
    """Loss and its (sub)gradients w.r.t. both prediction arrays (N x 2)."""
    if len(pred) == 0:
        raise ContractError("symmetry loss needs at least one prediction pair")
    diff = pred - flip_yaw(pred_flip)
    n = len(pred)
    loss = float(np.abs(diff).sum() / n)
    g = np.sign(diff) / n
    return loss, g, -flip_yaw(g)


def gaze_vector(yaw, pitch) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack(
        [np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)], axis=-1
    )


def angular_errors(g: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    """Row-wise angle in degrees between (yaw, pitch) arrays of shape (N, 2)."""
    g = np.asarray(g, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    a = gaze_vector(g[..., 0], g[..., 1])
    b = gaze_vector(g_hat[..., 0], g_hat[..., 1])
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def angular_error(g, g_hat) -> float:
    return float(angular_errors(np.asarray(g)[None], np.asarray(g_hat)[None])[0])


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Originals followed by one jittered copy of each.

    Jitter: additive brightness in [-0.1, 0.1], Gaussian pixel noise with
    sigma 0.02, and a translation of up to one pixel per axis (edge pixels
    replicated).
    """
    copies = []
    for img in images:
        shift = rng.integers(-1, 2, size=2)
        padded = np.pad(img, 1, mode="edge")
        moved = padded[1 - shift[0] : 1 - shift[0] + SIZE, 1 - shift[1] : 1 - shift[1] + SIZE]
        moved = moved + rng.uniform(-0.1, 0.1) + rng.normal(0.0, 0.02, size=img.shape)
        copies.append(np.clip(moved, 0.0, 1.0))
    return np.concatenate([images, np.stack(copies)]) if copies else images
