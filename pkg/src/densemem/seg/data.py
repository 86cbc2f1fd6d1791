"""Synthetic occluded "heart" images with complete ground-truth masks.

Each image shows three structures around a randomly posed long axis:

    1  inner chamber  (filled ellipse)
    2  outer wall     (ring around the chamber)
    3  side chamber   (ellipse beyond the base of the wall)

with multiplicative gamma speckle. Occlusion is a wedge (cone) with its
apex at the centre of the anatomy; it is swept from a random start angle
until it covers the requested fraction of structure-boundary pixels, and
every pixel inside it is set to exactly zero in the image. The mask is
never touched, so the label still describes the full anatomy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from ..errors import ParameterError
from ..numerics import make_rng

NUM_CLASSES = 4
# background, inner chamber, outer wall, side chamber
CLASS_INTENSITY = np.array([0.15, 0.35, 0.85, 0.6])
SPECKLE_SHAPE = 6.0


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    mask: np.ndarray
    occlusion_level: float
    seed: int
    occluded: np.ndarray  # bool H×W, pixels zeroed by the occluder


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour of a different label."""
    m = np.asarray(mask)
    diff = np.zeros(m.shape, dtype=bool)
    diff[1:, :] |= m[1:, :] != m[:-1, :]
    diff[:-1, :] |= m[:-1, :] != m[1:, :]
    diff[:, 1:] |= m[:, 1:] != m[:, :-1]
    diff[:, :-1] |= m[:, :-1] != m[:, 1:]
    return diff & (m > 0)


def render_anatomy(size: int, rng: np.random.Generator):
    """Label map plus the anatomy centre used as the occluder apex."""
    s = size / 32.0 * rng.uniform(0.85, 1.1)
    theta = rng.uniform(-0.35, 0.35)
    cy = size / 2.0 + rng.uniform(-2.0, 2.0)
    cx = size / 2.0 + rng.uniform(-2.0, 2.0)

    a_in, b_in = 7.0 * s * rng.uniform(0.9, 1.1), 4.5 * s * rng.uniform(0.9, 1.1)
    wall = 2.0 * s
    a_side, b_side = 3.5 * s * rng.uniform(0.85, 1.15), 4.5 * s * rng.uniform(0.85, 1.15)
    # ventricle centre sits above the composite centre, side chamber below
    total = 2 * (a_in + wall) + 2 * a_side
    off_v = -total / 2 + (a_in + wall)
    off_s = total / 2 - a_side

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = dy * math.cos(theta) + dx * math.sin(theta)  # along the long axis
    v = -dy * math.sin(theta) + dx * math.cos(theta)

    inner = ((u - off_v) / a_in) ** 2 + (v / b_in) ** 2 <= 1.0
    outer = ((u - off_v) / (a_in + wall)) ** 2 + (v / (b_in + wall)) ** 2 <= 1.0
    side = ((u - off_s) / a_side) ** 2 + (v / b_side) ** 2 <= 1.0

    mask = np.zeros((size, size), dtype=np.int64)
    mask[side] = 3
    mask[outer] = 2
    mask[inner] = 1
    return mask, (cy, cx)


def wedge_occluder(mask: np.ndarray, centre, level: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean wedge covering ``level`` of the boundary pixels (up to angle ties)."""
    size_y, size_x = mask.shape
    occ = np.zeros(mask.shape, dtype=bool)
    start = rng.uniform(0.0, 2 * math.pi)
    if level <= 0:
        return occ
    yy, xx = np.mgrid[0:size_y, 0:size_x].astype(np.float64) + 0.5
    ang = np.mod(np.arctan2(yy - centre[0], xx - centre[1]) - start, 2 * math.pi)
    bnd = boundary_pixels(mask)
    b_ang = np.sort(ang[bnd])
    k = int(round(level * b_ang.size))
    if k == 0:
        return occ
    return ang <= b_ang[k - 1]


def make_sample(size: int, level: float, seed: int) -> SyntheticSample:
    rng = make_rng(seed, "anatomy")
    mask, centre = render_anatomy(size, rng)
    clean = CLASS_INTENSITY[mask]
    speckle = rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, size=mask.shape)
    image = np.clip(clean * speckle, 1e-3, 1.0)
    occ = wedge_occluder(mask, centre, level, make_rng(seed, "occluder"))
    image[occ] = 0.0
    return SyntheticSample(image, mask, float(level), int(seed), occ)


def generate_dataset(n: int, occlusion_level: float, seed: int, image_size: int = 32) -> List[SyntheticSample]:
    """``n`` samples; sample ``i`` is drawn from the stream ``(seed, i)`` alone."""
    if n < 1:
        raise ParameterError(f"need at least one sample, got n={n}")
    if not 0.0 <= occlusion_level <= 1.0:
        raise ParameterError(f"occlusion level must lie in [0, 1], got {occlusion_level}")
    if image_size < 8:
        raise ParameterError(f"image_size must be >= 8, got {image_size}")
    seeds = [int(make_rng(seed, "dataset", i).integers(0, 2**62)) for i in range(n)]
    return [make_sample(image_size, occlusion_level, s) for s in seeds]


def stack(samples: List[SyntheticSample]):
    """``(images, masks)`` as (B, H, W) arrays."""
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
