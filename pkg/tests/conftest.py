"""Shared synthetic-data builders for the test suite.

The ring-pattern generator produces binary pelage-like patterns: each
individual is a fixed random layout of annular arcs, and each rendering
applies a viewpoint jitter (rotation, scale, translation) plus optional
pixel noise, so database and query views of the same individual differ
the way field photographs do.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from norppa.preprocess import PatternImage

CANVAS = 192


def render_ring_pattern(
    individual_seed: int,
    variant_seed: int,
    size: int = CANVAS,
    max_rotation: float = 0.0,
    max_scale: float = 1.0,
    noise: float = 0.0,
) -> PatternImage:
    """One rendering of a ring-patterned individual.

    The layout (ring centers, radii, thicknesses, arc spans) is a pure
    function of `individual_seed`; the viewing transform and noise come
    from `variant_seed`.
    """
    lay = np.random.default_rng(individual_seed)
    var = np.random.default_rng(variant_seed)
    n_rings = int(lay.integers(6, 10))
    rings = [
        (
            lay.uniform(25, size - 25),  # cx
            lay.uniform(25, size - 25),  # cy
            lay.uniform(8, 20),  # radius
            lay.uniform(4.5, 7.5),  # thickness
            lay.uniform(0, 2 * math.pi),  # arc start
            lay.uniform(2.5, 2 * math.pi),  # arc length
        )
        for _ in range(n_rings)
    ]
    theta = var.uniform(-max_rotation, max_rotation)
    scale = math.exp(var.uniform(-math.log(max_scale), math.log(max_scale))) if max_scale > 1.0 else 1.0
    dx, dy = var.uniform(-4, 4, 2)
    c, s = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    # Inverse map from pixel to the pattern's reference frame.
    ux = (xx - size / 2 - dx) / scale
    uy = (yy - size / 2 - dy) / scale
    px = c * ux + s * uy + size / 2
    py = -s * ux + c * uy + size / 2
    mask = np.zeros((size, size), dtype=bool)
    for cx, cy, radius, thickness, a0, alen in rings:
        rj = radius + var.uniform(-0.6, 0.6)
        d = np.hypot(px - cx, py - cy)
        ang = (np.arctan2(py - cy, px - cx) - a0) % (2 * math.pi)
        mask |= (np.abs(d - rj) < thickness / 2) & (ang < alen)
    if noise > 0.0:
        flips = var.random((size, size)) < noise
        mask = mask ^ flips
    return PatternImage(mask=mask, source_id=f"ind{individual_seed}-v{variant_seed}")


def random_unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Rows uniform on the unit sphere."""
    v = rng.normal(size=(count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
