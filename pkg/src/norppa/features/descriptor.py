"""Patch extraction and gradient-histogram description of affine regions."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy import ndimage

from ..errors import StageError
from .detector import _as_float_image, _gradients
from .types import AffineRegion, Descriptor, DescriptorSet

_SPATIAL_CELLS = 4
_ORIENT_BINS = 8
_DESC_DIM = _SPATIAL_CELLS * _SPATIAL_CELLS * _ORIENT_BINS
_MIN_PATCH = 16


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def measurement_region(
    region: AffineRegion, patch_size: int = 32, measurement_scale: float = 3.0
) -> AffineRegion:
    """Rescale a region so a patch_size patch spans `measurement_scale` radii."""
    factor = 2.0 * measurement_scale / patch_size
    return replace(
        region,
        shape=region.shape * factor,
        scale=region.scale * factor,
    )


def extract_patch(image, region: AffineRegion, patch_size: int = 32) -> np.ndarray:
    """Sample the mean-subtracted patch p(o) = I(c + A R(theta) o).

    Offsets o are integer pixel offsets from the patch center, so an identity
    shape reproduces a plain crop and k*I resamples at stride k.  Bilinear
    interpolation, zero padding outside the image.
    """
    img = _as_float_image(image)
    h, w = img.shape
    b = region.shape @ _rotation(region.orientation)
    half_extent = float(np.linalg.svd(b, compute_uv=False)[0]) * (patch_size // 2)
    if (
        region.cx + half_extent < 0
        or region.cx - half_extent > w - 1
        or region.cy + half_extent < 0
        or region.cy - half_extent > h - 1
    ):
        raise StageError("features", "region out of bounds")
    off = np.arange(patch_size, dtype=np.float64) - patch_size // 2
    ox, oy = np.meshgrid(off, off)
    xs = region.cx + b[0, 0] * ox + b[0, 1] * oy
    ys = region.cy + b[1, 0] * ox + b[1, 1] * oy
    patch = ndimage.map_coordinates(img, [ys, xs], order=1, mode="constant", cval=0.0)
    return patch - patch.mean()


def describe(patch: np.ndarray) -> tuple[np.ndarray, bool]:
    """Gradient-histogram descriptor of a square patch.

    4x4 spatial cells x 8 orientation bins, trilinear soft assignment,
    Gaussian-weighted magnitudes; L1 normalization, elementwise square root,
    then L2 normalization.  Returns (values, low_contrast); a featureless
    patch yields a uniform unit vector flagged low-contrast.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise StageError("features", "patch must be square")
    size = patch.shape[0]
    if size < _MIN_PATCH:
        raise StageError("features", "patch too small")

    gx, gy = _gradients(patch)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)

    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64)
    cx, cy = np.meshgrid(coords, coords)
    sigma = size / 2.0
    weight = mag * np.exp(-((cx - half) ** 2 + (cy - half) ** 2) / (2.0 * sigma**2))

    # Continuous cell coordinates in [-0.5, cells - 0.5].
    ucol = (cx + 0.5) / size * _SPATIAL_CELLS - 0.5
    urow = (cy + 0.5) / size * _SPATIAL_CELLS - 0.5
    c0 = np.floor(ucol).astype(int)
    r0 = np.floor(urow).astype(int)
    fc = ucol - c0
    fr = urow - r0

    ob = (ang + math.pi) / (2.0 * math.pi) * _ORIENT_BINS
    b0 = np.floor(ob).astype(int) % _ORIENT_BINS
    fb = ob - np.floor(ob)

    grid = np.zeros((_SPATIAL_CELLS + 2, _SPATIAL_CELLS + 2, _ORIENT_BINS))
    rr, cc, bb = r0.ravel() + 1, c0.ravel() + 1, b0.ravel()
    frv, fcv, fbv, wv = fr.ravel(), fc.ravel(), fb.ravel(), weight.ravel()
    for dr in (0, 1):
        wr = wv * (frv if dr else 1.0 - frv)
        for dc in (0, 1):
            wc = wr * (fcv if dc else 1.0 - fcv)
            for db in (0, 1):
                wb = wc * (fbv if db else 1.0 - fbv)
                np.add.at(grid, (rr + dr, cc + dc, (bb + db) % _ORIENT_BINS), wb)
    hist = grid[1 : _SPATIAL_CELLS + 1, 1 : _SPATIAL_CELLS + 1].ravel()

    total = hist.sum()
    if total < 1e-12:
        return np.full(_DESC_DIM, 1.0 / math.sqrt(_DESC_DIM)), True
    hist = np.sqrt(hist / total)
    hist /= np.linalg.norm(hist)
    return hist, False


def compute_descriptors(
    image,
    regions: list[AffineRegion],
    image_id: str,
    patch_size: int = 32,
    measurement_scale: float = 3.0,
) -> DescriptorSet:
    """Describe every region of an image; out-of-bounds regions are skipped."""
    descriptors: list[Descriptor] = []
    img = _as_float_image(image)
    for region in regions:
        try:
            patch = extract_patch(img, measurement_region(region, patch_size, measurement_scale), patch_size)
        except StageError:
            continue
        values, low_contrast = describe(patch)
        descriptors.append(Descriptor(values=values, region=region, low_contrast=low_contrast))
    return DescriptorSet(image_id=image_id, descriptors=descriptors)
