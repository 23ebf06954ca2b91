"""Scale-space blob detection with iterative affine shape adaptation.

Regions are found as 3D local maxima of the scale-normalized determinant of
the Hessian over a downsampled octave pyramid, refined to sub-pixel accuracy,
then each region's ellipse is adapted to the local second-moment matrix until
it is isotropic in the normalized frame.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from ..preprocess import PatternImage, Raster
from .types import AffineRegion

# Characteristic radius of a blob detected at sigma: the determinant response
# of a centered Gaussian blob peaks when the detection scale matches the blob
# sigma, and the blob's visible extent is ~sqrt(2) of that.
_RADIUS_PER_SIGMA = math.sqrt(2.0)

_DERIV = np.array([0.5, 0.0, -0.5])
_SECOND = np.array([1.0, -2.0, 1.0])

# Affine adaptation constants.
_ADAPT_PATCH = 21
_ADAPT_MAX_ITERS = 10
_ADAPT_CONVERGENCE = 0.05
_MAX_ECCENTRICITY = 6.0

_ORI_BINS = 36
_ORI_PATCH = 33


def _as_float_image(image) -> np.ndarray:
    if isinstance(image, PatternImage):
        return image.to_float()
    if isinstance(image, Raster):
        return image.to_gray().pixels
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d image")
    return arr


def _hessian_response(level: np.ndarray, sigma: float) -> np.ndarray:
    lxx = ndimage.correlate1d(level, _SECOND, axis=1, mode="nearest")
    lyy = ndimage.correlate1d(level, _SECOND, axis=0, mode="nearest")
    lx = ndimage.correlate1d(level, _DERIV, axis=1, mode="nearest")
    lxy = ndimage.correlate1d(lx, _DERIV, axis=0, mode="nearest")
    return sigma**4 * (lxx * lyy - lxy * lxy)


def _quadratic_offset(cube: np.ndarray) -> np.ndarray:
    """Sub-voxel offset of the extremum of a 3x3x3 response neighbourhood."""
    g = np.array(
        [
            (cube[2, 1, 1] - cube[0, 1, 1]) / 2.0,
            (cube[1, 2, 1] - cube[1, 0, 1]) / 2.0,
            (cube[1, 1, 2] - cube[1, 1, 0]) / 2.0,
        ]
    )
    h = np.empty((3, 3))
    h[0, 0] = cube[2, 1, 1] - 2 * cube[1, 1, 1] + cube[0, 1, 1]
    h[1, 1] = cube[1, 2, 1] - 2 * cube[1, 1, 1] + cube[1, 0, 1]
    h[2, 2] = cube[1, 1, 2] - 2 * cube[1, 1, 1] + cube[1, 1, 0]
    h[0, 1] = h[1, 0] = (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1]) / 4.0
    h[0, 2] = h[2, 0] = (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0]) / 4.0
    h[1, 2] = h[2, 1] = (cube[1, 2, 2] - cube[1, 0, 2] - cube[1, 2, 0] + cube[1, 0, 0]) / 4.0
    try:
        off = np.linalg.solve(h, -g)
    except np.linalg.LinAlgError:
        return np.zeros(3)
    return np.clip(off, -1.0, 1.0)


def _sample_affine_patch(img: np.ndarray, cx: float, cy: float, b: np.ndarray, size: int) -> np.ndarray:
    """Sample a size x size patch p(o) = img(c + B o), bilinear, zero padded."""
    half = (size - 1) / 2.0
    off = np.arange(size, dtype=np.float64) - half
    ox, oy = np.meshgrid(off, off)
    xs = cx + b[0, 0] * ox + b[0, 1] * oy
    ys = cy + b[1, 0] * ox + b[1, 1] * oy
    return ndimage.map_coordinates(img, [ys, xs], order=1, mode="constant", cval=0.0)


def _gradients(patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.correlate1d(patch, _DERIV, axis=1, mode="nearest")
    gy = ndimage.correlate1d(patch, _DERIV, axis=0, mode="nearest")
    return gx, gy


def _gauss_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    off = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(off**2) / (2.0 * sigma**2))
    return np.outer(g, g)


def _sqrtm_inv_2x2(m: np.ndarray) -> np.ndarray:
    """Inverse square root of a symmetric positive-definite 2x2 matrix."""
    vals, vecs = np.linalg.eigh(m)
    vals = np.maximum(vals, 1e-12)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T


def _eccentricity(u: np.ndarray) -> float:
    s = np.linalg.svd(u, compute_uv=False)
    return float(s[0] / max(s[-1], 1e-12))


def _adapt_shape(img: np.ndarray, cx: float, cy: float, sigma: float) -> np.ndarray | None:
    """Baumberg iteration: return a det-1 shape matrix U, or None if divergent."""
    u = np.eye(2)
    rho = 2.0 * sigma  # integration neighbourhood radius in image units
    window = _gauss_window(_ADAPT_PATCH, _ADAPT_PATCH / 4.0)
    for _ in range(_ADAPT_MAX_ITERS):
        b = (2.0 * rho / _ADAPT_PATCH) * u
        patch = _sample_affine_patch(img, cx, cy, b, _ADAPT_PATCH)
        patch = ndimage.gaussian_filter(patch, 1.0, mode="nearest")
        gx, gy = _gradients(patch)
        m = np.array(
            [
                [np.sum(window * gx * gx), np.sum(window * gx * gy)],
                [np.sum(window * gx * gy), np.sum(window * gy * gy)],
            ]
        )
        tr = m[0, 0] + m[1, 1]
        if tr < 1e-12:
            return u  # featureless neighbourhood: keep current (isotropic) shape
        m /= tr
        vals = np.linalg.eigvalsh(m)
        q = math.sqrt(max(vals[1], 1e-12) / max(vals[0], 1e-12))
        if q - 1.0 < _ADAPT_CONVERGENCE:
            return u
        step = _sqrtm_inv_2x2(m)
        step /= math.sqrt(np.linalg.det(step))
        u = u @ step
        if _eccentricity(u) > _MAX_ECCENTRICITY:
            return None
    return u


def _dominant_orientation(img: np.ndarray, cx: float, cy: float, scale: float, u: np.ndarray) -> float:
    """Peak of the gradient-orientation histogram over the normalized patch."""
    b = (2.0 * 3.0 * scale / _ORI_PATCH) * u
    patch = _sample_affine_patch(img, cx, cy, b, _ORI_PATCH)
    gx, gy = _gradients(patch)
    mag = np.hypot(gx, gy)
    if mag.sum() < 1e-12:
        return 0.0
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    weight = mag * _gauss_window(_ORI_PATCH, _ORI_PATCH / 4.0)
    bins = np.floor((ang + math.pi) / (2.0 * math.pi) * _ORI_BINS).astype(int) % _ORI_BINS
    hist = np.bincount(bins.ravel(), weights=weight.ravel(), minlength=_ORI_BINS)
    # Circular smoothing, twice, with a small binomial kernel.
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    for _ in range(2):
        hist = sum(kernel[i] * np.roll(hist, i - 2) for i in range(5))
    k = int(np.argmax(hist))
    left, mid, right = hist[(k - 1) % _ORI_BINS], hist[k], hist[(k + 1) % _ORI_BINS]
    denom = left - 2.0 * mid + right
    delta = 0.0 if abs(denom) < 1e-12 else 0.5 * (left - right) / denom
    theta = (k + 0.5 + delta) / _ORI_BINS * 2.0 * math.pi - math.pi
    return float(theta)


def detect_regions(
    image,
    n_octaves: int = 5,
    scales_per_octave: int = 3,
    base_sigma: float = 1.6,
    response_threshold_rel: float = 1e-4,
    max_regions: int = 2000,
) -> list[AffineRegion]:
    """Detect affine-adapted blob regions, strongest first.

    Returns at most `max_regions` regions after non-maximum suppression; an
    empty image yields an empty list.
    """
    img = _as_float_image(image)
    if img.size == 0 or not np.any(img != img.flat[0]):
        return []

    candidates: list[tuple[float, float, float, float]] = []  # response, x, y, sigma
    octave_img = img
    eff_sigma = 0.5  # nominal blur of the input grid
    s = scales_per_octave
    for octave in range(n_octaves):
        if min(octave_img.shape) < 12:
            break
        sigmas = [base_sigma * 2.0 ** (i / s) for i in range(s + 2)]
        levels = []
        for sig in sigmas:
            add = math.sqrt(max(sig**2 - eff_sigma**2, 0.0))
            levels.append(ndimage.gaussian_filter(octave_img, add, mode="nearest") if add > 1e-6 else octave_img)
        stack = np.stack([_hessian_response(lv, sig) for lv, sig in zip(levels, sigmas)])
        local_max = ndimage.maximum_filter(stack, size=3, mode="nearest")
        peaks = (stack >= local_max) & (stack > 0.0)
        peaks[0] = peaks[-1] = False
        peaks[:, [0, -1], :] = False
        peaks[:, :, [0, -1]] = False
        for li, py, px in zip(*np.nonzero(peaks)):
            cube = stack[li - 1 : li + 2, py - 1 : py + 2, px - 1 : px + 2]
            off = _quadratic_offset(cube)
            sigma = base_sigma * 2.0 ** (octave + (li + off[0]) / s)
            x = (px + off[2]) * 2.0**octave
            y = (py + off[1]) * 2.0**octave
            candidates.append((float(stack[li, py, px]), x, y, sigma))
        # Next octave: start from the level at 2*base_sigma, halve resolution.
        octave_img = levels[s][::2, ::2]
        eff_sigma = base_sigma

    if not candidates:
        return []
    max_resp = max(c[0] for c in candidates)
    candidates = [c for c in candidates if c[0] >= response_threshold_rel * max_resp]
    candidates.sort(key=lambda c: -c[0])

    # Non-maximum suppression: drop a weaker candidate landing within half the
    # characteristic radius of an already accepted one at a similar scale.
    kept: list[tuple[float, float, float, float]] = []
    for resp, x, y, sigma in candidates:
        radius = _RADIUS_PER_SIGMA * sigma
        ok = True
        for _, kx, ky, ksigma in kept:
            if abs(math.log(sigma / ksigma)) < math.log(1.6) and (x - kx) ** 2 + (y - ky) ** 2 < (0.5 * radius) ** 2:
                ok = False
                break
        if ok:
            kept.append((resp, x, y, sigma))
        if len(kept) >= 3 * max_regions:
            break

    regions: list[AffineRegion] = []
    h, w = img.shape
    for resp, x, y, sigma in kept:
        if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
            continue
        u = _adapt_shape(img, x, y, sigma)
        if u is None:
            continue
        scale = _RADIUS_PER_SIGMA * sigma
        theta = _dominant_orientation(img, x, y, scale, u)
        regions.append(
            AffineRegion(
                cx=x,
                cy=y,
                shape=scale * u,
                scale=scale,
                response=resp,
                orientation=theta,
            )
        )
        if len(regions) >= max_regions:
            break
    return regions
