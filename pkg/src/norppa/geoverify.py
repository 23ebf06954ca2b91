"""Geometric verification of candidate matches: nearest-descriptor pairing,
percentile filtering, DLT homography estimation inside RANSAC, and hotspot
ellipse overlays for visual explanation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StageError
from .features.types import AffineRegion, DescriptorSet

_INTENSITY_FLOOR = 0.1


@dataclass
class FeatureMatch:
    """A query feature paired with its nearest database feature."""

    query_region: AffineRegion
    db_region: AffineRegion
    distance: float


@dataclass
class Homography:
    h: np.ndarray  # 3x3, h[2,2] = 1 when that entry is nonzero
    inlier_count: int
    mean_reprojection_error: float

    def __post_init__(self) -> None:
        self.h = np.asarray(self.h, dtype=np.float64).reshape(3, 3)


@dataclass
class Hotspot:
    qx: float
    qy: float
    qshape: np.ndarray  # 2x2
    dx: float
    dy: float
    dshape: np.ndarray  # 2x2
    distance: float
    intensity: float


@dataclass
class HotspotOverlay:
    query_image_id: str
    db_image_id: str
    spots: list[Hotspot] = field(default_factory=list)


def match_features(query: DescriptorSet, db: DescriptorSet) -> list[FeatureMatch]:
    """Nearest database descriptor for every query descriptor.

    Ties go to the lowest database index.
    """
    if query.empty or db.empty:
        raise StageError("geoverify", "no features")
    q = query.matrix()
    d = db.matrix()
    if q.shape[1] != d.shape[1]:
        raise StageError("geoverify", f"descriptor dim mismatch: {q.shape[1]} vs {d.shape[1]}")
    distances = np.clip(1.0 - q @ d.T, 0.0, 2.0)
    nearest = np.argmin(distances, axis=1)
    return [
        FeatureMatch(
            query_region=query.descriptors[i].region,
            db_region=db.descriptors[int(j)].region,
            distance=float(distances[i, j]),
        )
        for i, j in enumerate(nearest)
    ]


def percentile_filter(matches: list[FeatureMatch], p: float) -> list[FeatureMatch]:
    """Keep matches with distance <= the p-th percentile (linear interpolation)."""
    if not 0.0 < p <= 100.0:
        raise StageError("geoverify", f"percentile must be in (0, 100], got {p}")
    if not matches:
        return []
    threshold = float(np.percentile([m.distance for m in matches], p))
    kept = [m for m in matches if m.distance <= threshold]
    if not kept:  # threshold >= min distance, so this cannot trigger; belt and braces
        kept = [min(matches, key=lambda m: m.distance)]
    return kept


def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform taking the points to zero centroid, mean norm sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = float(np.mean(np.linalg.norm(points - centroid, axis=1)))
    scale = np.sqrt(2.0) / max(mean_dist, 1e-12)
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def _reprojection_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ones = np.ones((src.shape[0], 1))
    projected = np.hstack([src, ones]) @ h.T
    w = projected[:, 2]
    safe = np.abs(w) > 1e-12
    errors = np.full(src.shape[0], np.inf)
    errors[safe] = np.hypot(
        projected[safe, 0] / w[safe] - dst[safe, 0],
        projected[safe, 1] / w[safe] - dst[safe, 1],
    )
    return errors


def _normalize_h(h: np.ndarray) -> np.ndarray:
    if abs(h[2, 2]) > 1e-12:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def estimate_homography_dlt(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Direct Linear Transform with Hartley point normalization.

    Exact for noise-free consistent correspondences; raises on rank-deficient
    (e.g. collinear) configurations.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] < 4 or src.shape != dst.shape:
        raise StageError("geoverify", "need at least 4 point correspondences")
    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    ones = np.ones((src.shape[0], 1))
    sn = np.hstack([src, ones]) @ t_src.T
    dn = np.hstack([dst, ones]) @ t_dst.T

    n = src.shape[0]
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = -sn
    a[0::2, 6:9] = dn[:, [0]] * sn
    a[1::2, 3:6] = -sn
    a[1::2, 6:9] = dn[:, [1]] * sn
    _, s, vt = np.linalg.svd(a)
    s_full = np.zeros(9)
    s_full[: s.shape[0]] = s
    if s_full[7] < 1e-9 * max(s_full[0], 1e-12):
        raise StageError("geoverify", "degenerate correspondences")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(np.linalg.det(h)) < 1e-12:
        raise StageError("geoverify", "degenerate correspondences")
    h = _normalize_h(h)
    errors = _reprojection_errors(h, src, dst)
    return Homography(h=h, inlier_count=src.shape[0], mean_reprojection_error=float(errors.mean()))


def ransac_homography(
    matches: list[FeatureMatch],
    iterations: int = 2000,
    inlier_threshold: float = 5.0,
    seed: int = 0,
) -> tuple[Homography, list[FeatureMatch]]:
    """Robust homography from matched region centers.

    Best model by (inlier count, lower mean inlier error); the final model is
    re-fit by DLT on the winning inlier set.  Raises "no consistent geometry"
    when no model reaches 4 inliers.
    """
    if len(matches) < 4:
        raise StageError("geoverify", "need at least 4 matches")
    src = np.array([[m.query_region.cx, m.query_region.cy] for m in matches])
    dst = np.array([[m.db_region.cx, m.db_region.cy] for m in matches])
    rng = np.random.default_rng(seed)
    n = len(matches)
    best_mask: np.ndarray | None = None
    best_count = 0
    best_mean = np.inf
    for _ in range(iterations):
        pick = rng.choice(n, size=4, replace=False)
        try:
            model = estimate_homography_dlt(src[pick], dst[pick])
        except StageError:
            continue
        errors = _reprojection_errors(model.h, src, dst)
        mask = errors <= inlier_threshold
        count = int(mask.sum())
        if count < 4:
            continue
        mean_err = float(errors[mask].mean())
        if count > best_count or (count == best_count and mean_err < best_mean):
            best_mask, best_count, best_mean = mask, count, mean_err
    if best_mask is None:
        raise StageError("geoverify", "no consistent geometry")
    try:
        final = estimate_homography_dlt(src[best_mask], dst[best_mask])
    except StageError:
        final = None
    if final is None:
        h = _normalize_h(estimate_homography_dlt(src[best_mask][:4], dst[best_mask][:4]).h)
    else:
        h = final.h
    inlier_errors = _reprojection_errors(h, src[best_mask], dst[best_mask])
    inliers = [m for m, keep in zip(matches, best_mask) if keep]
    return (
        Homography(h=h, inlier_count=best_count, mean_reprojection_error=float(inlier_errors.mean())),
        inliers,
    )


def render_hotspots(
    inliers: list[FeatureMatch],
    query_image_id: str = "",
    db_image_id: str = "",
) -> HotspotOverlay:
    """One ellipse pair per inlier; intensity inverse-monotone in distance.

    intensity = 0.1 + 0.9 * (1 - (d - d_min)/d_max), so the closest pair gets
    1.0 and all values stay in (0.1, 1.0]; a lone inlier (or all-zero
    distances) maps to 1.0.
    """
    if not inliers:
        raise StageError("geoverify", "no inliers to render")
    distances = np.array([m.distance for m in inliers])
    d_min, d_max = float(distances.min()), float(distances.max())
    overlay = HotspotOverlay(query_image_id=query_image_id, db_image_id=db_image_id)
    for m in inliers:
        rel = 0.0 if d_max <= 0.0 else (m.distance - d_min) / d_max
        overlay.spots.append(
            Hotspot(
                qx=m.query_region.cx,
                qy=m.query_region.cy,
                qshape=m.query_region.shape,
                dx=m.db_region.cx,
                dy=m.db_region.cy,
                dshape=m.db_region.shape,
                distance=m.distance,
                intensity=_INTENSITY_FLOOR + (1.0 - _INTENSITY_FLOOR) * (1.0 - rel),
            )
        )
    return overlay


def overlay_to_json(overlay: HotspotOverlay, homography: Homography | None = None) -> dict:
    """Overlay as plain data: {pairs: [...], homography: [9 values row-major]}."""
    return {
        "query-image-id": overlay.query_image_id,
        "db-image-id": overlay.db_image_id,
        "pairs": [
            {
                "qx": s.qx,
                "qy": s.qy,
                "qshape": [float(v) for v in np.asarray(s.qshape).ravel()],
                "dx": s.dx,
                "dy": s.dy,
                "dshape": [float(v) for v in np.asarray(s.dshape).ravel()],
                "distance": s.distance,
                "intensity": s.intensity,
            }
            for s in overlay.spots
        ],
        "homography": [float(v) for v in homography.h.ravel()] if homography is not None else None,
    }


def overlay_to_svg(overlay_json: dict, side: str = "query", width: int = 512, height: int = 512) -> str:
    """Render one side of an overlay as an SVG of transformed unit circles."""
    if side not in ("query", "db"):
        raise ValueError("side must be 'query' or 'db'")
    kx, ky, kshape = ("qx", "qy", "qshape") if side == "query" else ("dx", "dy", "dshape")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for pair in overlay_json["pairs"]:
        a11, a12, a21, a22 = pair[kshape]
        transform = (
            f"matrix({a11:.3f} {a21:.3f} {a12:.3f} {a22:.3f} "
            f"{pair[kx]:.3f} {pair[ky]:.3f})"
        )
        parts.append(
            f'<circle r="1" transform="{transform}" fill="none" '
            f'stroke="#ff3b30" stroke-opacity="{pair["intensity"]:.3f}" stroke-width="0.15"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)
