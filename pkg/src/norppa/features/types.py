"""Value types shared by the feature detection and description stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AffineRegion:
    """An affine-covariant region: the image of the unit circle under `shape`.

    `shape` is a 2x2 matrix A with det(A) > 0 mapping unit-circle points to
    pixel offsets around (cx, cy); `scale` is the characteristic radius
    sqrt(det(A)).  `orientation` is the dominant gradient direction in
    radians, measured in image coordinates (x right, y down).
    """

    cx: float
    cy: float
    shape: np.ndarray
    scale: float
    response: float
    orientation: float = 0.0

    def __post_init__(self) -> None:
        self.shape = np.asarray(self.shape, dtype=np.float64).reshape(2, 2)
        if not np.isfinite(self.shape).all():
            raise ValueError("region shape must be finite")
        if np.linalg.det(self.shape) <= 0:
            raise ValueError("region shape must have positive determinant")
        if self.scale <= 0:
            raise ValueError("region scale must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy], dtype=np.float64)


@dataclass
class Descriptor:
    """A unit-norm local descriptor attached to the region it was measured on."""

    values: np.ndarray
    region: AffineRegion
    low_contrast: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class DescriptorSet:
    """All descriptors extracted from one image."""

    image_id: str
    descriptors: list[Descriptor] = field(default_factory=list)

    @property
    def T(self) -> int:  # noqa: N802 - descriptor count, conventional name
        return len(self.descriptors)

    @property
    def empty(self) -> bool:
        return len(self.descriptors) == 0

    def matrix(self) -> np.ndarray:
        """Stack descriptor values into a (T, dim) array (0 x 0 when empty)."""
        if self.empty:
            return np.zeros((0, 0), dtype=np.float64)
        return np.stack([d.values for d in self.descriptors])
