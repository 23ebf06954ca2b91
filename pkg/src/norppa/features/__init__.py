"""Affine-covariant local features: detection, description, file exchange."""

from .types import AffineRegion, Descriptor, DescriptorSet
from .detector import detect_regions
from .descriptor import compute_descriptors, describe, extract_patch, measurement_region
from .io import load_descriptors, save_descriptors

__all__ = [
    "AffineRegion",
    "Descriptor",
    "DescriptorSet",
    "detect_regions",
    "extract_patch",
    "describe",
    "compute_descriptors",
    "measurement_region",
    "load_descriptors",
    "save_descriptors",
]
