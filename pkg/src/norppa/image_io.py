"""Raster and pattern-mask file I/O.

Accepted inputs: binary PGM/PPM (P5/P6, 8-bit) and 8-bit grayscale/RGB PNG.
Pattern masks are PGM with 0 = background and 255 = foreground.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .preprocess import PatternImage, Raster

_ACCEPTED_MODES = {"L", "RGB"}


def load_raster(path: str | Path) -> Raster:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in _ACCEPTED_MODES:
                im = im.convert("RGB" if im.mode in ("P", "RGBA", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read raster {path}: {exc}") from exc
    return Raster(arr, source_id=path.stem)


def load_pattern_mask(path: str | Path, threshold: int = 128) -> PatternImage:
    """Read a PGM/PNG mask; pixels >= threshold are foreground."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read mask {path}: {exc}") from exc
    return PatternImage(mask=arr >= threshold, source_id=path.stem)


def save_raster(raster: Raster, path: str | Path) -> None:
    path = Path(path)
    arr = np.clip(raster.pixels * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_pattern_mask(pattern: PatternImage, path: str | Path) -> None:
    path = Path(path)
    arr = np.where(pattern.mask, 255, 0).astype(np.uint8)
    Image.fromarray(arr).save(path)
