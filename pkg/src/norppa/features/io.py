"""Binary exchange format for descriptor sets.

Layout (little-endian): magic "NRPD", u32 version (=1), u32 record count T,
u32 descriptor dim; then T records of f32 fields
[cx, cy, a11, a12, a21, a22, orientation, response] followed by dim f32
descriptor values.  The characteristic scale is recovered as sqrt(det(A)).
"""

from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .types import AffineRegion, Descriptor, DescriptorSet

MAGIC = b"NRPD"
VERSION = 1
_HEADER_FIELDS = 8  # per-record region fields preceding the descriptor values


def save_descriptors(dset: DescriptorSet, path: str | Path) -> None:
    """Write a descriptor set atomically (temp file + rename)."""
    path = Path(path)
    dim = dset.descriptors[0].dim if dset.descriptors else 0
    rows = np.zeros((dset.T, _HEADER_FIELDS + dim), dtype="<f4")
    for i, d in enumerate(dset.descriptors):
        if d.dim != dim:
            raise FormatError("descriptor dimensions are not uniform")
        a = d.region.shape
        rows[i, :_HEADER_FIELDS] = [
            d.region.cx,
            d.region.cy,
            a[0, 0],
            a[0, 1],
            a[1, 0],
            a[1, 1],
            d.region.orientation,
            d.region.response,
        ]
        rows[i, _HEADER_FIELDS:] = d.values
    header = MAGIC + np.array([VERSION, dset.T, dim], dtype="<u4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(rows.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_descriptors(path: str | Path) -> DescriptorSet:
    """Read a descriptor set; the image id is the file stem."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("unsupported format: bad magic")
    version, count, dim = np.frombuffer(blob[4:16], dtype="<u4")
    if version != VERSION:
        raise FormatError(f"unsupported format version: {version}")
    record = _HEADER_FIELDS + int(dim)
    expected = 16 + 4 * record * int(count)
    if len(blob) < expected:
        raise FormatError("corrupt descriptor file: truncated payload")
    rows = np.frombuffer(blob[16:expected], dtype="<f4").reshape(int(count), record)
    descriptors = []
    for row in rows:
        a = np.array([[row[2], row[3]], [row[4], row[5]]], dtype=np.float64)
        det = float(np.linalg.det(a))
        if det <= 0 or not np.isfinite(det):
            raise FormatError("corrupt descriptor file: degenerate region shape")
        region = AffineRegion(
            cx=float(row[0]),
            cy=float(row[1]),
            shape=a,
            scale=math.sqrt(det),
            response=float(row[7]),
            orientation=float(row[6]),
        )
        descriptors.append(Descriptor(values=row[_HEADER_FIELDS:].astype(np.float64), region=region))
    return DescriptorSet(image_id=path.stem, descriptors=descriptors)
