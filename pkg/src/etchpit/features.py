"""Patch feature vectors and the FVEC1 exchange format.

The classical 43-dimensional descriptor is the built-in fallback; 4096-d
vectors from a pretrained backbone arrive through ``read_fvec`` and flow
through the same downstream reducers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import cv2
import numpy as np
from skimage.filters import threshold_otsu

from .imgproc import Blob, GrayImage, Patch, fit_ellipse, shape_descriptors
from .quality import PATCH_SIZE, resample_patch

__all__ = [
    "CLASSICAL_DIM",
    "CLASSICAL_BLOCKS",
    "FeatureSet",
    "FeatureNormalizer",
    "classical_features",
    "classical_feature_set",
    "normalize_features",
    "write_fvec",
    "read_fvec",
]

CLASSICAL_DIM = 43
# (name, start, stop, block-wide scaling?) — heterogeneous blocks are
# normalized per feature, same-unit blocks share one min/max
CLASSICAL_BLOCKS = (
    ("hu", 0, 7, False),
    ("radial", 7, 23, True),
    ("hist", 23, 39, True),
    ("shape", 39, 43, False),
)

_FVEC_MAGIC = b"FVEC1"


@dataclass
class FeatureSet:
    """Fixed-dimension feature vectors with their patch ids."""

    values: np.ndarray  # (n, dim)
    ids: list[str]
    source: str = "classical"  # classical | external
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if len(self.ids) != self.values.shape[0]:
            raise ValueError("id/vector count mismatch")

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def __len__(self) -> int:
        return int(self.values.shape[0])


def _binary_main_blob(gray: np.ndarray) -> np.ndarray | None:
    """Dark-side Otsu binarization, largest 8-connected component."""
    if np.ptp(gray) < 1e-9:
        return None
    thr = threshold_otsu(gray)
    mask = gray < thr
    if not mask.any():
        return None
    from scipy import ndimage

    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    sizes = ndimage.sum(mask, labels, range(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def classical_features(patch: Patch | GrayImage | np.ndarray) -> np.ndarray:
    """43-d classical descriptor of a patch (raw, not yet normalized).

    Blocks: 7 Hu moments of the binarized pit, 16-bin radial intensity
    profile about the pit centroid, 16-bin intensity histogram, and
    [area, lengthiness, compactness, circularity] of the binarized pit.
    The area is expressed in source-crop pixels (mask fraction times the
    original crop size), because resampling to 64x64 erases scale.
    """
    gray = resample_patch(patch)
    if isinstance(patch, Patch):
        src_h, src_w = patch.image.data.shape
    elif isinstance(patch, GrayImage):
        src_h, src_w = patch.data.shape
    else:
        src_h, src_w = np.asarray(patch).shape

    mask = _binary_main_blob(gray)

    if mask is None:
        hu = np.zeros(7)
        cx, cy = (PATCH_SIZE - 1) / 2.0, (PATCH_SIZE - 1) / 2.0
        shape_block = np.zeros(4)
    else:
        hu = cv2.HuMoments(cv2.moments(mask.astype(np.uint8), binaryImage=True)).ravel()
        ys, xs = np.nonzero(mask)
        blob = Blob(xs=xs, ys=ys)
        cx, cy = blob.centroid
        fit = fit_ellipse(blob)
        d = shape_descriptors(blob, fit)
        area_src = blob.area / (PATCH_SIZE * PATCH_SIZE) * (src_h * src_w)
        shape_block = np.array([area_src, d.lengthiness, d.compactness, d.circularity])

    ys, xs = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE]
    r = np.hypot(xs - cx, ys - cy)
    r_max = r.max()
    ring = np.minimum((r / (r_max + 1e-12) * 16).astype(int), 15)
    radial = np.array([gray[ring == i].mean() if (ring == i).any() else 0.0 for i in range(16)])

    hist, _ = np.histogram(gray, bins=16, range=(0.0, 1.0))
    hist = hist / gray.size

    return np.concatenate([hu, radial, hist, shape_block])


def classical_feature_set(patches: list, ids: list[str]) -> FeatureSet:
    flags = []
    rows = []
    for pid, p in zip(ids, patches):
        vec = classical_features(p)
        rows.append(vec)
        if not np.any(vec[:7]):
            flags.append(f"{pid}: empty binarized patch, zero moment block")
    return FeatureSet(values=np.stack(rows), ids=list(ids), source="classical", flags=flags)


class FeatureNormalizer:
    """Dataset min-max scaling that can be persisted and replayed.

    Classical vectors are scaled block-wise per CLASSICAL_BLOCKS (blocks
    with shared units use one min/max, heterogeneous blocks go per
    feature); external vectors get plain per-feature min-max. Transformed
    values are clipped to [0, 1] so out-of-training-range patches stay
    inside the space the reducer saw.
    """

    def __init__(self, lo: np.ndarray, hi: np.ndarray, source: str):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        self.source = source

    @classmethod
    def fit(cls, fs: FeatureSet) -> "FeatureNormalizer":
        X = fs.values
        lo = X.min(axis=0)
        hi = X.max(axis=0)
        if fs.source == "classical" and fs.dim == CLASSICAL_DIM:
            for _, start, stop, shared in CLASSICAL_BLOCKS:
                if shared:
                    lo[start:stop] = X[:, start:stop].min()
                    hi[start:stop] = X[:, start:stop].max()
        return cls(lo, hi, fs.source)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        span = self.hi - self.lo
        out = np.zeros_like(X)
        ok = span > 0
        out[:, ok] = (X[:, ok] - self.lo[ok]) / span[ok]
        return np.clip(out, 0.0, 1.0)

    def save(self, path) -> None:
        np.savez(path, lo=self.lo, hi=self.hi, source=np.bytes_(self.source))

    @classmethod
    def load(cls, path) -> "FeatureNormalizer":
        data = np.load(path)
        return cls(data["lo"], data["hi"], bytes(data["source"]).decode())


def normalize_features(fs: FeatureSet) -> FeatureSet:
    """Min-max normalize a feature set over itself (see FeatureNormalizer)."""
    norm = FeatureNormalizer.fit(fs)
    return FeatureSet(
        values=norm.transform(fs.values), ids=fs.ids, source=fs.source, flags=list(fs.flags)
    )


def write_fvec(path, values: np.ndarray, ids: list[str]) -> None:
    """Write the FVEC1 exchange file: magic, u32 count, u32 dim,
    count*dim little-endian float32, then length-prefixed (u32) UTF-8
    patch ids in row order."""
    values = np.ascontiguousarray(values, dtype="<f4")
    n, dim = values.shape
    if len(ids) != n:
        raise ValueError("id count does not match vector count")
    with open(path, "wb") as fh:
        fh.write(_FVEC_MAGIC)
        fh.write(struct.pack("<II", n, dim))
        fh.write(values.tobytes())
        for pid in ids:
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def read_fvec(path) -> FeatureSet:
    """Read an FVEC1 file; rejects truncation (with expected vs actual
    byte counts) and non-finite entries (with the row index)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_FVEC_MAGIC)] != _FVEC_MAGIC:
        raise ValueError("not an FVEC1 file (bad magic)")
    off = len(_FVEC_MAGIC)
    if len(blob) < off + 8:
        raise ValueError("truncated FVEC1 header")
    n, dim = struct.unpack_from("<II", blob, off)
    off += 8
    payload = n * dim * 4
    if len(blob) < off + payload:
        raise ValueError(
            f"truncated FVEC1 payload: expected {payload} bytes of vectors, "
            f"got {len(blob) - off}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += payload
    bad = np.nonzero(~np.isfinite(values).all(axis=1))[0]
    if bad.size:
        raise ValueError(f"non-finite feature entries at row {int(bad[0])}")
    ids = []
    for i in range(n):
        if len(blob) < off + 4:
            raise ValueError(f"truncated FVEC1 id table at entry {i}")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        if len(blob) < off + length:
            raise ValueError(f"truncated FVEC1 id table at entry {i}")
        ids.append(blob[off : off + length].decode("utf-8"))
        off += length
    return FeatureSet(values=values.astype(np.float64), ids=ids, source="external")
