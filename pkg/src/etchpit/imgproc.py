"""Classical image pipeline for etch-pit candidate extraction.

A microscopy tile goes through four stages: illumination/contrast
correction (rolling ball + CLAHE), binarization and morphology to isolate
dark pixel groups, moment-based ellipse fitting with shape gating to drop
groups whose geometry cannot be an etch pit, and finally patch extraction
around the surviving blobs.

All images are float arrays in [0, 1]; pits are dark on a bright
background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from skimage.morphology import disk
from skimage.restoration import rolling_ball

__all__ = [
    "GrayImage",
    "BinaryMask",
    "Blob",
    "EllipseFit",
    "ShapeDescriptors",
    "GateLimits",
    "GateVerdict",
    "Patch",
    "correct_contrast",
    "segment_candidates",
    "fit_ellipse",
    "shape_descriptors",
    "shape_gate",
    "perimeter_chain_length",
    "extract_patch",
    "DEFAULT_GATE_LIMITS",
]

# 8-connectivity structure for component labeling; 4-connected labeling
# would split diagonal pit rims.
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)

MIN_BLOB_AREA = 4


@dataclass
class GrayImage:
    """Grayscale raster with intensities normalized to [0, 1]."""

    data: np.ndarray  # (height, width) float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"expected 2-D image, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "GrayImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    @classmethod
    def from_file(cls, path) -> "GrayImage":
        from PIL import Image

        with Image.open(path) as im:
            return cls.from_uint8(np.asarray(im.convert("L")))

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    def save_png(self, path) -> None:
        from PIL import Image

        Image.fromarray(self.to_uint8()).save(path, format="PNG")


@dataclass
class BinaryMask:
    """Per-pixel foreground flags, same dimensions as the source image."""

    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class Blob:
    """An 8-connected group of foreground pixels.

    ``xs``/``ys`` are parallel coordinate arrays (x = column, y = row);
    the bounding box is inclusive on both ends.
    """

    xs: np.ndarray
    ys: np.ndarray

    @property
    def area(self) -> int:
        return int(self.xs.size)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1), inclusive."""
        return (
            int(self.xs.min()),
            int(self.ys.min()),
            int(self.xs.max()),
            int(self.ys.max()),
        )

    @property
    def centroid(self) -> tuple[float, float]:
        return float(self.xs.mean()), float(self.ys.mean())

    def mask_local(self) -> np.ndarray:
        """Boolean mask of the blob inside its own bounding box."""
        x0, y0, x1, y1 = self.bbox
        m = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        m[self.ys - y0, self.xs - x0] = True
        return m


@dataclass
class EllipseFit:
    """Second-central-moment ellipse of a blob.

    Axis lengths are full lengths (4 * sqrt(eigenvalue) of the pixel
    covariance); ``orientation`` is the major-axis angle in [0, pi).
    """

    center: tuple[float, float]
    major: float
    minor: float
    orientation: float
    degenerate: bool = False

    @property
    def area(self) -> float:
        return np.pi * (self.major / 2.0) * (self.minor / 2.0)


@dataclass
class ShapeDescriptors:
    lengthiness: float
    compactness: float
    circularity: float


@dataclass
class GateLimits:
    """Shape-gate thresholds: reject if lengthiness > ``lengthiness`` or
    compactness/circularity fall below their limits."""

    lengthiness: float = 3.0
    compactness: float = 0.6
    circularity: float = 0.6


DEFAULT_GATE_LIMITS = GateLimits()


@dataclass
class GateVerdict:
    keep: bool
    reason: str | None = None  # degenerate | lengthiness | compactness | circularity
    descriptors: ShapeDescriptors | None = None


@dataclass
class Patch:
    """Crop around a blob: bounding box dilated by ``border`` px,
    clipped to the tile bounds."""

    image: GrayImage
    origin: tuple[int, int]  # (x0, y0) of the crop in tile coordinates
    blob: Blob | None
    border: int
    clipped: bool = False
    mask: np.ndarray | None = field(default=None, repr=False)  # blob mask in crop coords

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.image.width - 1, y0 + self.image.height - 1)


def correct_contrast(
    img: GrayImage,
    ball_radius: int = 50,
    clahe_clip: float = 2.0,
    clahe_tiles: int = 8,
) -> GrayImage:
    """Remove slow illumination gradients and equalize local contrast.

    Rolling-ball background subtraction runs on the inverted image (pits
    are dark, so the bright field is the background to flatten), followed
    by CLAHE on the flattened result. Deterministic; output in [0, 1].

    Parameters
    ----------
    img : GrayImage
    ball_radius : int
        Rolling-ball radius in pixels; should exceed the largest pit so
        pits are not absorbed into the background estimate.
    clahe_clip : float
        CLAHE clip limit.
    clahe_tiles : int
        CLAHE tile grid is ``clahe_tiles`` x ``clahe_tiles``.

    Raises
    ------
    ValueError
        If the image is smaller than one CLAHE tile in either dimension.
    """
    if ball_radius < 1:
        raise ValueError("ball_radius must be >= 1")
    if clahe_tiles < 1:
        raise ValueError("clahe_tiles must be >= 1")
    if img.width < clahe_tiles or img.height < clahe_tiles:
        raise ValueError(
            f"image {img.width}x{img.height} is smaller than the "
            f"{clahe_tiles}x{clahe_tiles} CLAHE tile grid"
        )

    # Pits are dark: flatten the inverted image so they are bumps above a
    # smooth background. The ball rolls in 8-bit intensity units (the
    # classic convention); on a [0,1] scale its tip would sag into the
    # pits themselves.
    inverted = (1.0 - img.data) * 255.0
    background = rolling_ball(inverted, radius=ball_radius)
    flattened = 1.0 - np.clip((inverted - background) / 255.0, 0.0, 1.0)

    # CLAHE of a flat field would shift the constant value (cv2 redistributes
    # the clipped histogram), breaking idempotence on constant images.
    if np.ptp(flattened) == 0.0:
        return GrayImage(flattened)

    as_u8 = np.round(flattened * 255.0).astype(np.uint8)
    clahe = cv2.createCLAHE(
        clipLimit=clahe_clip, tileGridSize=(clahe_tiles, clahe_tiles)
    )
    equalized = clahe.apply(as_u8).astype(np.float64) / 255.0
    return GrayImage(np.clip(equalized, 0.0, 1.0))


def _apply_morphology(mask: np.ndarray, plan: list[tuple[str, int]]) -> np.ndarray:
    for op, radius in plan:
        if radius < 1:
            raise ValueError(f"kernel radius must be >= 1, got {radius}")
        selem = disk(radius)
        if op == "erode":
            mask = ndimage.binary_erosion(mask, structure=selem)
        elif op == "open":
            mask = ndimage.binary_opening(mask, structure=selem)
        elif op == "dilate":
            mask = ndimage.binary_dilation(mask, structure=selem)
        else:
            raise ValueError(f"unknown morphology op {op!r}")
    return mask


def segment_candidates(
    img: GrayImage,
    threshold: float = 0.45,
    morph_plan: list[tuple[str, int]] | None = None,
    min_area: int = MIN_BLOB_AREA,
) -> list[Blob]:
    """Binarize (foreground = intensity < threshold), apply the morphology
    plan in order, and label 8-connected components.

    Blobs below ``min_area`` pixels are dropped as salt noise. An
    all-foreground mask yields a single blob; the shape gate deals with it
    downstream.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    mask = img.data < threshold
    if morph_plan:
        mask = _apply_morphology(mask, list(morph_plan))

    labels, n = ndimage.label(mask, structure=_STRUCTURE_8)
    blobs = []
    for ys, xs in _component_indices(labels, n):
        if xs.size >= min_area:
            blobs.append(Blob(xs=xs, ys=ys))
    return blobs


def _component_indices(labels: np.ndarray, n: int):
    """Yield (ys, xs) index arrays per labeled component, label order."""
    if n == 0:
        return
    order = np.argsort(labels, axis=None, kind="stable")
    flat = labels.ravel()[order]
    ys, xs = np.unravel_index(order, labels.shape)
    starts = np.searchsorted(flat, np.arange(1, n + 2))
    for i in range(n):
        sl = slice(starts[i], starts[i + 1])
        yield ys[sl], xs[sl]


def fit_ellipse(blob: Blob) -> EllipseFit:
    """Fit the second-central-moment ellipse to a blob's pixel set.

    Axis lengths are 4 * sqrt(eigenvalue) of the pixel coordinate
    covariance so a rasterized disk of radius R gets a fitted major axis
    of ~2R. Collinear blobs are flagged degenerate with the minor axis
    clamped to one pixel.
    """
    if blob.area < MIN_BLOB_AREA:
        raise ValueError(f"blob area {blob.area} < {MIN_BLOB_AREA}")
    pts = np.stack([blob.xs, blob.ys]).astype(np.float64)
    cov = np.cov(pts, bias=True)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.maximum(evals, 0.0)
    minor = 4.0 * np.sqrt(evals[0])
    major = 4.0 * np.sqrt(evals[1])
    vec = evecs[:, 1]
    orientation = float(np.arctan2(vec[1], vec[0])) % np.pi

    degenerate = False
    if minor < 1.0:
        minor = 1.0
        degenerate = True
    if major < minor:
        major, minor = minor, major
        orientation = (orientation + np.pi / 2.0) % np.pi
    return EllipseFit(
        center=blob.centroid,
        major=float(major),
        minor=float(minor),
        orientation=orientation,
        degenerate=degenerate,
    )


def perimeter_chain_length(blob: Blob) -> float:
    """Perimeter as the length of the blob's 8-connected outer boundary
    chain: axial steps count 1, diagonal steps sqrt(2). Stated convention
    so circularity is reproducible; a rasterized disk of radius R measures
    ~2*pi*R, keeping disk circularity near 1 at every scale (raw
    boundary-pixel counts land at 0.7 or 1.3 instead)."""
    local = blob.mask_local().astype(np.uint8)
    contours, _ = cv2.findContours(local, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        return 0.0
    return float(max(cv2.arcLength(c, True) for c in contours))


def shape_descriptors(blob: Blob, fit: EllipseFit) -> ShapeDescriptors:
    """Lengthiness, compactness, circularity of a blob given its fit."""
    lengthiness = fit.major / fit.minor
    compactness = blob.area / fit.area if fit.area > 0 else 0.0
    perim = perimeter_chain_length(blob)
    circularity = 4.0 * np.pi * blob.area / (perim * perim) if perim > 0 else 0.0
    return ShapeDescriptors(
        lengthiness=float(lengthiness),
        compactness=float(compactness),
        circularity=float(circularity),
    )


def shape_gate(
    blob: Blob,
    fit: EllipseFit,
    limits: GateLimits = DEFAULT_GATE_LIMITS,
) -> GateVerdict:
    """Keep a blob iff its shape is plausible for a single etch pit.

    Rejects on lengthiness > limit, circularity < limit, or compactness <
    limit (checked in that order, which fixes the reported reason);
    degenerate fits are always rejected.
    """
    if fit.degenerate:
        return GateVerdict(keep=False, reason="degenerate")
    d = shape_descriptors(blob, fit)
    if d.lengthiness > limits.lengthiness:
        return GateVerdict(keep=False, reason="lengthiness", descriptors=d)
    if d.circularity < limits.circularity:
        return GateVerdict(keep=False, reason="circularity", descriptors=d)
    if d.compactness < limits.compactness:
        return GateVerdict(keep=False, reason="compactness", descriptors=d)
    return GateVerdict(keep=True, descriptors=d)


def extract_patch(img: GrayImage, blob: Blob, border: int = 10) -> Patch:
    """Crop the blob's bounding box dilated by ``border`` px, clipped at
    the tile edges. The patch records whether clipping occurred and
    carries the blob's pixel mask in crop coordinates."""
    if border < 0:
        raise ValueError("border must be >= 0")
    bx0, by0, bx1, by1 = blob.bbox
    x0, y0 = bx0 - border, by0 - border
    x1, y1 = bx1 + border, by1 + border
    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, img.width - 1), min(y1, img.height - 1)
    clipped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)

    crop = img.data[cy0 : cy1 + 1, cx0 : cx1 + 1]
    mask = np.zeros_like(crop, dtype=bool)
    mask[blob.ys - cy0, blob.xs - cx0] = True
    return Patch(
        image=GrayImage(crop.copy()),
        origin=(cx0, cy0),
        blob=blob,
        border=border,
        clipped=clipped,
        mask=mask,
    )
