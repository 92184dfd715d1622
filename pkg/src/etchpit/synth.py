"""Synthetic scene generation: grown backgrounds + dictionary pit pasting.

Backgrounds grow from a real texture seed one pixel at a time: the
unfilled pixel with the most filled window neighbors gets the center
value of a seed window sampled uniformly among those within (1 + eps) of
the best Gaussian-weighted SSD match. Scenes composite dictionary
patches by intensity-min blending (pits are dark) with per-instance
masks recorded for annotation export.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imgproc import GrayImage

__all__ = [
    "TextureSeed",
    "SceneSpec",
    "SceneInstance",
    "SyntheticScene",
    "grow_texture",
    "compose_scene",
    "export_dataset",
    "rle_encode",
    "rle_decode",
    "CATEGORY_IDS",
]

CATEGORY_IDS = {"BPD": 1, "TED": 2, "TSD": 3}
_EPSILON = 0.1  # candidate tolerance over the best SSD match


@dataclass
class TextureSeed:
    image: GrayImage  # nominally 200x200, any size >= the window works

    def __post_init__(self):
        if min(self.image.height, self.image.width) < 3:
            raise ValueError("texture seed too small")


@dataclass
class SceneSpec:
    size: tuple[int, int] = (512, 512)  # (height, width)
    ranges: dict = field(
        default_factory=lambda: {"BPD": (0, 20), "TED": (0, 10), "TSD": (0, 5)}
    )
    placement: str = "random"  # random | lagb_line
    lagb_jitter: float = 1.5  # px, perpendicular scatter about the line
    allow_overlap: bool = True
    seed: int = 0

    def __post_init__(self):
        for t, (lo, hi) in self.ranges.items():
            if lo < 0 or hi < lo:
                raise ValueError(f"bad count range for {t}: [{lo}, {hi}]")
        if self.placement not in ("random", "lagb_line"):
            raise ValueError(f"unknown placement {self.placement!r}")


@dataclass
class SceneInstance:
    kind: str
    mask: np.ndarray  # bool, local crop
    offset: tuple[int, int]  # (x0, y0) of the mask crop in scene coords
    center: tuple[float, float]

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x, y, w, h) tight around the mask."""
        ys, xs = np.nonzero(self.mask)
        x0, y0 = self.offset
        return (
            x0 + int(xs.min()),
            y0 + int(ys.min()),
            int(xs.max() - xs.min()) + 1,
            int(ys.max() - ys.min()) + 1,
        )

    def full_mask(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        x0, y0 = self.offset
        h, w = self.mask.shape
        out[y0 : y0 + h, x0 : x0 + w] = self.mask
        return out

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SyntheticScene:
    image: GrayImage
    instances: list[SceneInstance]
    background_id: int
    seed: int


def _gaussian_kernel(window: int) -> np.ndarray:
    half = window // 2
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1]
    sigma = window / 6.4
    return np.exp(-(xs**2 + ys**2) / (2.0 * sigma**2))


def grow_texture(
    seed: TextureSeed | GrayImage,
    out_size: int | tuple[int, int],
    window: int = 11,
    rng_seed: int = 0,
) -> GrayImage:
    """Grow a texture from the seed to ``out_size`` (Efros-Leung).

    Deterministic per ``rng_seed``. Pixels are copied from the seed, so
    the output's value support is contained in the seed's. Sequential by
    construction; large outputs are the slow step of the pipeline.
    """
    src = seed.image.data if isinstance(seed, TextureSeed) else seed.data
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    oh, ow = out_size
    sh, sw = src.shape
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    if window > min(sh, sw):
        raise ValueError("window larger than the seed")
    if oh < sh or ow < sw:
        raise ValueError("output must be at least the seed size")

    half = window // 2
    rng = np.random.default_rng(rng_seed)

    # all fully-inside seed windows as rows
    wins = sliding_window_view(src, (window, window)).reshape(-1, window * window)
    centers = src[half : sh - half, half : sw - half].ravel()
    wins_sq = wins**2
    gauss = _gaussian_kernel(window).ravel()

    out = np.zeros((oh + 2 * half, ow + 2 * half))
    filled = np.zeros_like(out, dtype=bool)
    y0, x0 = (oh - sh) // 2 + half, (ow - sw) // 2 + half
    out[y0 : y0 + sh, x0 : x0 + sw] = src
    filled[y0 : y0 + sh, x0 : x0 + sw] = True

    # count of filled neighbors within the window around each pixel
    counts = np.zeros_like(out, dtype=np.int32)
    ys, xs = np.nonzero(filled)
    for y, x in zip(ys, xs):
        counts[y - half : y + half + 1, x - half : x + half + 1] += 1

    interior = np.zeros_like(filled)
    interior[half : half + oh, half : half + ow] = True
    to_fill = int(interior.sum() - filled.sum())
    frontier_score = np.where(interior & ~filled, counts, -1)

    for _ in range(to_fill):
        flat = int(np.argmax(frontier_score))
        y, x = np.unravel_index(flat, frontier_score.shape)
        neigh = out[y - half : y + half + 1, x - half : x + half + 1].ravel()
        mask = filled[y - half : y + half + 1, x - half : x + half + 1].ravel()

        w = gauss * mask
        wv = w * neigh
        ssd = wins_sq @ w - 2.0 * (wins @ wv) + float(wv @ neigh)
        best = float(ssd.min())
        cands = np.nonzero(ssd <= best * (1.0 + _EPSILON) + 1e-12)[0]
        pick = int(cands[rng.integers(len(cands))])

        out[y, x] = centers[pick]
        filled[y, x] = True
        counts[y - half : y + half + 1, x - half : x + half + 1] += 1
        frontier_score[y - half : y + half + 1, x - half : x + half + 1] = np.where(
            interior[y - half : y + half + 1, x - half : x + half + 1]
            & ~filled[y - half : y + half + 1, x - half : x + half + 1],
            counts[y - half : y + half + 1, x - half : x + half + 1],
            -1,
        )

    return GrayImage(out[half : half + oh, half : half + ow])


def _feather(shape: tuple[int, int], width: int = 2) -> np.ndarray:
    """Blend weights: 1 in the interior, ramping to ~0 over ``width`` px
    at the crop edges, so pasted rectangles leave no halo."""
    h, w = shape
    ys = np.minimum(np.arange(h), np.arange(h)[::-1])
    xs = np.minimum(np.arange(w), np.arange(w)[::-1])
    ramp = np.minimum(ys[:, None], xs[None, :])
    return np.clip((ramp + 1) / (width + 1), 0.0, 1.0)


def _paste(canvas: np.ndarray, patch: np.ndarray, x0: int, y0: int) -> None:
    h, w = patch.shape
    region = canvas[y0 : y0 + h, x0 : x0 + w]
    weight = _feather(patch.shape)
    region[:] = weight * np.minimum(region, patch) + (1.0 - weight) * region


def compose_scene(
    spec: SceneSpec,
    dictionary: dict[str, list],
    backgrounds: list[GrayImage],
    scene_index: int = 0,
) -> SyntheticScene:
    """Compose one annotated scene.

    Dictionary entries are (patch 2-D array, pit mask) pairs per type.
    Per-type counts are drawn uniformly from the spec ranges; round types
    (TED/TSD) may be rotated by 90-degree multiples while BPDs keep their
    orientation (the pit asymmetry encodes the off-axis direction).
    ``lagb_line`` placement puts the BPDs on a jittered straight segment.
    The per-scene RNG stream derives from (spec.seed, scene_index).
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(scene_index,)))
    h, w = spec.size

    for kind, (lo, hi) in spec.ranges.items():
        if hi > 0 and not dictionary.get(kind):
            raise ValueError(f"dictionary has no patches for type {kind}")

    bg_id = int(rng.integers(len(backgrounds)))
    bg = backgrounds[bg_id].data
    if bg.shape[0] < h or bg.shape[1] < w:
        raise ValueError("background smaller than the scene")
    cy = int(rng.integers(bg.shape[0] - h + 1))
    cx = int(rng.integers(bg.shape[1] - w + 1))
    canvas = bg[cy : cy + h, cx : cx + w].copy()

    counts = {
        kind: int(rng.integers(lo, hi + 1)) for kind, (lo, hi) in spec.ranges.items()
    }

    occupancy = np.zeros((h, w), dtype=bool)
    instances: list[SceneInstance] = []

    def place(kind: str, forced_center: tuple[float, float] | None = None) -> bool:
        entries = dictionary[kind]
        for _attempt in range(100):
            patch, mask = entries[int(rng.integers(len(entries)))]
            if kind != "BPD":
                k = int(rng.integers(4))
                patch, mask = np.rot90(patch, k), np.rot90(mask, k)
            ph, pw = patch.shape
            if ph > h or pw > w:
                continue
            if forced_center is not None:
                x0 = int(round(forced_center[0] - pw / 2))
                y0 = int(round(forced_center[1] - ph / 2))
                x0 = min(max(x0, 0), w - pw)
                y0 = min(max(y0, 0), h - ph)
            else:
                x0 = int(rng.integers(w - pw + 1))
                y0 = int(rng.integers(h - ph + 1))
            if not spec.allow_overlap:
                if (occupancy[y0 : y0 + ph, x0 : x0 + pw] & mask).any():
                    continue
            _paste(canvas, patch, x0, y0)
            occupancy[y0 : y0 + ph, x0 : x0 + pw] |= mask
            ys, xs = np.nonzero(mask)
            center = (x0 + float(xs.mean()), y0 + float(ys.mean()))
            instances.append(
                SceneInstance(kind=kind, mask=mask.copy(), offset=(x0, y0), center=center)
            )
            return True
        return False

    for kind in ("BPD", "TED", "TSD"):
        n = counts.get(kind, 0)
        if n == 0:
            continue
        if kind == "BPD" and spec.placement == "lagb_line":
            theta = rng.uniform(0, np.pi)
            length = 0.8 * min(h, w)
            mx, my = w / 2 + rng.uniform(-w / 8, w / 8), h / 2 + rng.uniform(-h / 8, h / 8)
            ts = np.linspace(-0.5, 0.5, n)
            for t in ts:
                jitter = rng.normal(0.0, spec.lagb_jitter)
                cx_ = mx + t * length * np.cos(theta) - jitter * np.sin(theta)
                cy_ = my + t * length * np.sin(theta) + jitter * np.cos(theta)
                if not place(kind, forced_center=(cx_, cy_)):
                    counts[kind] -= 1
                    warnings.warn(f"could not place a {kind} on the line; count reduced")
            continue
        placed = 0
        for _ in range(n):
            if place(kind):
                placed += 1
            else:
                warnings.warn(
                    f"no room for a {kind} instance under the no-overlap policy; "
                    "count reduced"
                )
        counts[kind] = placed

    return SyntheticScene(
        image=GrayImage(np.clip(canvas, 0.0, 1.0)),
        instances=instances,
        background_id=bg_id,
        seed=spec.seed,
    )


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed COCO RLE: column-major runs, starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    counts = []
    current, run = False, 0
    for bit in flat:
        if bit == current:
            run += 1
        else:
            counts.append(run)
            current, run = bit, 1
    counts.append(run)
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in rle["counts"]:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape((h, w), order="F")


def export_dataset(scenes: list[SyntheticScene], out_dir) -> dict:
    """Write scene PNGs plus one COCO-format annotation JSON.

    Categories are BPD=1, TED=2, TSD=3; masks are uncompressed RLE.
    Returns the annotation dictionary that was written.
    """
    from pathlib import Path

    if not scenes:
        raise ValueError("no scenes to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    images, annotations = [], []
    ann_id = 1
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.png"
        scene.image.save_png(out / name)
        h, w = scene.image.data.shape
        images.append(
            {"id": i + 1, "file_name": name, "width": w, "height": h, "seed": scene.seed}
        )
        for inst in scene.instances:
            x, y, bw, bh = inst.bbox
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i + 1,
                    "category_id": CATEGORY_IDS[inst.kind],
                    "bbox": [x, y, bw, bh],
                    "area": inst.area,
                    "segmentation": rle_encode(inst.full_mask(h, w)),
                    "iscrowd": 0,
                }
            )
            ann_id += 1

    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": cid, "name": name} for name, cid in CATEGORY_IDS.items()
        ],
    }
    try:
        with open(out / "annotations.json", "w") as fh:
            json.dump(doc, fh, sort_keys=True)
    except OSError as exc:
        raise OSError(f"failed writing {out / 'annotations.json'}: {exc}") from exc
    return doc
