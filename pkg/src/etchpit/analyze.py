"""Wafer-scale analysis: detection, evaluation, densities, part counts.

The built-in detector is the classical pipeline (contrast correction,
segmentation, shape gate, quality gate, nearest-centroid typing in the
learned embedding space); externally produced instance predictions are
ingested through the COCO-style JSON path instead. Counting, RMSE
evaluation, density maps and per-part tables operate on either source.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import ClusterLabeling, TypeAssignment
from .embedding.umap import UmapModel
from .features import FeatureNormalizer, classical_features
from .imgproc import (
    GateLimits,
    GrayImage,
    correct_contrast,
    extract_patch,
    fit_ellipse,
    segment_candidates,
    shape_gate,
)
from .quality import QualityModel, predict_quality
from .synth import CATEGORY_IDS, rle_decode

__all__ = [
    "TileRecord",
    "TileManifest",
    "Detection",
    "PitClassifier",
    "detect_tile",
    "ingest_predictions",
    "rmse",
    "evaluate",
    "RmseReport",
    "DensityMap",
    "density_map",
    "part_counts",
    "burgers_radius",
]

_TYPE_OF_CATEGORY = {v: k for k, v in CATEGORY_IDS.items()}
DEFAULT_PIXEL_SIZE_UM = 0.35  # assumption: the paper states 20x but no um/px
DEFAULT_RADIUS_CLASSES_UM = (4.0, 7.0)  # small | medium | large


@dataclass
class TileRecord:
    tile_id: str
    path: str
    col: int
    row: int
    part: int  # wafer section index, 1..20

    def __post_init__(self):
        if not 1 <= self.part <= 20:
            raise ValueError(f"part index {self.part} outside 1..20")


@dataclass
class TileManifest:
    tiles: list[TileRecord]
    tile_width: int = 1292
    tile_height: int = 968
    overlap_px: int = 0
    pixel_size_um: float = DEFAULT_PIXEL_SIZE_UM
    magnification: str = "20x"

    def __post_init__(self):
        seen = set()
        for t in self.tiles:
            key = (t.col, t.row)
            if key in seen:
                raise ValueError(f"duplicate grid position {key}")
            seen.add(key)
        self._by_id = {t.tile_id: t for t in self.tiles}

    def tile(self, tile_id: str) -> TileRecord:
        return self._by_id[tile_id]

    def __contains__(self, tile_id: str) -> bool:
        return tile_id in self._by_id

    def origin_px(self, tile_id: str) -> tuple[float, float]:
        t = self.tile(tile_id)
        step_x = self.tile_width - self.overlap_px
        step_y = self.tile_height - self.overlap_px
        return (t.col * step_x, t.row * step_y)

    def center_px(self, tile_id: str) -> tuple[float, float]:
        x0, y0 = self.origin_px(tile_id)
        return (x0 + self.tile_width / 2.0, y0 + self.tile_height / 2.0)

    @classmethod
    def from_json(cls, path) -> "TileManifest":
        with open(path) as fh:
            doc = json.load(fh)
        tiles = [
            TileRecord(
                tile_id=t["id"], path=t.get("path", ""), col=t["col"], row=t["row"],
                part=t.get("part", 1),
            )
            for t in doc["tiles"]
        ]
        return cls(
            tiles=tiles,
            tile_width=doc.get("tile_width", 1292),
            tile_height=doc.get("tile_height", 968),
            overlap_px=doc.get("overlap_px", 0),
            pixel_size_um=doc.get("pixel_size_um", DEFAULT_PIXEL_SIZE_UM),
            magnification=doc.get("magnification", "20x"),
        )

    @classmethod
    def from_csv(cls, path, **globals_) -> "TileManifest":
        tiles = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                tiles.append(
                    TileRecord(
                        tile_id=row["id"], path=row.get("path", ""),
                        col=int(row["col"]), row=int(row["row"]),
                        part=int(row.get("part", 1)),
                    )
                )
        return cls(tiles=tiles, **globals_)

    def to_json(self, path) -> None:
        doc = {
            "tile_width": self.tile_width,
            "tile_height": self.tile_height,
            "overlap_px": self.overlap_px,
            "pixel_size_um": self.pixel_size_um,
            "magnification": self.magnification,
            "tiles": [
                {"id": t.tile_id, "path": t.path, "col": t.col, "row": t.row, "part": t.part}
                for t in self.tiles
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)


@dataclass
class Detection:
    kind: str
    bbox: tuple[int, int, int, int]  # (x, y, w, h) in tile coordinates
    tile_id: str
    score: float
    source: str  # builtin | external
    area_px: int
    mask: np.ndarray | None = field(default=None, repr=False)  # local to bbox

    def center_tile(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        if self.mask is not None and self.mask.any():
            ys, xs = np.nonzero(self.mask)
            return (x + float(xs.mean()), y + float(ys.mean()))
        return (x + w / 2.0, y + h / 2.0)

    def center_wafer(self, manifest: TileManifest) -> tuple[float, float]:
        ox, oy = manifest.origin_px(self.tile_id)
        cx, cy = self.center_tile()
        return (ox + cx, oy + cy)

    def radius_px(self) -> float:
        if self.area_px <= 0:
            raise ValueError("zero-area detection has no radius")
        return float(np.sqrt(self.area_px / np.pi))


def burgers_radius(
    detection: Detection,
    pixel_size_um: float,
    class_thresholds_um: tuple[float, ...] = DEFAULT_RADIUS_CLASSES_UM,
) -> tuple[float, str]:
    """Equivalent pit radius sqrt(area/pi) in micrometers plus its size
    class; larger radii indicate larger Burgers vectors."""
    r_um = detection.radius_px() * pixel_size_um
    names = ("small", "medium", "large")
    for limit, name in zip(class_thresholds_um, names):
        if r_um < limit:
            return r_um, name
    return r_um, names[len(class_thresholds_um)]


class PitClassifier:
    """Nearest-centroid typing of patches in the learned embedding space.

    Carries the feature normalizer, the fitted reducer, and per-type
    centroids of the dictionary clusters.
    """

    def __init__(
        self,
        normalizer: FeatureNormalizer,
        umap_model: UmapModel,
        centroids: np.ndarray,
        centroid_types: list[str],
    ):
        self.normalizer = normalizer
        self.umap_model = umap_model
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.centroid_types = list(centroid_types)

    @classmethod
    def from_dictionary(
        cls,
        features_raw: np.ndarray,
        normalizer: FeatureNormalizer,
        umap_model: UmapModel,
        embedding_coords: np.ndarray,
        labeling: ClusterLabeling,
        assignment: TypeAssignment,
    ) -> "PitClassifier":
        centroids, types = [], []
        for cluster, kind in sorted(assignment.mapping.items()):
            members = labeling.labels == cluster
            centroids.append(embedding_coords[members].mean(axis=0))
            types.append(kind)
        if not centroids:
            raise ValueError("type assignment maps no clusters; cannot classify")
        return cls(normalizer, umap_model, np.stack(centroids), types)

    def classify(self, patches: list) -> list[tuple[str, float]]:
        """(type, score) per patch; score = 1 / (1 + embedding distance
        to the winning centroid)."""
        feats = np.stack([classical_features(p) for p in patches])
        coords = self.umap_model.transform(self.normalizer.transform(feats))
        d = np.linalg.norm(coords[:, None, :] - self.centroids[None, :, :], axis=2)
        best = np.argmin(d, axis=1)
        return [
            (self.centroid_types[int(b)], float(1.0 / (1.0 + d[i, b])))
            for i, b in enumerate(best)
        ]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.normalizer.save(directory / "normalizer.npz")
        self.umap_model.save(directory / "reducer.npz")
        np.savez(directory / "centroids.npz", centroids=self.centroids)
        with open(directory / "classifier.json", "w") as fh:
            json.dump({"centroid_types": self.centroid_types}, fh, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "PitClassifier":
        directory = Path(directory)
        with open(directory / "classifier.json") as fh:
            meta = json.load(fh)
        return cls(
            normalizer=FeatureNormalizer.load(directory / "normalizer.npz"),
            umap_model=UmapModel.load(directory / "reducer.npz"),
            centroids=np.load(directory / "centroids.npz")["centroids"],
            centroid_types=meta["centroid_types"],
        )


def detect_tile(
    img: GrayImage,
    tile_id: str,
    classifier: PitClassifier,
    gate: QualityModel | None = None,
    threshold: float = 0.45,
    morph_plan: list | None = None,
    gate_limits: GateLimits | None = None,
    ball_radius: int = 50,
    patch_border: int = 10,
) -> tuple[list[Detection], dict]:
    """Run the classical detector on one tile.

    Pipeline: contrast correction, dark-threshold segmentation, shape
    gate, patch extraction, optional quality gate, then nearest-centroid
    typing. Returns (detections, report) where the report tallies the
    shape-gate rejects (the "unclassified" bucket) and quality rejects.
    """
    corrected = correct_contrast(img, ball_radius=ball_radius)
    blobs = segment_candidates(corrected, threshold=threshold, morph_plan=morph_plan)
    report = {"candidates": len(blobs), "shape_rejected": 0, "quality_rejected": 0}

    kept, patches = [], []
    for blob in blobs:
        verdict = shape_gate(blob, fit_ellipse(blob), gate_limits or GateLimits())
        if not verdict.keep:
            report["shape_rejected"] += 1
            continue
        patch = extract_patch(corrected, blob, border=patch_border)
        if gate is not None and predict_quality(gate, patch)[0] == 0:
            report["quality_rejected"] += 1
            continue
        kept.append(blob)
        patches.append(patch)

    detections = []
    if kept:
        for blob, (kind, score) in zip(kept, classifier.classify(patches)):
            x0, y0, x1, y1 = blob.bbox
            detections.append(
                Detection(
                    kind=kind,
                    bbox=(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                    tile_id=tile_id,
                    score=score,
                    source="builtin",
                    area_px=blob.area,
                    mask=blob.mask_local(),
                )
            )
    return detections, report


def ingest_predictions(path, manifest: TileManifest) -> tuple[list[Detection], dict]:
    """Read externally produced instance predictions (COCO annotations
    document or bare results list).

    Image ids resolve through the document's ``images`` table (file-name
    stem = tile id) or directly as tile-id strings. Unknown images,
    out-of-bounds boxes and unknown categories are itemized in the
    rejection report; exact duplicates (image, category, box) are
    dropped with a count.
    """
    with open(path) as fh:
        doc = json.load(fh)

    if isinstance(doc, dict):
        records = doc.get("annotations", [])
        id_to_tile = {
            img["id"]: Path(img["file_name"]).stem for img in doc.get("images", [])
        }
    else:
        records, id_to_tile = doc, {}

    detections: list[Detection] = []
    rejected: list[dict] = []
    seen: set = set()
    duplicates = 0

    for rec in records:
        image_id = rec.get("image_id")
        tile_id = id_to_tile.get(image_id, image_id if isinstance(image_id, str) else None)
        if tile_id is None or tile_id not in manifest:
            rejected.append({"record": rec.get("id"), "reason": f"unknown-image {image_id!r}"})
            continue
        cat = rec.get("category_id")
        if cat not in _TYPE_OF_CATEGORY:
            rejected.append({"record": rec.get("id"), "reason": f"unknown-category {cat!r}"})
            continue
        x, y, w, h = rec["bbox"]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or (
            x + w > manifest.tile_width or y + h > manifest.tile_height
        ):
            rejected.append({"record": rec.get("id"), "reason": f"out-of-bounds bbox {rec['bbox']}"})
            continue
        key = (tile_id, cat, round(x, 6), round(y, 6), round(w, 6), round(h, 6))
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)

        mask = None
        area = int(rec.get("area", round(w) * round(h)))
        seg = rec.get("segmentation")
        if isinstance(seg, dict) and "counts" in seg and isinstance(seg["counts"], list):
            full = rle_decode(seg)
            xi, yi = int(round(x)), int(round(y))
            mask = full[yi : yi + int(round(h)), xi : xi + int(round(w))]
            area = int(full.sum())
        detections.append(
            Detection(
                kind=_TYPE_OF_CATEGORY[cat],
                bbox=(int(round(x)), int(round(y)), int(round(w)), int(round(h))),
                tile_id=tile_id,
                score=float(rec.get("score", 1.0)),
                source="external",
                area_px=area,
                mask=mask,
            )
        )
    return detections, {"rejected": rejected, "duplicates": duplicates}


def rmse(truth, predicted) -> float:
    """Root-mean-square error between equal-length count vectors."""
    truth = np.asarray(truth, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if truth.shape != predicted.shape:
        raise ValueError(f"length mismatch: {truth.shape} vs {predicted.shape}")
    if truth.size == 0:
        raise ValueError("need at least one value")
    return float(np.sqrt(np.mean((truth - predicted) ** 2)))


@dataclass
class RmseReport:
    per_type: dict[str, float]
    signed_errors: dict[str, list[float]]  # predicted - truth, per image
    images: list[str]
    excluded: list[str]
    dataset_id: str = ""

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "dataset_id": self.dataset_id,
                    "per_type_rmse": self.per_type,
                    "images": self.images,
                    "excluded": self.excluded,
                },
                fh,
                sort_keys=True,
                indent=1,
            )

    def save_errors_csv(self, path) -> None:
        kinds = sorted(self.signed_errors)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image"] + [f"error_{k}" for k in kinds])
            for i, image in enumerate(self.images):
                writer.writerow([image] + [self.signed_errors[k][i] for k in kinds])


def evaluate(
    truth_counts: dict[str, dict[str, int]],
    predicted_counts: dict[str, dict[str, int]],
    dataset_id: str = "",
) -> RmseReport:
    """Per-type RMSE of per-image counts.

    ``truth_counts``/``predicted_counts`` map image id -> {type: count}.
    Images without truth are excluded and listed; missing predictions
    count as zero detections.
    """
    images = sorted(truth_counts)
    excluded = sorted(set(predicted_counts) - set(truth_counts))
    kinds = sorted(CATEGORY_IDS)
    per_type, signed = {}, {}
    for kind in kinds:
        t = [truth_counts[i].get(kind, 0) for i in images]
        p = [predicted_counts.get(i, {}).get(kind, 0) for i in images]
        per_type[kind] = rmse(t, p)
        signed[kind] = [float(pi - ti) for ti, pi in zip(t, p)]
    return RmseReport(
        per_type=per_type,
        signed_errors=signed,
        images=images,
        excluded=excluded,
        dataset_id=dataset_id,
    )


def count_by_image(detections: list[Detection]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for d in detections:
        out.setdefault(d.tile_id, {}).setdefault(d.kind, 0)
        out[d.tile_id][d.kind] += 1
    return out


@dataclass
class DensityMap:
    counts: np.ndarray  # (rows, cols) int
    bin_um: float
    origin_um: tuple[float, float]
    kind: str

    @property
    def density_per_cm2(self) -> np.ndarray:
        # 1 cm^2 = 1e8 um^2
        return self.counts / (self.bin_um**2) * 1.0e8

    def save_csv(self, path) -> None:
        np.savetxt(path, self.counts, fmt="%d", delimiter=",")


def dedup_detections(
    detections: list[Detection], manifest: TileManifest
) -> tuple[list[Detection], list[Detection]]:
    """Overlap deduplication: keep a detection only if no other tile's
    center is strictly nearer to it than its own tile's center. A pit in
    an overlap strip is imaged by two tiles; both copies sit at the same
    wafer position, and exactly one tile center is nearer. Detections
    whose tile is missing from the manifest land in the second list."""
    centers = {t.tile_id: manifest.center_px(t.tile_id) for t in manifest.tiles}
    cx = np.array([c[0] for c in centers.values()])
    cy = np.array([c[1] for c in centers.values()])
    ids = list(centers)
    kept, orphans = [], []
    for det in detections:
        if det.tile_id not in centers:
            orphans.append(det)
            continue
        wx, wy = det.center_wafer(manifest)
        d2 = (cx - wx) ** 2 + (cy - wy) ** 2
        own = ids.index(det.tile_id)
        if d2.min() >= d2[own] - 1e-9:
            kept.append(det)
        elif ids[int(np.argmin(d2))] == det.tile_id:
            kept.append(det)
        else:
            pass  # a neighboring tile owns this position
    return kept, orphans


def density_map(
    detections: list[Detection],
    manifest: TileManifest,
    bin_um: float,
) -> tuple[dict[str, DensityMap], dict]:
    """Per-type 2-D histograms of detections in wafer coordinates.

    Bin totals equal the deduplicated per-type detection counts exactly;
    density is count / bin-area in cm^-2.
    """
    if manifest.pixel_size_um <= 0:
        raise ValueError("manifest pixel size must be positive")
    kept, orphans = dedup_detections(detections, manifest)

    step_x = manifest.tile_width - manifest.overlap_px
    step_y = manifest.tile_height - manifest.overlap_px
    max_col = max(t.col for t in manifest.tiles)
    max_row = max(t.row for t in manifest.tiles)
    extent_x_um = (max_col * step_x + manifest.tile_width) * manifest.pixel_size_um
    extent_y_um = (max_row * step_y + manifest.tile_height) * manifest.pixel_size_um
    n_cols = max(int(np.ceil(extent_x_um / bin_um)), 1)
    n_rows = max(int(np.ceil(extent_y_um / bin_um)), 1)

    maps = {
        kind: DensityMap(
            counts=np.zeros((n_rows, n_cols), dtype=np.int64),
            bin_um=bin_um,
            origin_um=(0.0, 0.0),
            kind=kind,
        )
        for kind in CATEGORY_IDS
    }
    for det in kept:
        wx, wy = det.center_wafer(manifest)
        col = min(int(wx * manifest.pixel_size_um / bin_um), n_cols - 1)
        row = min(int(wy * manifest.pixel_size_um / bin_um), n_rows - 1)
        maps[det.kind].counts[row, col] += 1

    report = {
        "deduplicated": len(detections) - len(kept) - len(orphans),
        "out_of_bounds": [d.tile_id for d in orphans],
    }
    return maps, report


def part_counts(
    detections: list[Detection], manifest: TileManifest
) -> tuple[dict[int, dict[str, int]], dict[int, str]]:
    """20 x 3 count table (wafer part -> type counts) plus the dominant
    type per part."""
    table = {part: {k: 0 for k in CATEGORY_IDS} for part in range(1, 21)}
    for det in detections:
        if det.tile_id in manifest:
            part = manifest.tile(det.tile_id).part
            table[part][det.kind] += 1
    dominant = {}
    for part, counts in table.items():
        total = sum(counts.values())
        if total:
            dominant[part] = max(sorted(counts), key=lambda k: counts[k])
    return table, dominant


def write_part_counts_csv(path, table: dict[int, dict[str, int]]) -> None:
    kinds = sorted(CATEGORY_IDS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["part"] + kinds)
        for part in sorted(table):
            writer.writerow([part] + [table[part][k] for k in kinds])
