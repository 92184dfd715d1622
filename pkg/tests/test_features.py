"""Tests for classical patch features and the FVEC1 exchange format."""

from __future__ import annotations

import numpy as np
import pytest

from etchpit.features import (
    CLASSICAL_DIM,
    classical_feature_set,
    classical_features,
    normalize_features,
    read_fvec,
    write_fvec,
)

from shapegen import mask_to_image, rasterize_disk, rasterize_ellipse


def patch_of(mask: np.ndarray, size: int = 64) -> np.ndarray:
    img = mask_to_image(mask)
    canvas = np.full((size, size), 0.9)
    h, w = img.shape
    y0, x0 = (size - h) // 2, (size - w) // 2
    canvas[y0 : y0 + h, x0 : x0 + w] = img
    return canvas


class TestClassicalFeatures:
    def test_dimension(self):
        rng = np.random.default_rng(0)
        assert classical_features(rng.random((64, 64))).shape == (CLASSICAL_DIM,)
        assert CLASSICAL_DIM == 43

    def test_hu_scale_invariance(self):
        small = classical_features(patch_of(rasterize_disk(8)))
        large = classical_features(patch_of(rasterize_disk(16)))
        np.testing.assert_allclose(small[:7], large[:7], atol=1e-3)

    def test_lengthiness_ratio_disk_vs_ellipse(self):
        disk = classical_features(patch_of(rasterize_disk(10)))
        ell = classical_features(patch_of(rasterize_ellipse(20, 5)))
        ratio = ell[40] / disk[40]  # lengthiness is feature 40
        assert ratio == pytest.approx(4.0, rel=0.15)

    def test_empty_patch_flagged(self):
        fs = classical_feature_set([np.full((64, 64), 0.5)], ["flat"])
        assert not np.any(fs.values[0, :7])
        assert any("flat" in f for f in fs.flags)

    def test_normalization_range_and_blocks(self):
        rng = np.random.default_rng(1)
        patches = [patch_of(rasterize_disk(rng.integers(5, 15))) for _ in range(10)]
        fs = classical_feature_set(patches, [f"p{i}" for i in range(10)])
        normed = normalize_features(fs)
        assert normed.values.min() >= 0.0 and normed.values.max() <= 1.0


class TestFvecFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(5, 17)).astype(np.float32)
        ids = [f"tile3_blob{i}" for i in range(5)]
        path = tmp_path / "feats.fvec"
        write_fvec(path, values, ids)
        fs = read_fvec(path)
        assert fs.source == "external"
        assert fs.ids == ids
        np.testing.assert_array_equal(fs.values.astype(np.float32), values)

    def test_header_counts_honored(self, tmp_path):
        values = np.zeros((2, 4096), dtype=np.float32)
        path = tmp_path / "f.fvec"
        write_fvec(path, values, ["a", "b"])
        fs = read_fvec(path)
        assert len(fs) == 2 and fs.dim == 4096

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        values = np.ones((3, 8), dtype=np.float32)
        path = tmp_path / "f.fvec"
        write_fvec(path, values, ["a", "b", "c"])
        raw = path.read_bytes()
        (tmp_path / "cut.fvec").write_bytes(raw[: 5 + 8 + 40])
        with pytest.raises(ValueError, match=r"expected 96 bytes.*got 40"):
            read_fvec(tmp_path / "cut.fvec")

    def test_nan_rows_rejected_with_index(self, tmp_path):
        values = np.ones((3, 4), dtype=np.float32)
        values[1, 2] = np.nan
        path = tmp_path / "f.fvec"
        write_fvec(path, values, ["a", "b", "c"])
        with pytest.raises(ValueError, match="row 1"):
            read_fvec(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.fvec"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            read_fvec(path)
