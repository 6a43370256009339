import numpy as np
import pytest

from resplat.palette import (
    DEFAULT_ETA_P,
    ETA_P_PRESETS,
    PaletteRecord,
    filter_dataset,
    intensity_map,
    palette_score,
    read_records_csv,
    score_pair,
    write_records_csv,
)


class TestIntensityMap:
    def test_white_is_one(self):
        np.testing.assert_allclose(intensity_map(np.ones((4, 4, 3), np.float32)), 1.0, atol=1e-6)

    def test_pure_red_coefficient(self):
        img = np.zeros((4, 4, 3), np.float32)
        img[..., 0] = 1.0
        np.testing.assert_allclose(intensity_map(img), 0.299, atol=1e-6)

    def test_matches_weighted_sum_oracle(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        expect = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        np.testing.assert_allclose(intensity_map(img), expect, atol=1e-6)

    def test_range(self, rng):
        out = intensity_map(rng.random((32, 32, 3)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestPaletteScore:
    def test_constant_region_scores_zero(self):
        intensity = np.full((16, 16), 0.37)
        assert palette_score(intensity, np.ones((16, 16), bool)) == 0.0

    def test_empty_mask_scores_zero(self):
        assert palette_score(np.random.rand(8, 8), np.zeros((8, 8), bool)) == 0.0

    def test_two_point_distribution_scores_zero(self):
        # {0, 1} equally weighted: mu=0.5, sigma=0.5, |x-mu| not < sigma
        intensity = np.zeros((2, 4))
        intensity[:, 2:] = 1.0
        assert palette_score(intensity, np.ones((2, 4), bool)) == 0.0

    def test_normal_draw_matches_one_sigma_mass(self):
        rng = np.random.default_rng(20240809)
        intensity = rng.normal(0.5, 0.1, size=(1000, 1000))
        score = palette_score(intensity, np.ones((1000, 1000), bool))
        assert score == pytest.approx(0.6827, abs=0.005)

    def test_permutation_invariance(self, rng):
        intensity = rng.random((20, 20))
        mask = rng.random((20, 20)) < 0.6
        base = palette_score(intensity, mask)
        flat = intensity[mask]
        rng.shuffle(flat)
        shuffled = intensity.copy()
        shuffled[mask] = flat
        assert palette_score(shuffled, mask) == pytest.approx(base, abs=1e-12)

    def test_affine_invariance_inside_mask(self, rng):
        intensity = rng.random((24, 24))
        mask = rng.random((24, 24)) < 0.5
        base = palette_score(intensity, mask)
        transformed = intensity.copy()
        transformed[mask] = 0.4 * intensity[mask] + 0.17
        assert palette_score(transformed, mask) == pytest.approx(base, abs=1e-12)

    def test_score_bounds(self, rng):
        for _ in range(20):
            intensity = rng.random((12, 12))
            mask = rng.random((12, 12)) < rng.uniform(0, 1)
            assert 0.0 <= palette_score(intensity, mask) <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            palette_score(np.zeros((4, 4)), np.zeros((5, 4), bool))

    def test_score_pair_degenerate_flag(self, rng):
        img = np.full((8, 8, 3), 0.5, np.float32)
        rec = score_pair("flat", img, np.ones((8, 8), bool))
        assert rec.degenerate and rec.score == 0.0
        rec2 = score_pair("empty", img, np.zeros((8, 8), bool))
        assert rec2.degenerate and rec2.masked_pixel_count == 0
        rec3 = score_pair("textured", rng.random((8, 8, 3)).astype(np.float32), np.ones((8, 8), bool))
        assert not rec3.degenerate


class TestFilterDataset:
    def test_default_threshold(self):
        import inspect

        assert inspect.signature(filter_dataset).parameters["eta_p"].default == 0.68
        assert DEFAULT_ETA_P == 0.68
        assert ETA_P_PRESETS == (0.38, 0.68, 0.86)

    def test_all_zero_scores_keep_nothing(self):
        records = [PaletteRecord(f"p{i}", 0.0, 10, 0.5, 0.0, True) for i in range(5)]
        assert filter_dataset(records) == []

    def test_strict_comparison_at_threshold(self):
        records = [
            PaletteRecord("a", 0.67, 10, 0.5, 0.1),
            PaletteRecord("b", 0.68, 10, 0.5, 0.1),
            PaletteRecord("c", 0.69, 10, 0.5, 0.1),
        ]
        assert filter_dataset(records, 0.68) == ["c"]

    def test_csv_round_trip(self, tmp_path, rng):
        records = [
            PaletteRecord(f"pair{i}", float(rng.random()), int(rng.integers(0, 100)),
                          float(rng.random()), float(rng.random()), bool(rng.integers(0, 2)))
            for i in range(6)
        ]
        path = tmp_path / "scores.csv"
        write_records_csv(records, path)
        loaded = read_records_csv(path)
        for a, b in zip(records, loaded):
            assert a.pair_id == b.pair_id
            assert a.score == pytest.approx(b.score, rel=1e-8)
            assert a.masked_pixel_count == b.masked_pixel_count
            assert a.degenerate == b.degenerate
