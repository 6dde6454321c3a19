import math

import numpy as np
import pytest

from slidefuse.stains import (
    RgbTile,
    StainMatrix,
    extract_cells,
    optical_density,
    unmix,
)

from oracles import bfs_label_8

# realistic haematoxylin / DAB / Fast-Red-like OD triplets
VECTORS = np.array(
    [
        [0.650, 0.704, 0.286],
        [0.268, 0.570, 0.776],
        [0.214, 0.851, 0.478],
    ]
)
MATRIX = StainMatrix(labels=("haematoxylin", "dab", "fastred"), od_vectors=VECTORS)


def tile_from(pixels, resolution=1.0, origin=(0.0, 0.0)):
    return RgbTile(
        pixels=np.asarray(pixels, dtype=np.uint8),
        resolution_um_per_px=resolution,
        origin=origin,
    )


def render(concentrations, matrix, background=255.0):
    """Independent forward model: I = I0 * 10^-(c @ M)."""
    od = np.asarray(concentrations, dtype=float) @ matrix.od_vectors
    return background * np.power(10.0, -od)


class TestStainMatrix:
    def test_rows_normalized(self):
        norms = np.linalg.norm(MATRIX.od_vectors, axis=1)
        assert norms == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)

    def test_condition_number_reported(self):
        assert MATRIX.condition_number > 1.0
        assert math.isfinite(MATRIX.condition_number)

    def test_singular_rejected_at_construction(self):
        dup = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError, match="singular"):
            StainMatrix(labels=("a", "b", "c"), od_vectors=dup)

    def test_negative_vector_rejected(self):
        bad = VECTORS.copy()
        bad[0, 0] = -0.1
        with pytest.raises(ValueError, match="nonnegative"):
            StainMatrix(labels=("a", "b", "c"), od_vectors=bad)

    def test_unknown_channel(self):
        with pytest.raises(ValueError, match="unknown stain"):
            MATRIX.channel("nope")


class TestOpticalDensity:
    def test_white_background_is_zero(self):
        od = optical_density(tile_from([[[255, 255, 255]]]))
        assert od == pytest.approx(np.zeros((1, 1, 3)), abs=0.0)

    def test_tenth_intensity_is_one(self):
        # 25.5 rounds to pixel value shown in 8-bit as 25 or 26; use exact 10x
        od = optical_density(tile_from([[[25, 255, 255]]]), background=(250.0, 255.0, 255.0))
        assert od[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
        assert od[0, 0, 1:] == pytest.approx([0.0, 0.0], abs=0.0)

    def test_black_clamps_to_one(self):
        od = optical_density(tile_from([[[0, 0, 0]]]))
        expected = -math.log10(1.0 / 255.0)
        assert od[0, 0] == pytest.approx([expected] * 3, abs=1e-12)
        assert expected == pytest.approx(2.406540180433955, abs=1e-12)

    def test_od_nonnegative_below_background(self):
        rng = np.random.default_rng(0)
        px = rng.integers(1, 256, size=(8, 8, 3), dtype=np.uint8)
        od = optical_density(tile_from(px))
        assert np.all(od >= 0.0)

    def test_bad_background_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            optical_density(tile_from([[[1, 2, 3]]]), background=(0.0, 255.0, 255.0))


class TestUnmix:
    def test_pure_second_stain(self):
        od = MATRIX.od_vectors[1].reshape(1, 1, 3)
        result = unmix(od, MATRIX)
        assert result.concentrations[0, 0] == pytest.approx([0.0, 1.0, 0.0], abs=1e-12)

    def test_zero_od_gives_zero(self):
        result = unmix(np.zeros((2, 2, 3)), MATRIX)
        assert result.concentrations == pytest.approx(np.zeros((2, 2, 3)), abs=0.0)
        assert result.clamp_fraction == 0.0

    def test_known_mixture(self):
        od = (0.5 * MATRIX.od_vectors[0] + 0.25 * MATRIX.od_vectors[2]).reshape(1, 1, 3)
        # independent check: solve the linear system directly
        expected = np.linalg.solve(MATRIX.od_vectors.T, od[0, 0])
        assert expected == pytest.approx([0.5, 0.0, 0.25], abs=1e-12)
        result = unmix(od, MATRIX)
        assert result.concentrations[0, 0] == pytest.approx(expected, abs=1e-9)

    def test_clamp_fraction_reported(self):
        od = (
            -0.2 * MATRIX.od_vectors[0]
            + 0.5 * MATRIX.od_vectors[1]
            + 0.3 * MATRIX.od_vectors[2]
        ).reshape(1, 1, 3)
        result = unmix(od, MATRIX)
        assert result.clamp_fraction == pytest.approx(1.0 / 3.0)
        assert np.all(result.concentrations >= 0.0)

    def test_roundtrip_through_rendering(self):
        # render synthetic concentrations to intensities, quantization-free,
        # then recover them through the OD + unmix path
        rng = np.random.default_rng(7)
        conc = rng.uniform(0.0, 0.8, size=(50, 40, 3))
        intensities = render(conc, MATRIX)
        od = -np.log10(np.maximum(intensities, 1.0) / 255.0)
        recovered = unmix(od, MATRIX).concentrations
        assert np.max(np.abs(recovered - conc)) < 1e-6


class TestExtractCells:
    def make_conc(self, mask, channel=1, value=1.0):
        conc = np.zeros(mask.shape + (3,), dtype=float)
        conc[:, :, channel] = np.where(mask, value, 0.0)
        return conc

    def test_all_zero_channel_is_empty(self):
        conc = np.zeros((16, 16, 3))
        cm = extract_cells(conc, MATRIX, "dab", 0.5, 0.0, 1e9, resolution_um_per_px=1.0)
        assert len(cm) == 0
        assert cm.cell_type == "dab"

    def test_square_centroid_at_geometric_center(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[3:8, 10:15] = True  # 5x5 block, rows 3..7, cols 10..14
        cm = extract_cells(
            self.make_conc(mask), MATRIX, "dab", 0.5, 0.0, 1e9,
            resolution_um_per_px=2.0, origin=(100.0, 200.0),
        )
        assert len(cm) == 1
        # pixel-centre convention: centre column 12, row 5 -> +0.5 px
        assert cm.points[0] == pytest.approx([100.0 + 12.5 * 2.0, 200.0 + 5.5 * 2.0])

    def test_min_area_filters_small_blob(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:7, 2:7] = True    # 25 px
        mask[15, 15] = True      # 1 px
        cm = extract_cells(
            self.make_conc(mask), MATRIX, "dab", 0.5,
            min_area_um2=2.0, max_area_um2=1e9, resolution_um_per_px=1.0,
        )
        assert len(cm) == 1

    def test_max_area_filters_large_blob(self):
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:7, 2:7] = True
        mask[15, 15] = True
        cm = extract_cells(
            self.make_conc(mask), MATRIX, "dab", 0.5,
            min_area_um2=0.0, max_area_um2=10.0, resolution_um_per_px=1.0,
        )
        assert len(cm) == 1

    def test_diagonal_pixels_are_one_component(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1, 1] = True
        mask[2, 2] = True  # touches only diagonally
        cm = extract_cells(
            self.make_conc(mask), MATRIX, "dab", 0.5, 0.0, 1e9, resolution_um_per_px=1.0
        )
        assert len(cm) == 1

    def test_matches_bfs_labeling_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            mask = rng.random((24, 24)) < 0.35
            cm = extract_cells(
                self.make_conc(mask), MATRIX, "dab", 0.5, 0.0, 1e9,
                resolution_um_per_px=1.0,
            )
            expected = []
            for pixels in bfs_label_8(mask):
                rows = np.array([p[0] for p in pixels], dtype=float)
                cols = np.array([p[1] for p in pixels], dtype=float)
                expected.append((cols.mean() + 0.5, rows.mean() + 0.5))
            expected.sort()
            assert len(cm) == len(expected)
            assert cm.points == pytest.approx(np.array(expected).reshape(-1, 2))

    def test_translation_equivariance(self):
        mask = np.zeros((12, 12), dtype=bool)
        mask[4:7, 2:9] = True
        conc = self.make_conc(mask)
        base = extract_cells(
            conc, MATRIX, "dab", 0.5, 0.0, 1e9, resolution_um_per_px=1.0,
            origin=(0.0, 0.0),
        )
        shifted = extract_cells(
            conc, MATRIX, "dab", 0.5, 0.0, 1e9, resolution_um_per_px=1.0,
            origin=(30.0, -10.0),
        )
        assert shifted.points - base.points == pytest.approx(
            np.tile([30.0, -10.0], (len(base), 1))
        )

    def test_threshold_is_inclusive(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        conc = self.make_conc(mask, value=0.5)
        cm = extract_cells(conc, MATRIX, "dab", 0.5, 0.0, 1e9, resolution_um_per_px=1.0)
        assert len(cm) == 1


class TestRgbTile:
    def test_shape_validation(self):
        with pytest.raises(ValueError, match=r"\(h, w, 3\)"):
            RgbTile(pixels=np.zeros((4, 4), dtype=np.uint8), resolution_um_per_px=1.0)

    def test_dtype_validation(self):
        with pytest.raises(ValueError, match="uint8"):
            RgbTile(pixels=np.zeros((4, 4, 3), dtype=float), resolution_um_per_px=1.0)

    def test_resolution_validation(self):
        with pytest.raises(ValueError, match="resolution"):
            RgbTile(pixels=np.zeros((4, 4, 3), dtype=np.uint8), resolution_um_per_px=0.0)
