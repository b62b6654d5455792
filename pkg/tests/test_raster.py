"""Raster representation, I/O, tiling, synthesis, and normalization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terrafill.raster import (
    GridFormatError,
    GridGeometryError,
    GridTile,
    NormStats,
    denormalize,
    downsample_mean,
    grid_to_points,
    load_ascii_grid,
    load_points_csv,
    mosaic,
    normalize,
    rasterize_points,
    save_ascii_grid,
    save_points_csv,
    sparsity,
    synth_terrain,
    tile,
    SparsePoints,
    empty_grid,
)


def make_tile(values, valid=None, cell_size=30.0, origin=(0.0, 0.0)):
    values = np.asarray(values, dtype=np.float64)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    return GridTile(values, np.asarray(valid, dtype=bool), cell_size, origin)


@st.composite
def tiles(draw, max_side=12):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    vals = draw(
        st.lists(
            st.floats(-5000, 5000, allow_nan=False, width=64),
            min_size=w * h,
            max_size=w * h,
        )
    )
    mask = draw(st.lists(st.booleans(), min_size=w * h, max_size=w * h))
    cs = draw(st.floats(0.5, 100, allow_nan=False))
    ox = draw(st.floats(-1e5, 1e5, allow_nan=False))
    oy = draw(st.floats(-1e5, 1e5, allow_nan=False))
    return GridTile(
        np.array(vals).reshape(h, w),
        np.array(mask).reshape(h, w),
        cs,
        (ox, oy),
    )


class TestGridTile:
    def test_invalid_cells_hold_sentinel(self):
        t = make_tile([[1.0, 2.0]], valid=[[True, False]])
        assert t.values[0, 1] == t.nodata

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            GridTile(np.zeros((2, 2)), np.ones((2, 3), dtype=bool), 30.0)

    def test_nonpositive_cell_size_rejected(self):
        with pytest.raises(ValueError):
            make_tile([[1.0]], cell_size=0.0)

    @given(tiles())
    @settings(max_examples=30, deadline=None)
    def test_sentinel_invariant_holds(self, t):
        assert np.all(t.values[~t.valid] == t.nodata)


class TestAsciiGridIO:
    def test_parse_2x2(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 30\n"
            "NODATA_value -9999\n1 2\n3 4\n"
        )
        t = load_ascii_grid(p)
        assert (t.width, t.height, t.cell_size) == (2, 2, 30.0)
        assert t.valid.all()
        np.testing.assert_array_equal(t.values, [[1, 2], [3, 4]])

    def test_nodata_cell_marked_invalid(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 30\n"
            "NODATA_value -9999\n1 -9999\n"
        )
        t = load_ascii_grid(p)
        assert t.valid[0, 0] and not t.valid[0, 1]

    def test_row_length_mismatch_names_line(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 30\n"
            "NODATA_value -9999\n1 2 3\n"
        )
        with pytest.raises(GridFormatError, match="line 7"):
            load_ascii_grid(p)

    def test_non_numeric_token_names_line(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 30\n"
            "NODATA_value -9999\n1 oops\n"
        )
        with pytest.raises(GridFormatError, match="line 7"):
            load_ascii_grid(p)

    def test_missing_header_field(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("ncols 2\nnrows 1\n1 2\n")
        with pytest.raises(GridFormatError, match="xllcorner"):
            load_ascii_grid(p)

    def test_1x1_body(self, tmp_path):
        p = tmp_path / "g.asc"
        save_ascii_grid(make_tile([[5.0]]), p)
        body = p.read_text().splitlines()
        assert body[0] == "ncols 1"
        assert body[1] == "nrows 1"
        assert body[-1] == "5.0"

    def test_sentinel_emitted_for_invalid(self, tmp_path):
        p = tmp_path / "g.asc"
        save_ascii_grid(make_tile([[5.0, 6.0]], valid=[[True, False]]), p)
        assert p.read_text().splitlines()[-1] == "5.0 -9999.0"

    @given(tiles())
    @settings(max_examples=30, deadline=None)
    def test_round_trip_bit_exact(self, tmp_path_factory, t):
        p = tmp_path_factory.mktemp("rt") / "g.asc"
        save_ascii_grid(t, p)
        back = load_ascii_grid(p)
        assert back.shape == t.shape
        assert back.cell_size == t.cell_size
        assert back.origin == t.origin
        # Valid cells equal to the sentinel read back as invalid; values match
        # bit-for-bit everywhere either way.
        np.testing.assert_array_equal(back.values, t.values)
        np.testing.assert_array_equal(back.valid, t.valid & (t.values != t.nodata))


class TestPointsCsv:
    def test_three_rows_in_order(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z\n0,0,1\n10,20,2\n30,40,3\n")
        pts = load_points_csv(p)
        assert len(pts) == 3
        np.testing.assert_array_equal(pts.z, [1, 2, 3])

    def test_empty_data_section(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z\n")
        assert len(load_points_csv(p)) == 0

    def test_bad_row_names_row_1(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,z\na,b,c\n")
        with pytest.raises(GridFormatError, match="row 1"):
            load_points_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y\n1,2\n")
        with pytest.raises(GridFormatError, match="'z'"):
            load_points_csv(p)

    def test_round_trip(self, tmp_path):
        pts = SparsePoints([0.5, 1.5], [2.5, 3.5], [10.0, -3.25])
        p = tmp_path / "pts.csv"
        save_points_csv(pts, p)
        back = load_points_csv(p)
        np.testing.assert_array_equal(back.x, pts.x)
        np.testing.assert_array_equal(back.y, pts.y)
        np.testing.assert_array_equal(back.z, pts.z)


class TestRasterizePoints:
    def test_single_point_at_center(self):
        template = empty_grid(3, 3, 30.0)
        pts = SparsePoints([45.0], [45.0], [7.0])  # center of middle cell
        t, dropped = rasterize_points(pts, template)
        assert dropped == 0
        assert t.valid.sum() == 1
        assert t.values[1, 1] == 7.0

    def test_two_points_same_cell_averaged(self):
        template = empty_grid(2, 2, 30.0)
        pts = SparsePoints([5.0, 10.0], [5.0, 10.0], [10.0, 20.0])
        t, _ = rasterize_points(pts, template)
        assert t.values[1, 0] == 15.0

    def test_outside_point_dropped_and_counted(self):
        template = empty_grid(2, 2, 30.0)
        pts = SparsePoints([5.0, -100.0], [5.0, 5.0], [1.0, 2.0])
        t, dropped = rasterize_points(pts, template)
        assert dropped == 1
        assert t.valid.sum() == 1

    def test_all_points_outside_is_error(self):
        template = empty_grid(2, 2, 30.0)
        pts = SparsePoints([-100.0], [5.0], [1.0])
        with pytest.raises(ValueError):
            rasterize_points(pts, template)

    def test_grid_to_points_round_trip(self):
        t = synth_terrain(seed=3, size=9)
        pts = grid_to_points(t)
        back, dropped = rasterize_points(pts, t)
        assert dropped == 0
        np.testing.assert_allclose(back.values, t.values)
        assert back.valid.all()


class TestSparsity:
    def test_forced_arithmetic(self):
        valid = np.zeros(1024, dtype=bool)
        valid[:102] = True
        t = GridTile(np.zeros((32, 32)), valid.reshape(32, 32), 30.0)
        assert sparsity(t) == pytest.approx((1024 - 102) / 1024)

    def test_fully_valid_is_zero(self):
        assert sparsity(make_tile([[1.0, 2.0]])) == 0.0

    def test_fully_invalid_is_one(self):
        assert sparsity(make_tile([[1.0]], valid=[[False]])) == 1.0


class TestTiling:
    def test_64_tile32_no_overlap(self):
        dem = synth_terrain(seed=1, size=64)
        parts = tile(dem, 32, overlap=0.0)
        assert len(parts) == 4

    def test_64_tile32_half_overlap(self):
        dem = synth_terrain(seed=1, size=64)
        parts = tile(dem, 32, overlap=0.5)
        assert len(parts) == 9

    def test_partials_dropped(self):
        dem = synth_terrain(seed=1, size=40)
        parts = tile(dem, 32, overlap=0.0)
        assert len(parts) == 1

    def test_tile_too_large_rejected(self):
        dem = synth_terrain(seed=1, size=16)
        with pytest.raises(ValueError):
            tile(dem, 32)

    def test_tiles_carry_correct_origin(self):
        dem = synth_terrain(seed=1, size=64, cell_size=30.0, origin=(100.0, 200.0))
        parts = tile(dem, 32, overlap=0.0)
        # Row-major: first tile is the northwest corner.
        assert parts[0].origin == (100.0, 200.0 + 32 * 30.0)
        assert parts[3].origin == (100.0 + 32 * 30.0, 200.0)
        np.testing.assert_array_equal(parts[0].values, dem.values[:32, :32])

    def test_mosaic_inverts_tiling(self):
        dem = synth_terrain(seed=2, size=64)
        merged = mosaic(tile(dem, 32, overlap=0.5), blend="average")
        assert merged.shape == dem.shape
        np.testing.assert_allclose(merged.values, dem.values)


class TestMosaic:
    def test_disjoint_union(self):
        a = make_tile([[1.0]], origin=(0.0, 0.0))
        b = make_tile([[2.0]], origin=(30.0, 0.0))
        m = mosaic([a, b])
        assert m.shape == (1, 2)
        np.testing.assert_array_equal(m.values, [[1.0, 2.0]])

    @pytest.mark.parametrize("blend", ["average", "hann"])
    def test_coincident_idempotence(self, blend):
        t = synth_terrain(seed=5, size=8)
        m = mosaic([t, t.copy()], blend=blend)
        np.testing.assert_allclose(m.values, t.values)

    def test_coincident_average_symmetry(self):
        a = make_tile(np.zeros((4, 4)))
        b = make_tile(np.full((4, 4), 10.0))
        m = mosaic([a, b], blend="average")
        np.testing.assert_allclose(m.values, 5.0)

    def test_uncovered_cells_invalid(self):
        a = make_tile([[1.0]], origin=(0.0, 0.0))
        b = make_tile([[2.0]], origin=(60.0, 0.0))
        m = mosaic([a, b])
        assert not m.valid[0, 1]

    def test_misaligned_origin_rejected(self):
        a = make_tile([[1.0]], origin=(0.0, 0.0))
        b = make_tile([[2.0]], origin=(7.5, 0.0))
        with pytest.raises(GridGeometryError):
            mosaic([a, b])

    def test_mixed_cell_size_rejected(self):
        a = make_tile([[1.0]], cell_size=30.0)
        b = make_tile([[2.0]], cell_size=10.0)
        with pytest.raises(GridGeometryError):
            mosaic([a, b])

    def test_hann_blend_smooths_seam(self):
        # Two half-overlapping constant tiles: blend must interpolate between
        # plateaus without overshooting either constant.
        a = make_tile(np.zeros((8, 8)), origin=(0.0, 0.0))
        b = make_tile(np.full((8, 8), 10.0), origin=(4 * 30.0, 0.0))
        m = mosaic([a, b], blend="hann")
        assert m.values.min() >= -1e-9 and m.values.max() <= 10.0 + 1e-9
        assert (m.values[:, 4:8] > 0.0).all() and (m.values[:, 4:8] < 10.0).all()


class TestDownsample:
    def test_factor_one_identity(self):
        t = synth_terrain(seed=4, size=9)
        d = downsample_mean(t, 1)
        np.testing.assert_array_equal(d.values, t.values)

    def test_block_mean(self):
        t = make_tile([[1.0, 2.0], [3.0, 4.0]])
        d = downsample_mean(t, 2)
        assert d.shape == (1, 1)
        assert d.values[0, 0] == 2.5
        assert d.cell_size == 60.0

    def test_masked_mean(self):
        t = make_tile([[1.0, 0.0], [3.0, 4.0]], valid=[[True, False], [True, True]])
        d = downsample_mean(t, 2)
        assert d.values[0, 0] == pytest.approx(8.0 / 3.0)

    def test_all_invalid_block_stays_invalid(self):
        t = make_tile(np.zeros((2, 2)), valid=np.zeros((2, 2), dtype=bool))
        d = downsample_mean(t, 2)
        assert not d.valid[0, 0]

    def test_partial_blocks_dropped(self):
        t = synth_terrain(seed=4, size=9)
        d = downsample_mean(t, 2)
        assert d.shape == (4, 4)


class TestSynthTerrain:
    def test_same_seed_bit_identical(self):
        a = synth_terrain(seed=7, size=33)
        b = synth_terrain(seed=7, size=33)
        np.testing.assert_array_equal(a.values, b.values)

    def test_relief_rescale(self):
        t = synth_terrain(seed=7, size=33, relief=100.0)
        assert t.values.min() == pytest.approx(0.0, abs=1e-6)
        assert t.values.max() == pytest.approx(100.0, abs=1e-6)

    def test_different_seeds_differ(self):
        a = synth_terrain(seed=1, size=17)
        b = synth_terrain(seed=2, size=17)
        assert (a.values != b.values).any()

    def test_non_power_of_two_size(self):
        t = synth_terrain(seed=1, size=20)
        assert t.shape == (20, 20)

    def test_size_below_two_rejected(self):
        with pytest.raises(ValueError):
            synth_terrain(seed=1, size=1)


class TestNormalize:
    def test_constant_tile_degenerate_std(self):
        t = make_tile(np.full((3, 3), 500.0))
        n, stats = normalize(t)
        np.testing.assert_array_equal(n.values, 0.0)
        assert stats.shift == 500.0
        assert stats.scale == 1.0

    def test_two_value_tile(self):
        t = make_tile([[0.0, 10.0]])
        n, stats = normalize(t)
        np.testing.assert_allclose(n.values, [[-1.0, 1.0]])
        assert stats.shift == 5.0
        assert stats.scale == 5.0  # population std

    def test_stats_use_valid_cells_only(self):
        t = make_tile([[0.0, 10.0, 999.0]], valid=[[True, True, False]])
        _, stats = normalize(t)
        assert stats.shift == 5.0

    def test_zero_valid_cells_rejected(self):
        t = make_tile([[1.0]], valid=[[False]])
        with pytest.raises(ValueError):
            normalize(t)

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            NormStats(shift=0.0, scale=0.0)

    @given(tiles())
    @settings(max_examples=40, deadline=None)
    def test_denormalize_inverts(self, t):
        if not t.valid.any():
            return
        n, stats = normalize(t)
        back = denormalize(n, stats)
        np.testing.assert_allclose(
            back.values[t.valid], t.values[t.valid], rtol=1e-9, atol=1e-9
        )
