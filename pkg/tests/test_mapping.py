"""Grid construction, surface prediction, exposure and export."""

import json

import numpy as np
import pytest

from noiselur._geom import polygon_contains
from noiselur.features import PredictorSpec
from noiselur.geodata import GeoLayer, load_raster
from noiselur.mapping import (ExposureTable, NoiseGrid, export_grid,
                              exposure_table, make_grid, predict_grid)
from noiselur.models import ModelSpec, fit_model


def square(x0, y0, x1, y1):
    return (np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]],
                     dtype=float),)


def boundary_layer(*rings_list):
    return GeoLayer.polygon([(rings, "") for rings in rings_list])


class TestMakeGrid:
    def test_square_100m_cell_50(self):
        grid = make_grid(boundary_layer(square(0, 0, 100, 100)), cell=50)
        assert grid.mask.shape == (2, 2)
        assert grid.mask.all()
        assert grid.origin == (0.0, 0.0)
        assert np.isnan(grid.values).all()

    def test_centroid_coordinates(self):
        grid = make_grid(boundary_layer(square(10, 20, 110, 120)), cell=50)
        xs, ys = grid.cell_centers()
        np.testing.assert_array_equal(xs, [35.0, 85.0])
        # row 0 is the top row
        np.testing.assert_array_equal(ys, [95.0, 45.0])

    def test_mask_matches_point_in_polygon(self):
        # L-shaped boundary: unit cells, some centroids outside
        ring = np.array([[0, 0], [300, 0], [300, 100], [100, 100],
                         [100, 300], [0, 300], [0, 0]], dtype=float)
        grid = make_grid(boundary_layer((ring,)), cell=50)
        xs, ys = grid.cell_centers()
        for i in range(grid.n_rows):
            for j in range(grid.n_cols):
                assert grid.mask[i, j] == polygon_contains(
                    (ring,), xs[j], ys[i])
        assert grid.mask.any() and not grid.mask.all()

    def test_hole_masks_cells(self):
        rings = (square(0, 0, 200, 200)[0], square(50, 50, 150, 150)[0])
        grid = make_grid(boundary_layer(rings), cell=50)
        assert grid.mask.shape == (4, 4)
        assert not grid.mask[1:3, 1:3].any()
        assert grid.mask[0].all() and grid.mask[3].all()

    def test_cell_larger_than_boundary(self):
        grid = make_grid(boundary_layer(square(0, 0, 30, 30)), cell=50)
        assert grid.mask.shape == (1, 1)
        assert grid.mask[0, 0]  # centroid (15, 15) is inside

    def test_degenerate_boundary(self):
        line = (np.array([[0, 0], [10, 0], [5, 0], [0, 0]], dtype=float),)
        with pytest.raises(ValueError, match="zero area"):
            make_grid(boundary_layer(line), cell=50)

    def test_bad_cell_size(self):
        with pytest.raises(ValueError, match="cell size"):
            make_grid(boundary_layer(square(0, 0, 100, 100)), cell=0)

    def test_multi_feature_union(self):
        grid = make_grid(
            boundary_layer(square(0, 0, 50, 50), square(100, 0, 150, 50)),
            cell=50)
        assert grid.mask.shape == (1, 3)
        assert list(grid.mask[0]) == [True, False, True]


def toy_world():
    """Raster plus one road; enough to feed a tiny spec list."""
    imper = GeoLayer.raster((0.0, 0.0), 25.0, np.full((8, 8), 0.4))
    road = GeoLayer.polyline(
        [(np.array([[0.0, 100.0], [200.0, 100.0]]), "motorway")])
    return {"imperviousness": imper, "roads": road}


TOY_SPECS = (
    PredictorSpec("Imp50", "buffer_raster_mean", layer="imperviousness",
                  radius=50),
    PredictorSpec("DARoad", "distance", layer="roads"),
)


def constant_model(level=60.0):
    """Boosting with zero rounds predicts the training mean everywhere."""
    X = np.array([[0.1, 5.0], [0.2, 10.0], [0.3, 15.0], [0.4, 20.0]])
    y = np.full(4, level)
    spec = ModelSpec("GBT", {"rounds": 0, "learning_rate": 0.1,
                             "max_depth": 2, "subsample": 1.0,
                             "colsample": 1.0, "reg_lambda": 1.0,
                             "reg_gamma": 0.0},
                     seed=3)
    return fit_model(spec, X, ("Imp50", "DARoad", "X", "Y")[:2], y)


class TestPredictGrid:
    def test_constant_model_uniform_surface(self):
        grid = make_grid(boundary_layer(square(0, 0, 200, 200)), cell=50,
                         city="toy")
        out = predict_grid(constant_model(60.0), grid, toy_world(),
                           TOY_SPECS)
        assert out.mask.all()
        np.testing.assert_allclose(out.values, 60.0, atol=1e-12)
        assert out.city == "toy"

    def test_rerun_bit_identical(self):
        grid = make_grid(boundary_layer(square(0, 0, 200, 200)), cell=50)
        model = constant_model(57.0)
        a = predict_grid(model, grid, toy_world(), TOY_SPECS)
        b = predict_grid(model, grid, toy_world(), TOY_SPECS, threads=3)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.mask, b.mask)

    def test_failed_cells_masked_and_logged(self, caplog):
        # raster covers [0,200]^2 only; the easternmost centroid sits
        # more than 50 m past the last cell centre and loses Imp50
        ring = np.array([[0, 0], [300, 0], [300, 50], [0, 50], [0, 0]],
                        dtype=float)
        grid = make_grid(boundary_layer((ring,)), cell=50)
        assert grid.mask.shape == (1, 6)
        with caplog.at_level("WARNING", logger="noiselur.mapping"):
            out = predict_grid(constant_model(), grid, toy_world(),
                               TOY_SPECS, max_failed=0.5)
        assert list(out.mask[0]) == [True] * 5 + [False]
        assert np.isnan(out.values[0, 5])
        assert len(out.failures) == 1
        assert "0_5" in caplog.text and "Imp50" in caplog.text

    def test_too_many_failures_abort(self):
        ring = np.array([[0, 0], [500, 0], [500, 50], [0, 50], [0, 0]],
                        dtype=float)
        grid = make_grid(boundary_layer((ring,)), cell=50)
        with pytest.raises(ValueError, match="failed feature extraction"):
            predict_grid(constant_model(), grid, toy_world(), TOY_SPECS)

    def test_matches_direct_matrix_prediction(self):
        # the grid surface is exactly model.predict at the centroids,
        # laid out row-major from the top-left cell
        rng = np.random.default_rng(5)
        X = np.column_stack([rng.uniform(0, 200, 80),
                             rng.uniform(0, 200, 80)])
        y = 40.0 + 0.05 * X[:, 0] - 0.02 * X[:, 1] + rng.normal(0, 1, 80)
        model = fit_model(
            ModelSpec("LM", {"selection_limit": 2}, seed=1),
            X, ("X", "Y"), y)
        specs = (PredictorSpec("X", "coordinate"),
                 PredictorSpec("Y", "coordinate"))
        grid = make_grid(boundary_layer(square(0, 0, 200, 200)), cell=50)
        out = predict_grid(model, grid, {}, specs)
        xs, ys = out.cell_centers()
        pts = [(xs[j], ys[i]) for i in range(4) for j in range(4)]
        direct = model.predict(np.array(pts), ("X", "Y"))
        np.testing.assert_array_equal(out.values.ravel(), direct)


def grid_with(values, mask=None, city="a", origin=(0.0, 0.0), cell=50.0):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.isfinite(values)
    return NoiseGrid(city=city, origin=origin, cell_size=cell,
                     mask=np.asarray(mask, dtype=bool), values=values)


def pop_raster(values, origin=(0.0, 0.0), cell=50.0):
    return GeoLayer.raster(origin, cell, np.asarray(values, dtype=float))


class TestExposure:
    def test_hand_computed_counts(self):
        grid = grid_with([[41.0, 46.0], [51.0, 56.0]])
        pop = pop_raster([[1.0, 2.0], [4.0, 8.0]])
        table = exposure_table(grid, pop, thresholds=(40, 45, 50, 55))
        assert table.total_population == 15.0
        assert table.total_counts == (15.0, 14.0, 12.0, 8.0)
        assert table.counts["a"] == (15.0, 14.0, 12.0, 8.0)
        assert table.total_percentage(2) == pytest.approx(80.0)

    def test_threshold_is_strict(self):
        grid = grid_with([[55.0]])
        pop = pop_raster([[10.0]])
        table = exposure_table(grid, pop, thresholds=(54.9, 55.0))
        assert table.total_counts == (10.0, 0.0)

    def test_all_sixty(self):
        grid = grid_with(np.full((3, 3), 60.0))
        pop = pop_raster(np.full((3, 3), 7.0), cell=50.0)
        table = exposure_table(grid, pop)
        k55 = table.thresholds.index(55.0)
        k65 = table.thresholds.index(65.0)
        assert table.total_percentage(k55) == 100.0
        assert table.total_percentage(k65) == 0.0

    def test_counts_non_increasing_random(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            grid = grid_with(rng.uniform(30, 80, (6, 6)))
            pop = pop_raster(rng.uniform(0, 50, (6, 6)))
            table = exposure_table(grid, pop)
            seq = table.total_counts
            assert all(seq[k] >= seq[k + 1] for k in range(len(seq) - 1))

    def test_masked_cells_carry_no_population(self):
        values = np.array([[70.0, np.nan], [70.0, 70.0]])
        grid = grid_with(values)
        pop = pop_raster([[5.0, 100.0], [5.0, 5.0]])
        table = exposure_table(grid, pop, thresholds=(40,))
        assert table.total_population == 15.0
        assert table.total_counts == (15.0,)

    def test_finer_population_raster_aggregates(self):
        # four 25 m population cells land in each 50 m grid cell
        grid = grid_with([[50.0, 70.0]], cell=50.0)
        pop = pop_raster(np.ones((2, 4)), cell=25.0)
        table = exposure_table(grid, pop, thresholds=(45, 60))
        assert table.total_population == 8.0
        assert table.counts["a"] == (8.0, 4.0)

    def test_offset_population_nearest_centroid(self):
        # single pop cell centred at (60, 10): nearest grid centroid is
        # the second column
        grid = grid_with([[30.0, 70.0]], cell=50.0)
        pop = GeoLayer.raster((50.0, 0.0), 20.0, np.array([[3.0]]))
        table = exposure_table(grid, pop, thresholds=(50,))
        assert table.populations["a"] == 3.0
        assert table.counts["a"] == (3.0,)

    def test_per_city_columns(self):
        ga = grid_with([[70.0]], city="east")
        gb = grid_with([[45.0]], city="west")
        pop = pop_raster([[10.0]])
        table = exposure_table([ga, gb], [pop, pop], thresholds=(50,))
        assert table.cities == ("east", "west")
        assert table.counts["east"] == (10.0,)
        assert table.counts["west"] == (0.0,)
        assert table.total_counts == (10.0,)
        assert table.percentage("east", 0) == 100.0
        assert table.percentage("west", 0) == 0.0
        assert table.total_percentage(0) == 50.0

    def test_zero_population_rejected(self):
        grid = grid_with([[60.0]])
        with pytest.raises(ValueError, match="zero total population"):
            exposure_table(grid, pop_raster([[0.0]]))

    def test_duplicate_city_rejected(self):
        g = grid_with([[60.0]], city="a")
        with pytest.raises(ValueError, match="duplicate city"):
            exposure_table([g, g], [pop_raster([[1.0]])] * 2)

    def test_unsorted_thresholds_rejected(self):
        grid = grid_with([[60.0]])
        with pytest.raises(ValueError, match="increase"):
            exposure_table(grid, pop_raster([[1.0]]), thresholds=(50, 40))

    def test_csv_and_json(self, tmp_path):
        ga = grid_with([[70.0]], city="east")
        gb = grid_with([[45.0]], city="west")
        pop = pop_raster([[10.0]])
        table = exposure_table([ga, gb], [pop, pop], thresholds=(50, 65))
        table.to_csv(tmp_path / "exposure.csv")
        lines = (tmp_path / "exposure.csv").read_text().strip().split("\n")
        assert lines[0] == ("threshold_db,total_count,total_percent,"
                            "east_count,east_percent,west_count,"
                            "west_percent")
        assert len(lines) == 3
        table.to_json(tmp_path / "exposure.json")
        doc = json.loads((tmp_path / "exposure.json").read_text())
        assert doc["total_population"] == 20.0
        assert doc["bands"][0]["east_percent"] == 100.0
        rebuilt = [b["total_count"] for b in doc["bands"]]
        assert rebuilt == [10.0, 10.0]


class TestExport:
    def test_ascii_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        values = rng.uniform(35, 75, (3, 4))
        values[0, 0] = np.nan
        mask = np.ones((3, 4), dtype=bool)
        mask[0, 0] = False
        grid = grid_with(values, mask=mask, origin=(100.0, 200.0))
        path = tmp_path / "surface.asc"
        export_grid(grid, path, fmt="ascii")
        layer = load_raster(path)
        assert layer.cell_size == 50.0
        assert layer.origin == (100.0, 200.0)
        np.testing.assert_allclose(layer.values[mask], values[mask],
                                   atol=1e-6)
        assert np.isnan(layer.values[0, 0])

    def test_geojson_feature_count_and_geometry(self, tmp_path):
        values = np.array([[60.0, np.nan], [50.0, 40.0]])
        grid = grid_with(values, origin=(0.0, 0.0))
        path = tmp_path / "surface.geojson"
        export_grid(grid, path, fmt="geojson")
        doc = json.loads(path.read_text())
        assert len(doc["features"]) == 3
        by_rc = {(f["properties"]["row"], f["properties"]["col"]): f
                 for f in doc["features"]}
        assert by_rc[(0, 0)]["properties"]["db"] == 60.0
        ring = by_rc[(1, 0)]["geometry"]["coordinates"][0]
        assert ring[0] == [0.0, 0.0] and ring[2] == [50.0, 50.0]
        assert ring[0] == ring[-1]

    def test_unknown_format(self, tmp_path):
        grid = grid_with([[60.0]])
        with pytest.raises(ValueError, match="unknown export format"):
            export_grid(grid, tmp_path / "x.bin", fmt="binary")


class TestNoiseGridValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            NoiseGrid(city="", origin=(0, 0), cell_size=50.0,
                      mask=np.ones((2, 2), bool), values=np.zeros((2, 3)))

    def test_infinite_prediction_rejected(self):
        vals = np.array([[np.inf]])
        with pytest.raises(ValueError, match="non-finite"):
            NoiseGrid(city="", origin=(0, 0), cell_size=50.0,
                      mask=np.ones((1, 1), bool), values=vals)
