import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import LineString

from losprob import geo
from losprob.geo import (BaseStation, Building, Scene, SceneFormatError, StreetNetwork, TerrainGrid,
                         build_index, polygon_area, read_buildings, terrain_elevation)

from conftest import random_city


def test_empty_buildings_file(tmp_path):
    p = tmp_path / "b.json"
    p.write_text(json.dumps({"units": "meters", "features": []}))
    assert read_buildings(p) == []


def test_height_present_and_missing(tmp_path):
    p = tmp_path / "b.json"
    sq = [[0, 0], [10, 0], [10, 10], [0, 10]]
    p.write_text(json.dumps({"features": [{"polygon": sq, "height": 10}, {"polygon": sq}]}))
    a, b = read_buildings(p)
    assert a.has_height and a.height == 10
    assert not b.has_height


def test_self_intersecting_footprint_names_record(tmp_path):
    p = tmp_path / "b.json"
    ok = [[0, 0], [10, 0], [10, 10], [0, 10]]
    bow = [[0, 0], [10, 10], [10, 0], [0, 10]]
    p.write_text(json.dumps({"features": [{"polygon": ok, "height": 5}, {"polygon": bow, "height": 5}]}))
    with pytest.raises(SceneFormatError, match="feature 1"):
        read_buildings(p)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "b.json"
    p.write_text('{"features": [\n{"polygon": [[0,0],[1,0],[1,1]], }\n]}')
    with pytest.raises(SceneFormatError, match="line 2"):
        read_buildings(p)


def test_lonlat_projection_is_local_meters(tmp_path):
    p = tmp_path / "b.json"
    d = 0.001  # ~111 m of latitude
    ring = [[-100.0, 40.0], [-100.0 + d, 40.0], [-100.0 + d, 40.0 + d], [-100.0, 40.0 + d]]
    p.write_text(json.dumps({"units": "lonlat", "origin": [-100.0, 40.0],
                             "features": [{"polygon": ring, "height": 3}]}))
    (b,) = read_buildings(p)
    xy = np.array(b.footprint)
    assert xy[2, 1] == pytest.approx(111.2, abs=0.5)
    assert xy[2, 0] == pytest.approx(111.2 * np.cos(np.radians(40.0)), abs=0.5)


def test_area_orientation_independent():
    ring = [(0, 0), (4, 0), (4, 3), (0, 3)]
    assert polygon_area(ring) == -polygon_area(ring[::-1]) == 12.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=12))
def test_area_orientation_property(pts):
    assert abs(polygon_area(pts)) == pytest.approx(abs(polygon_area(pts[::-1])), abs=1e-9)


# terrain


def test_terrain_on_node_flat_and_midpoint():
    g = TerrainGrid((0.0, 0.0), 10.0, np.array([[0.0, 10.0], [0.0, 10.0]]))
    assert terrain_elevation(g, (10.0, 0.0)) == 10.0
    assert terrain_elevation(g, (5.0, 5.0)) == pytest.approx(5.0)
    flat = TerrainGrid((0.0, 0.0), 25.0, np.full((5, 5), 100.0))
    assert terrain_elevation(flat, (37.2, 81.9)) == 100.0


def test_terrain_matches_scipy_interpolator(rng):
    from scipy.interpolate import RegularGridInterpolator

    z = rng.normal(size=(7, 9))
    g = TerrainGrid((-5.0, 3.0), 2.5, z)
    xs = -5.0 + 2.5 * np.arange(9)
    ys = 3.0 + 2.5 * np.arange(7)
    ref = RegularGridInterpolator((ys, xs), z)
    pts = np.column_stack([rng.uniform(xs[0], xs[-1], 200), rng.uniform(ys[0], ys[-1], 200)])
    got = [terrain_elevation(g, p) for p in pts]
    np.testing.assert_allclose(got, ref(pts[:, ::-1]), atol=1e-12)


def test_terrain_out_of_extent_clamps_and_counts():
    g = TerrainGrid((0.0, 0.0), 10.0, np.array([[1.0, 2.0], [3.0, 4.0]]))
    before = geo.warning_counts["terrain_clamp"]
    assert terrain_elevation(g, (-50.0, -50.0)) == 1.0
    assert terrain_elevation(g, (50.0, 5.0)) == pytest.approx(3.0)
    assert geo.warning_counts["terrain_clamp"] == before + 2


# spatial index


def test_empty_index():
    idx = build_index(Scene())
    assert idx.candidates((0, 0), (100, 100)) == set()


def test_segment_crossing_one_building():
    b = Building(((10, -5), (20, -5), (20, 5), (10, 5)), 10.0)
    idx = build_index(Scene((b,)))
    assert 0 in idx.candidates((0, 0), (50, 0))


def test_index_superset_of_exact_intersections(rng):
    scene = random_city(10_000, seed=3, hilly=False)
    idx = build_index(scene)
    polys = [b.polygon() for b in scene.buildings]
    import shapely
    tree = shapely.STRtree(polys)
    for _ in range(1000):
        p0, p1 = rng.uniform(-1100, 1100, (2, 2))
        seg = LineString([p0, p1])
        exact = set(tree.query(seg, predicate="intersects").tolist())
        assert exact <= idx.candidates(p0, p1)


def test_index_axis_aligned_and_degenerate_segments():
    b = Building(((0, 0), (50, 0), (50, 50), (0, 50)), 10.0)
    idx = build_index(Scene((b,)), cell_size=50.0)
    assert 0 in idx.candidates((50, -10), (50, 100))  # along a cell edge
    assert 0 in idx.candidates((25, 25), (25, 25))  # zero-length


# round trip


def test_scene_round_trip(tmp_path):
    scene = random_city(50, seed=1)
    scene = Scene(scene.buildings, scene.terrain, StreetNetwork((((0, 0), (10, 5), (20, 0)),)),
                  (BaseStation("a", (1.5, 2.5), 25.0, 3.0), BaseStation("b", (-4, 0), 10.0)))
    geo.write_scene(tmp_path, scene)
    back = geo.load_scene_dir(tmp_path)
    assert back.buildings == scene.buildings
    assert back.streets == scene.streets
    assert back.stations == scene.stations
    np.testing.assert_array_equal(back.terrain.elevations, scene.terrain.elevations)
    assert back.terrain.origin == scene.terrain.origin


def test_station_csv_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("id,x,y,height_agl\na,0,0,25\n")
    with pytest.raises(SceneFormatError, match="ground_elevation"):
        geo.read_stations(p)
    p.write_text("id,x,y,height_agl,ground_elevation\na,0,0,25,0\na,1,1,25,0\n")
    with pytest.raises(SceneFormatError, match="duplicate"):
        geo.read_stations(p)


def test_building_arrays_match_objects():
    scene = random_city(300, seed=7)
    arr = scene.arrays
    for k, b in enumerate(scene.buildings):
        assert tuple(arr.bbox[k]) == b.bbox
        base = terrain_elevation(scene.terrain, b.centroid)
        assert arr.top[k] == pytest.approx(base + b.height, abs=1e-9)
        assert arr.blocks[k] == (b.has_height and b.height > 0)
