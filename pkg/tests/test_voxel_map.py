import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vigo.errors import MapBoundsError
from vigo.voxel_map import OccupancyGrid


def make_grid(lo=(0, 0, 0), hi=(10, 10, 3), res=0.1):
    return OccupancyGrid.from_bounds(lo, hi, res)


def fine_march_oracle(occupied_fn, origin, direction, max_range, step):
    """Independent raycast: march at a fixed small step, return first hit point."""
    t = 0.0
    while t <= max_range:
        p = origin + t * direction
        if occupied_fn(p):
            return p
        t += step
    return None


class TestCoordinates:
    @given(
        st.tuples(
            st.floats(0.0, 9.99),
            st.floats(0.0, 9.99),
            st.floats(0.0, 2.99),
        )
    )
    def test_world_voxel_world_round_trip(self, p):
        grid = make_grid()
        center = grid.index_to_center(grid.world_to_index(p))
        assert np.all(np.abs(center - np.asarray(p)) < grid.resolution / 2 + 1e-12)

    def test_out_of_bounds_index(self):
        grid = make_grid()
        assert not grid.index_in_bounds(grid.world_to_index((-1, 0, 0)))[0]
        assert not grid.index_in_bounds(grid.world_to_index((10.01, 5, 1)))[0]


class TestIntegration:
    def test_single_ray_hit_and_misses(self):
        grid = make_grid()
        origin = np.array([5.0, 5.0, 1.5])
        target = origin + np.array([1.0, 0.0, 0.0])
        grid.integrate_pointcloud(origin, [target])
        assert grid.logodds[tuple(grid.world_to_index(target))] == pytest.approx(0.85)
        mid = origin + np.array([0.5, 0.0, 0.0])
        assert grid.logodds[tuple(grid.world_to_index(mid))] == pytest.approx(-0.4)

    def test_repeated_hits_saturate_at_clamp(self):
        grid = make_grid()
        origin = np.array([5.0, 5.0, 1.5])
        target = origin + np.array([1.0, 0.0, 0.0])
        for _ in range(10):
            grid.integrate_pointcloud(origin, [target])
        assert grid.logodds[tuple(grid.world_to_index(target))] == pytest.approx(grid.clamp)

    def test_origin_outside_grid_rejected(self):
        grid = make_grid()
        with pytest.raises(MapBoundsError):
            grid.integrate_pointcloud([-1.0, 5.0, 1.0], [[5.0, 5.0, 1.0]])

    def test_out_of_bounds_endpoint_truncated_as_miss(self):
        grid = make_grid()
        origin = np.array([5.0, 5.0, 1.5])
        grid.integrate_pointcloud(origin, [[15.0, 5.0, 1.5]])
        # border voxel got a miss, nothing anywhere is occupied
        edge = grid.world_to_index([9.99, 5.0, 1.5])
        assert grid.logodds[tuple(edge)] < 0
        assert len(grid.occupied_indices()) == 0

    def test_synthetic_wall_plane(self):
        # Oracle: analytic plane membership. Wall occupies x in [6.0, 6.1).
        grid = make_grid()
        origin = np.array([2.0, 5.0, 1.5])
        rng = np.random.default_rng(7)
        ys = rng.uniform(3.0, 7.0, size=400)
        zs = rng.uniform(0.5, 2.5, size=400)
        pts = np.stack([np.full(400, 6.05), ys, zs], axis=1)
        for _ in range(3):
            grid.integrate_pointcloud(origin, pts)

        wall_hits = 0
        for y, z in zip(ys[:100], zs[:100]):
            assert grid.is_occupied([6.05, y, z])
            wall_hits += 1
        assert wall_hits == 100
        # free-space points strictly between sensor and wall
        for y, z in zip(ys[:100], zs[:100]):
            t = rng.uniform(0.1, 0.9)
            p = origin + t * (np.array([6.05, y, z]) - origin)
            if abs(p[0] - 6.05) > 2 * grid.resolution:
                assert not grid.is_occupied(p)


class TestOccupancy:
    def test_fresh_grid_unoccupied(self):
        grid = make_grid()
        assert not grid.is_occupied([5.0, 5.0, 1.0])
        occ, known = grid.query_points([[5.0, 5.0, 1.0]])
        assert not occ[0] and not known[0]

    def test_five_hits_occupied_matches_accumulation_oracle(self):
        grid = make_grid()
        origin = np.array([5.0, 5.0, 1.5])
        target = origin + np.array([0.9, 0.0, 0.0])
        expected = 0.0
        for _ in range(5):
            grid.integrate_pointcloud(origin, [target])
            expected = min(expected + 0.85, 3.5)
        assert grid.logodds[tuple(grid.world_to_index(target))] == pytest.approx(expected)
        assert grid.is_occupied(target) == (expected > 0.0)
        assert grid.is_occupied(target)

    def test_out_of_bounds_reports_unoccupied_unknown(self):
        grid = make_grid()
        occ, known = grid.query_points([[50.0, 0.0, 0.0]])
        assert not occ[0] and not known[0]
        assert not grid.is_occupied([50.0, 0.0, 0.0])


class TestRaycast:
    def _wall_grid(self, x_wall=4.0):
        grid = make_grid()
        ix = grid.world_to_index([x_wall + 0.05, 0, 0])[0]
        grid.logodds[ix, :, :] = 2.0
        return grid

    def test_ray_hits_wall_at_expected_range(self):
        grid = self._wall_grid(4.0)
        origin = np.array([2.0, 5.0, 1.5])
        hit = grid.raycast(origin, np.array([1.0, 0.0, 0.0]), 8.0)
        assert hit is not None
        assert np.linalg.norm(hit - origin) == pytest.approx(2.0, abs=grid.resolution)

    def test_ray_into_empty_space(self):
        grid = make_grid()
        assert grid.raycast([5, 5, 1.5], [0, 1, 0], 3.0) is None

    def test_ray_from_inside_occupied_voxel(self):
        grid = self._wall_grid(4.0)
        origin = np.array([4.05, 5.0, 1.5])
        hit = grid.raycast(origin, np.array([1.0, 0.0, 0.0]), 5.0)
        assert np.allclose(hit, origin)

    def test_zero_direction_rejected(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            grid.raycast([5, 5, 1], [0, 0, 0], 1.0)

    def test_random_rays_match_fine_march_oracle(self):
        rng = np.random.default_rng(3)
        grid = make_grid()
        # random box scene
        for _ in range(4):
            lo = rng.uniform([1, 1, 0.2], [8, 8, 2.0])
            sz = rng.uniform(0.4, 1.5, size=3)
            i0 = grid.world_to_index(lo)
            i1 = np.minimum(grid.world_to_index(lo + sz) + 1, grid.dims)
            grid.logodds[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = 2.0

        diag = np.sqrt(3) * grid.resolution
        checked = 0
        for _ in range(200):
            origin = rng.uniform([0.5, 0.5, 0.3], [9.5, 9.5, 2.7])
            if grid.is_occupied(origin):
                continue
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            hit = grid.raycast(origin, d, 6.0)
            oracle = fine_march_oracle(grid.is_occupied, origin, d, 6.0, grid.resolution / 10)
            if oracle is None:
                assert hit is None
            else:
                assert hit is not None
                assert np.linalg.norm(hit - oracle) < diag
            checked += 1
        assert checked > 100

    def test_raycast_hit_is_occupied(self):
        rng = np.random.default_rng(11)
        grid = self._wall_grid(5.0)
        for _ in range(50):
            origin = np.array([rng.uniform(1, 3), rng.uniform(2, 8), rng.uniform(0.5, 2.5)])
            d = np.array([1.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1)])
            d /= np.linalg.norm(d)
            hit = grid.raycast(origin, d, 8.0)
            if hit is not None:
                assert grid.is_occupied(hit + 1e-6 * d)


class _Box:
    def __init__(self, center, size):
        self.center = np.asarray(center, dtype=float)
        self.size = np.asarray(size, dtype=float)


class TestClearDynamicRegions:
    def test_swept_corridor_cleared(self):
        grid = make_grid()
        history = [_Box([2.0 + 0.5 * i, 5.0, 1.0], [1.0, 1.0, 2.0]) for i in range(8)]
        for box in history:
            i0 = grid.world_to_index(box.center - box.size / 2)
            i1 = grid.world_to_index(box.center + box.size / 2) + 1
            grid.logodds[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = 2.0
        n = grid.clear_dynamic_regions([history])
        assert n > 0
        for box in history:
            assert not grid.is_occupied(box.center)

    def test_empty_history(self):
        grid = make_grid()
        assert grid.clear_dynamic_regions([]) == 0

    def test_idempotent(self):
        grid = make_grid()
        history = [_Box([5.0, 5.0, 1.0], [1.0, 1.0, 2.0])]
        n1 = grid.clear_dynamic_regions([history])
        lo1 = grid.logodds.copy()
        n2 = grid.clear_dynamic_regions([history])
        assert n1 == n2
        assert np.array_equal(lo1, grid.logodds)

    def test_wall_overlap_cleared_then_remarked(self):
        # Oracle: two-step simulation with an analytic scene. A wall voxel
        # swept by an obstacle history is cleared, then re-marked occupied by
        # the next pointcloud integration.
        grid = make_grid()
        origin = np.array([2.0, 5.0, 1.5])
        wall_pt = np.array([6.05, 5.0, 1.5])
        for _ in range(5):
            grid.integrate_pointcloud(origin, [wall_pt])
        assert grid.is_occupied(wall_pt)

        history = [_Box([6.0, 5.0, 1.5], [0.6, 0.6, 1.0])]
        grid.clear_dynamic_regions([history])
        assert not grid.is_occupied(wall_pt)

        # next integration: a frame scan puts many returns in the voxel
        frame = wall_pt + np.random.default_rng(0).uniform(-0.04, 0.04, size=(12, 3))
        grid.integrate_pointcloud(origin, frame)
        assert grid.is_occupied(wall_pt)


class TestSnapshotAndSerialization:
    def test_snapshot_immutable(self):
        grid = make_grid()
        snap = grid.snapshot()
        with pytest.raises(ValueError):
            snap.integrate_pointcloud([5, 5, 1], [[6, 5, 1]])
        with pytest.raises(Exception):
            snap.logodds[0, 0, 0] = 1.0

    def test_snapshot_isolated_from_writer(self):
        grid = make_grid()
        snap = grid.snapshot()
        grid.integrate_pointcloud([5, 5, 1.5], [[6, 5, 1.5]])
        assert snap.logodds.max() == 0.0

    def test_save_load_round_trip(self, tmp_path):
        grid = make_grid()
        grid.integrate_pointcloud([5, 5, 1.5], [[6, 5, 1.5], [7, 6, 2.0]])
        path = tmp_path / "map.vgrd"
        grid.save(path)
        loaded = OccupancyGrid.load(path, origin=grid.origin)
        assert loaded.dims == grid.dims
        assert loaded.resolution == pytest.approx(grid.resolution)
        assert np.array_equal(loaded.logodds, grid.logodds)

    def test_load_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vgrd"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(ValueError):
            OccupancyGrid.load(path)
