import numpy as np

from vigo.voxel_map import OccupancyGrid


def make_grid(lo=(0, 0, 0), hi=(10, 10, 3), res=0.1) -> OccupancyGrid:
    return OccupancyGrid.from_bounds(lo, hi, res)


def fill_box(grid: OccupancyGrid, lo, hi, logodds=2.0) -> None:
    """Mark the axis-aligned world box [lo, hi) occupied."""
    i0 = np.maximum(grid.world_to_index(lo), 0)
    i1 = np.minimum(grid.world_to_index(np.asarray(hi) - 1e-9) + 1, grid.dims)
    grid.logodds[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = logodds
    grid.observed[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = True
