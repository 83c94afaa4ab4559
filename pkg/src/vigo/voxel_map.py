"""Static 3D occupancy grid with log-odds fusion.

The grid is the collision authority for the planner: it integrates depth
point clouds with per-ray hit/miss updates, answers point and ray occupancy
queries, and can wipe the voxels a tracked moving object swept through.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MapBoundsError

# Log-odds update defaults: hit +0.85, miss -0.4, occupied when > 0,
# clamped to +/-3.5 so single observations stay reversible.
HIT_LOGODDS = 0.85
MISS_LOGODDS = 0.4
OCC_THRESHOLD = 0.0
LOGODDS_CLAMP = 3.5

_MAP_MAGIC = b"VGRD"
_MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHHHHf")  # magic, version, nx, ny, nz, resolution


@dataclass
class OccupancyGrid:
    """Axis-aligned voxel grid storing per-voxel occupancy log-odds.

    A voxel is occupied when its log-odds exceeds ``occ_threshold``. Voxels
    never touched by an update are "unknown": reported free but flagged via
    :meth:`query_points` so callers can tell traversed-unknown from observed
    free space.
    """

    origin: np.ndarray
    resolution: float
    dims: tuple[int, int, int]
    hit_logodds: float = HIT_LOGODDS
    miss_logodds: float = MISS_LOGODDS
    occ_threshold: float = OCC_THRESHOLD
    clamp: float = LOGODDS_CLAMP
    logodds: np.ndarray = field(default=None, repr=False)
    observed: np.ndarray = field(default=None, repr=False)
    frozen: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.logodds is None:
            self.logodds = np.zeros(self.dims, dtype=np.float32)
        if self.observed is None:
            self.observed = np.zeros(self.dims, dtype=bool)

    @classmethod
    def from_bounds(cls, lo, hi, resolution, **kw):
        """Build a grid covering the box [lo, hi] at the given voxel size."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(np.ceil((hi[a] - lo[a]) / resolution)) for a in range(3))
        return cls(origin=lo, resolution=float(resolution), dims=dims, **kw)

    # -- coordinate transforms ------------------------------------------------

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.resolution

    def world_to_index(self, p) -> np.ndarray:
        """Voxel index of a world point (may be out of bounds)."""
        return np.floor((np.asarray(p) - self.origin) / self.resolution).astype(np.int64)

    def index_to_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def index_in_bounds(self, idx) -> np.ndarray:
        idx = np.atleast_2d(idx)
        ok = np.ones(len(idx), dtype=bool)
        for a in range(3):
            ok &= (idx[:, a] >= 0) & (idx[:, a] < self.dims[a])
        return ok

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.origin) and np.all(p < self.upper))

    # -- queries --------------------------------------------------------------

    def is_occupied(self, p) -> bool:
        """True iff p is in bounds and its voxel log-odds exceeds the threshold."""
        idx = self.world_to_index(p)
        if not self.index_in_bounds(idx)[0]:
            return False
        return bool(self.logodds[tuple(idx)] > self.occ_threshold)

    def query_points(self, points):
        """Occupancy and known-ness for an (n, 3) array of world points.

        Returns (occupied, known) boolean arrays; out-of-bounds and
        never-observed voxels are unknown and reported unoccupied.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((points - self.origin) / self.resolution).astype(np.int64)
        inb = self.index_in_bounds(idx)
        occ = np.zeros(len(points), dtype=bool)
        known = np.zeros(len(points), dtype=bool)
        if inb.any():
            ii = idx[inb]
            flat = (ii[:, 0], ii[:, 1], ii[:, 2])
            occ[inb] = self.logodds[flat] > self.occ_threshold
            known[inb] = self.observed[flat]
        return occ, known

    def occupied_indices(self):
        """Indices of all occupied voxels as an (m, 3) int array."""
        return np.argwhere(self.logodds > self.occ_threshold)

    # -- updates --------------------------------------------------------------

    def _writable(self):
        if self.frozen:
            raise ValueError("grid snapshot is read-only")

    def integrate_pointcloud(self, sensor_origin, points) -> None:
        """Fuse one depth scan: hits at endpoints, misses along each ray.

        Rays run from ``sensor_origin`` to each point. Out-of-bounds endpoints
        are truncated at the grid boundary and the truncated endpoint counts
        as a miss. Within one call a voxel hit by any ray is protected from
        miss updates (hit priority).
        """
        self._writable()
        sensor_origin = np.asarray(sensor_origin, dtype=np.float64)
        if not self.contains(sensor_origin):
            raise MapBoundsError(f"sensor origin {sensor_origin.tolist()} outside grid bounds")
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(points) == 0:
            return
        d = points - sensor_origin
        seglen = np.linalg.norm(d, axis=1)
        keep = seglen > 1e-12
        points, d = points[keep], d[keep]
        if len(points) == 0:
            return

        # Clip segments to the grid box; truncated endpoints become misses.
        t_end = np.ones(len(points))
        is_hit = np.ones(len(points), dtype=bool)
        for a in range(3):
            da = d[:, a]
            lo = self.origin[a] - sensor_origin[a]
            hi = self.upper[a] - sensor_origin[a]
            with np.errstate(divide="ignore", invalid="ignore"):
                t_lo = np.where(da != 0, lo / da, np.inf)
                t_hi = np.where(da != 0, hi / da, np.inf)
            t_exit = np.maximum(t_lo, t_hi)
            out = t_exit < t_end
            t_end = np.minimum(t_end, t_exit)
            is_hit &= ~out
        t_end = np.clip(t_end, 0.0, 1.0) * (1.0 - 1e-9)
        ends = sensor_origin + d * np.where(is_hit, 1.0, t_end)[:, None]

        miss_counts = np.zeros(self.dims, dtype=np.int32)
        hit_counts = np.zeros(self.dims, dtype=np.int32)
        self._traverse_accumulate(sensor_origin, ends, is_hit, miss_counts, hit_counts)

        hit_mask = hit_counts > 0
        delta = np.where(
            hit_mask,
            hit_counts * self.hit_logodds,
            -(miss_counts * self.miss_logodds),
        ).astype(np.float32)
        np.clip(self.logodds + delta, -self.clamp, self.clamp, out=self.logodds)
        self.observed |= hit_mask | (miss_counts > 0)

    def _traverse_accumulate(self, origin, ends, is_hit, miss_counts, hit_counts):
        """Lockstep integer traversal of all rays from one origin."""
        n = len(ends)
        res = self.resolution
        d = ends - origin
        start_idx = self.world_to_index(origin)
        end_idx = np.floor((ends - self.origin) / res).astype(np.int64)
        for a in range(3):
            np.clip(end_idx[:, a], 0, self.dims[a] - 1, out=end_idx[:, a])

        cur = np.repeat(start_idx[None, :], n, axis=0)
        step = np.sign(d).astype(np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            tdelta = np.where(d != 0, res / np.abs(d), np.inf)
            next_bound = self.origin + (cur + (step > 0)) * res
            tmax = np.where(d != 0, (next_bound - origin) / d, np.inf)

        active = np.any(cur != end_idx, axis=1)
        max_steps = sum(self.dims) + 3
        for _ in range(max_steps):
            if not active.any():
                break
            ca = cur[active]
            flat = np.ravel_multi_index((ca[:, 0], ca[:, 1], ca[:, 2]), self.dims)
            np.add.at(miss_counts.reshape(-1), flat, 1)
            axis = np.argmin(tmax[active], axis=1)
            rows = np.nonzero(active)[0]
            cur[rows, axis] += step[rows, axis]
            tmax[rows, axis] += tdelta[rows, axis]
            done = np.all(cur[rows] == end_idx[rows], axis=1)
            done |= np.min(tmax[rows], axis=1) > 1.0 + 1e-12
            active[rows[done]] = False

        ei = end_idx[is_hit]
        if len(ei):
            flat = np.ravel_multi_index((ei[:, 0], ei[:, 1], ei[:, 2]), self.dims)
            np.add.at(hit_counts.reshape(-1), flat, 1)
        ei = end_idx[~is_hit]
        if len(ei):
            flat = np.ravel_multi_index((ei[:, 0], ei[:, 1], ei[:, 2]), self.dims)
            np.add.at(miss_counts.reshape(-1), flat, 1)

    def raycast(self, origin, direction, max_range):
        """First occupied-voxel boundary crossing along a ray, or None.

        ``direction`` must be a unit vector. A ray starting inside an
        occupied voxel hits at the origin.
        """
        direction = np.asarray(direction, dtype=np.float64)
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            raise ValueError("raycast direction must be non-zero")
        if abs(norm - 1.0) > 1e-6:
            direction = direction / norm
        if max_range <= 0:
            raise ValueError("max_range must be positive")
        origin = np.asarray(origin, dtype=np.float64)

        t = 0.0
        if not self.contains(origin):
            t_entry = 0.0
            t_exit = max_range
            for a in range(3):
                if direction[a] != 0:
                    t0 = (self.origin[a] - origin[a]) / direction[a]
                    t1 = (self.upper[a] - origin[a]) / direction[a]
                    t_entry = max(t_entry, min(t0, t1))
                    t_exit = min(t_exit, max(t0, t1))
                elif not (self.origin[a] <= origin[a] < self.upper[a]):
                    return None
            if t_entry > t_exit or t_entry > max_range:
                return None
            t = t_entry + 1e-9

        idx = self.world_to_index(origin + t * direction)
        if not self.index_in_bounds(idx)[0]:
            return None
        step = np.where(direction > 0, 1, -1)
        tmax = np.full(3, np.inf)
        tdelta = np.full(3, np.inf)
        for a in range(3):
            if direction[a] != 0:
                bound = self.origin[a] + (idx[a] + (1 if direction[a] > 0 else 0)) * self.resolution
                tmax[a] = (bound - origin[a]) / direction[a]
                tdelta[a] = self.resolution / abs(direction[a])

        entry_t = t
        while entry_t <= max_range:
            if self.logodds[tuple(idx)] > self.occ_threshold:
                return origin + entry_t * direction
            a = int(np.argmin(tmax))
            entry_t = tmax[a]
            idx[a] += step[a]
            tmax[a] += tdelta[a]
            if not (0 <= idx[a] < self.dims[a]):
                return None
        return None

    def clear_dynamic_regions(self, histories) -> int:
        """Reset voxels inside historical obstacle boxes to the free minimum.

        ``histories`` is an iterable of per-track box sequences; each box
        exposes ``center`` and ``size``. Boxes are inflated by one resolution
        per side. Returns the number of voxels in the cleared union.
        """
        self._writable()
        mask = np.zeros(self.dims, dtype=bool)
        for history in histories:
            for box in history:
                c = np.asarray(box.center, dtype=np.float64)
                s = np.asarray(box.size, dtype=np.float64)
                lo = self.world_to_index(c - 0.5 * s - self.resolution)
                hi = self.world_to_index(c + 0.5 * s + self.resolution)
                lo = np.maximum(lo, 0)
                hi = np.minimum(hi + 1, self.dims)
                if np.any(lo >= hi):
                    continue
                mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        count = int(mask.sum())
        if count:
            self.logodds[mask] = -self.clamp
            self.observed |= mask
        return count

    # -- snapshots and serialization -------------------------------------------

    def snapshot(self) -> "OccupancyGrid":
        """Immutable copy safe to hand to planner/perception threads."""
        lo = self.logodds.copy()
        ob = self.observed.copy()
        lo.flags.writeable = False
        ob.flags.writeable = False
        return OccupancyGrid(
            origin=self.origin.copy(),
            resolution=self.resolution,
            dims=self.dims,
            hit_logodds=self.hit_logodds,
            miss_logodds=self.miss_logodds,
            occ_threshold=self.occ_threshold,
            clamp=self.clamp,
            logodds=lo,
            observed=ob,
            frozen=True,
        )

    def save(self, path) -> None:
        """Dump as flat binary: 16-byte VGRD header + row-major float32 log-odds."""
        header = _MAP_HEADER.pack(_MAP_MAGIC, _MAP_VERSION, *self.dims, self.resolution)
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(self.logodds, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, origin=(0.0, 0.0, 0.0)) -> "OccupancyGrid":
        with open(path, "rb") as f:
            raw = f.read(_MAP_HEADER.size)
            magic, version, nx, ny, nz, res = _MAP_HEADER.unpack(raw)
            if magic != _MAP_MAGIC:
                raise ValueError(f"bad map magic {magic!r}")
            if version != _MAP_VERSION:
                raise ValueError(f"unsupported map version {version}")
            data = np.frombuffer(f.read(4 * nx * ny * nz), dtype="<f4").reshape(nx, ny, nz)
        grid = cls(origin=np.asarray(origin, dtype=np.float64), resolution=res, dims=(nx, ny, nz))
        grid.logodds = data.astype(np.float32)
        grid.observed = np.abs(grid.logodds) > 1e-9
        return grid
