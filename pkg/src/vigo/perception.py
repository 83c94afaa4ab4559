"""Dynamic obstacle detection and tracking on depth images.

Pipeline per frame: column-wise depth histogram (u-depth map), connected
band detection, vertical extent recovery by depth continuity, lifting to a
world-frame box, occupancy-map refinement, greedy association, per-axis
constant-velocity Kalman tracking, and a velocity-history continuity filter
that rejects static objects shaking under depth noise.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .voxel_map import OccupancyGrid

_UDEPTH_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])  # 4-connectivity

# constant-velocity filter noise, shared by kalman_update and PerceptionConfig
SIGMA_ACC = 3.0
SIGMA_POS = 0.1


@dataclass
class DepthImage:
    """Depth frame in meters (0 = invalid) with pinhole intrinsics and a
    camera-to-world pose (camera looks along +z, x right, y down)."""

    depths: np.ndarray  # (h, w) float32
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float32)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("intrinsics must be positive")

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    def backproject(self, rows, cols, depths):
        """World points for pixel coordinates at the given depths."""
        z = np.asarray(depths, dtype=np.float64)
        x = (np.asarray(cols) - self.cx) / self.fx * z
        y = (np.asarray(rows) - self.cy) / self.fy * z
        pc = np.stack([x, y, z], axis=-1)
        return pc @ self.pose[:3, :3].T + self.pose[:3, 3]


def intrinsics_from_fov(width: int, height: int, fov_deg: float):
    """fx, fy, cx, cy for a square-pixel camera with the given horizontal FOV."""
    fx = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return fx, fx, (width - 1) / 2.0, (height - 1) / 2.0


def save_depth(path, img: DepthImage) -> None:
    """ASCII header ``VDEPTH w h`` then row-major little-endian float32 meters."""
    with open(path, "wb") as f:
        f.write(f"VDEPTH {img.width} {img.height}\n".encode("ascii"))
        f.write(np.ascontiguousarray(img.depths, dtype="<f4").tobytes())


def load_depth(path, fx=None, fy=None, cx=None, cy=None, pose=None,
               fov_deg: float = 87.0) -> DepthImage:
    with open(path, "rb") as f:
        header = b""
        while not header.endswith(b"\n"):
            c = f.read(1)
            if not c:
                raise ValueError("truncated depth header")
            header += c
        parts = header.decode("ascii").split()
        if len(parts) != 3 or parts[0] != "VDEPTH":
            raise ValueError(f"bad depth header {header!r}")
        w, h = int(parts[1]), int(parts[2])
        depths = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    if fx is None:
        fx, fy, cx, cy = intrinsics_from_fov(w, h, fov_deg)
    return DepthImage(depths=depths.copy(), fx=fx, fy=fy, cx=cx, cy=cy,
                      pose=np.eye(4) if pose is None else pose)


# ---------------------------------------------------------------------------
# u-depth detection
# ---------------------------------------------------------------------------

@dataclass
class UDepthMap:
    """Column-wise depth histogram: counts[col, bin] of valid pixels."""

    counts: np.ndarray
    bin_size: float

    @property
    def width(self) -> int:
        return self.counts.shape[0]

    @property
    def bins(self) -> int:
        return self.counts.shape[1]


@dataclass
class UDepthBox:
    """Detected band: inclusive column and depth-bin ranges."""

    col_min: int
    col_max: int
    bin_min: int
    bin_max: int
    bin_size: float

    @property
    def depth_range(self):
        return self.bin_min * self.bin_size, (self.bin_max + 1) * self.bin_size

    @property
    def n_cols(self) -> int:
        return self.col_max - self.col_min + 1


def build_udepth(img: DepthImage, bin_size: float, max_depth: float = None) -> UDepthMap:
    """Histogram valid depths per column into bins of ``bin_size`` meters."""
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    d = img.depths
    valid = d > 0
    if max_depth is None:
        max_depth = float(d[valid].max()) if valid.any() else bin_size
    n_bins = max(1, int(np.floor(max_depth / bin_size)) + 1)
    counts = np.zeros((img.width, n_bins), dtype=np.int32)
    rows, cols = np.nonzero(valid)
    if len(cols):
        b = np.minimum((d[rows, cols] / bin_size).astype(np.int64), n_bins - 1)
        np.add.at(counts, (cols, b), 1)
    return UDepthMap(counts=counts, bin_size=bin_size)


def detect_udepth_boxes(u: UDepthMap, count_threshold: int, min_width: int):
    """Maximal 4-connected regions of high-count cells, as tight ranges;
    regions narrower than ``min_width`` columns are discarded."""
    if count_threshold <= 0 or min_width <= 0:
        raise ValueError("thresholds must be positive")
    mask = u.counts >= count_threshold
    labels, n = ndimage.label(mask, structure=_UDEPTH_STRUCTURE)
    boxes = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        cmin, cmax = sl[0].start, sl[0].stop - 1
        if cmax - cmin + 1 < min_width:
            continue
        boxes.append(UDepthBox(cmin, cmax, sl[1].start, sl[1].stop - 1, u.bin_size))
    return boxes


@dataclass
class BoundingBox3D:
    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.maximum(np.asarray(self.size, dtype=np.float64), 1e-6)


def lift_to_3d(img: DepthImage, boxes) -> list[BoundingBox3D]:
    """World-frame boxes from u-depth bands via depth-continuity row scan.

    Pixels inside a band's columns whose depth falls within the band's depth
    range (one bin of tolerance) support the box; their back-projections are
    hulled into an axis-aligned box. Bands with no support are skipped.
    """
    out = []
    d = img.depths
    for box in boxes:
        lo, hi = box.depth_range
        lo -= box.bin_size
        hi += box.bin_size
        # scan one box-width beyond the band: foreshortened side faces land
        # in neighboring columns at in-band depths
        c0 = max(0, box.col_min - box.n_cols)
        c1 = min(img.width, box.col_max + 1 + box.n_cols)
        sub = d[:, c0:c1]
        rows, cols = np.nonzero((sub > 0) & (sub >= lo) & (sub < hi))
        if len(rows) == 0:
            continue
        cols = cols + c0
        pts = img.backproject(rows, cols, d[rows, cols])
        pmin, pmax = pts.min(axis=0), pts.max(axis=0)
        out.append(BoundingBox3D(center=0.5 * (pmin + pmax), size=pmax - pmin))
    return out


def refine_with_map(box: BoundingBox3D, grid: OccupancyGrid, inflate: float = 1.5):
    """Tight hull of occupied voxels inside the inflated box.

    Returns (box, refined). Without any occupied voxel the input box comes
    back unchanged and ``refined`` is False (low confidence).
    """
    if inflate < 1:
        raise ValueError("inflate must be >= 1")
    half = 0.5 * box.size * inflate
    lo = np.maximum(grid.world_to_index(box.center - half), 0)
    hi = np.minimum(grid.world_to_index(box.center + half) + 1, grid.dims)
    if np.any(lo >= hi):
        return box, False
    region = grid.logodds[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    occ = np.argwhere(region > grid.occ_threshold)
    if len(occ) == 0:
        return box, False
    imin = occ.min(axis=0) + lo
    imax = occ.max(axis=0) + lo
    pmin = grid.origin + imin * grid.resolution
    pmax = grid.origin + (imax + 1) * grid.resolution
    return BoundingBox3D(center=0.5 * (pmin + pmax), size=pmax - pmin), True


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------

@dataclass
class TrackSnapshot:
    t: float
    position: np.ndarray
    velocity: np.ndarray
    box: BoundingBox3D


@dataclass
class DynamicObstacle:
    """One tracked object: constant-velocity state per axis plus size."""

    id: int
    position: np.ndarray
    velocity: np.ndarray
    size: np.ndarray
    state_cov: np.ndarray = None  # 2x2 (position, velocity), shared per axis
    history: deque = None
    missed_frames: int = 0
    consecutive_hits: int = 1
    confirmed: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if self.state_cov is None:
            self.state_cov = np.diag([0.25, 4.0])  # vague velocity prior
        if self.history is None:
            self.history = deque(maxlen=120)


def kalman_update(track: DynamicObstacle, detection, dt: float,
                  sigma_acc: float = SIGMA_ACC, sigma_pos: float = SIGMA_POS,
                  size_alpha: float = 0.3, t: float = 0.0) -> DynamicObstacle:
    """Constant-velocity predict/correct per axis; the same 2x2 covariance
    serves all three axes. A missing or non-finite detection coasts the
    track (predict only) and bumps ``missed_frames``. Size follows an
    exponential moving average. History gets one snapshot per call."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    F = np.array([[1.0, dt], [0.0, 1.0]])
    q = sigma_acc**2
    Q = q * np.array([[dt**4 / 4.0, dt**3 / 2.0], [dt**3 / 2.0, dt**2]])
    # predict
    track.position = track.position + dt * track.velocity
    P = F @ track.state_cov @ F.T + Q

    measured = detection is not None and np.all(np.isfinite(detection.center))
    if measured:
        R = sigma_pos**2
        S = P[0, 0] + R
        K = P[:, 0] / S  # gain for H = [1, 0]
        innov = detection.center - track.position
        track.position = track.position + K[0] * innov
        track.velocity = track.velocity + K[1] * innov
        P = P - np.outer(K, P[0, :])
        track.size = size_alpha * detection.size + (1.0 - size_alpha) * track.size
        track.missed_frames = 0
        track.consecutive_hits += 1
    else:
        track.missed_frames += 1
        track.consecutive_hits = 0
    track.state_cov = P
    box = BoundingBox3D(center=track.position.copy(), size=track.size.copy())
    track.history.append(TrackSnapshot(t=t, position=track.position.copy(),
                                       velocity=track.velocity.copy(), box=box))
    return track


def associate(tracks, detections, gate: float):
    """Greedy nearest-neighbor matching on predicted-center distance.

    Pairs over the gate are never matched. Ties break on lower track id,
    then lower detection index. Returns (matches, unmatched_track_indices,
    unmatched_detection_indices) with matches as (track_index, det_index).
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    cand = []
    for ti, tr in enumerate(tracks):
        for di, det in enumerate(detections):
            dist = float(np.linalg.norm(tr.position - det.center))
            if dist <= gate:
                cand.append((dist, tr.id, di, ti))
    cand.sort()
    matches = []
    used_t, used_d = set(), set()
    for _, _, di, ti in cand:
        if ti in used_t or di in used_d:
            continue
        matches.append((ti, di))
        used_t.add(ti)
        used_d.add(di)
    un_t = [i for i in range(len(tracks)) if i not in used_t]
    un_d = [i for i in range(len(detections)) if i not in used_d]
    return matches, un_t, un_d


def continuity_filter(track: DynamicObstacle, window: int = 10,
                      v_min: float = 0.3, reversal_ratio: float = 0.3) -> bool:
    """Dynamic iff mean speed over the window clears ``v_min`` and the
    horizontal velocity does not flip direction in more than
    ``reversal_ratio`` of consecutive sample pairs (shake rejection)."""
    if window < 2:
        raise ValueError("window must be >= 2")
    if len(track.history) < window:
        return False
    vels = np.array([snap.velocity for snap in list(track.history)[-window:]])
    speeds = np.linalg.norm(vels, axis=1)
    if speeds.mean() < v_min:
        return False
    hv = vels[:, :2]
    dots = np.sum(hv[:-1] * hv[1:], axis=1)
    reversals = float(np.mean(dots < 0.0))
    return reversals <= reversal_ratio


@dataclass
class PerceptionConfig:
    """Detector and tracker knobs, sized for ~1 m/s walkers."""

    bin_size: float = 0.3
    count_threshold: int = None  # None: scaled from image height
    min_width: int = None  # None: scaled from image width
    inflate: float = 1.5
    gate: float = 1.0
    v_min: float = 0.3
    window: int = 10
    reversal_ratio: float = 0.3
    sigma_acc: float = SIGMA_ACC
    sigma_pos: float = SIGMA_POS
    size_alpha: float = 0.3
    birth_frames: int = 3
    max_missed: int = 5
    max_range: float = 5.0
    max_size: float = 2.5  # larger detections are static structure, not movers
    birth_separation: float = 0.8  # no new track this close to an existing one

    def resolved_thresholds(self, width: int, height: int):
        ct = self.count_threshold
        mw = self.min_width
        if ct is None:
            ct = max(4, round(0.04 * height))
        if mw is None:
            mw = max(2, round(0.015 * width))
        return ct, mw


class ObstacleTracker:
    """Owns track state across frames; emits confirmed dynamic obstacles.

    Tracks confirm after ``birth_frames`` consecutive matches and drop after
    ``max_missed`` consecutive misses. The continuity filter gates which
    confirmed tracks count as dynamic.
    """

    def __init__(self, config: PerceptionConfig = None):
        self.config = config or PerceptionConfig()
        self.tracks: list[DynamicObstacle] = []
        self._next_id = 0
        self.csv_rows: list[tuple] = []

    def detect(self, img: DepthImage, grid: OccupancyGrid = None):
        """Depth image -> refined world-frame detection boxes."""
        cfg = self.config
        u = build_udepth(img, cfg.bin_size, max_depth=cfg.max_range)
        ct, mw = cfg.resolved_thresholds(img.width, img.height)
        uboxes = detect_udepth_boxes(u, ct, mw)
        boxes = lift_to_3d(img, uboxes)
        if grid is not None:
            boxes = [refine_with_map(b, grid, cfg.inflate)[0] for b in boxes]
        return boxes

    def update(self, detections, t: float, dt: float):
        """Associate detections, run the filters, manage birth and death.

        Returns the confirmed tracks that pass the continuity filter.
        """
        cfg = self.config
        detections = [d for d in detections if float(d.size.max()) <= cfg.max_size]
        matches, un_t, un_d = associate(self.tracks, detections, cfg.gate)
        matched_tracks = set()
        for ti, di in matches:
            kalman_update(self.tracks[ti], detections[di], dt,
                          cfg.sigma_acc, cfg.sigma_pos, cfg.size_alpha, t=t)
            matched_tracks.add(ti)
        for ti in un_t:
            kalman_update(self.tracks[ti], None, dt,
                          cfg.sigma_acc, cfg.sigma_pos, cfg.size_alpha, t=t)
        for di in un_d:
            det = detections[di]
            self.tracks.append(DynamicObstacle(
                id=self._next_id,
                position=det.center.copy(),
                velocity=np.zeros(3),
                size=det.size.copy(),
            ))
            self._next_id += 1

        self.tracks = [tr for tr in self.tracks if tr.missed_frames < cfg.max_missed]
        for tr in self.tracks:
            if not tr.confirmed and tr.consecutive_hits >= cfg.birth_frames:
                tr.confirmed = True

        dynamic = [tr for tr in self.tracks
                   if tr.confirmed and continuity_filter(
                       tr, cfg.window, cfg.v_min, cfg.reversal_ratio)]
        for tr in dynamic:
            self.csv_rows.append((t, tr.id, *tr.position, *tr.velocity, *tr.size))
        return dynamic

    def process(self, img: DepthImage, grid: OccupancyGrid, t: float, dt: float):
        """Full per-frame pipeline: detect, refine, track."""
        return self.update(self.detect(img, grid), t, dt)

    def dynamic_histories(self):
        """Recent swept boxes of dynamic tracks, for map cleaning."""
        cfg = self.config
        out = []
        for tr in self.tracks:
            if not tr.confirmed:
                continue
            if not continuity_filter(tr, cfg.window, cfg.v_min, cfg.reversal_ratio):
                continue
            out.append([snap.box for snap in tr.history])
        return out
