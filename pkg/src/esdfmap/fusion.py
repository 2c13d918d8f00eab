"""Local updating: per-point signed distances against the frame's surface set,
fused into a sparse axis-aligned voxel grid by weighted running averages.

A sampled point's distance is the Euclidean distance to the nearest surface
point of the current frame, signed by whether the sample lies in front of or
behind its own pixel's surface depth.  Point weights decay exponentially with
distance magnitude so near-surface evidence dominates.  Grid cells accumulate
distance, gradient, and weight; the weight is capped so old cells remain
updatable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .sampling import KIND_SURFACE, FrameSamples


@dataclass
class FusionConfig:
    resolution: float = 0.05
    distance_decay: float = 50.0  # exponential rate of the point-weight falloff
    min_point_weight: float = 1.0e-5
    max_cell_weight: float = 10.0

    def validate(self) -> None:
        if self.resolution <= 0:
            raise ValueError("fusion.resolution must be > 0")
        if self.distance_decay <= 0:
            raise ValueError("fusion.distance_decay must be > 0")
        if not (0 < self.min_point_weight <= 1):
            raise ValueError("fusion.min_point_weight must be in (0, 1]")
        if self.max_cell_weight <= 0:
            raise ValueError("fusion.max_cell_weight must be > 0")


class SurfaceSet:
    """The current frame's sampled surface points with their normals."""

    def __init__(self, points: np.ndarray, normals: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have matching shapes")
        self._tree: cKDTree | None = None

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Index of and distance to the nearest surface point for each query."""
        if len(self) == 0:
            raise ValueError("surface set is empty")
        if self._tree is None:
            self._tree = cKDTree(self.points)
        _, idx = self._tree.query(query)
        diff = self.points[idx] - query
        return idx, np.linalg.norm(diff, axis=-1)


def capture_distances(
    points: np.ndarray,
    sample_depths: np.ndarray,
    pixel_depths: np.ndarray,
    surface: SurfaceSet,
    *,
    surface_mask: np.ndarray | None = None,
    surface_normals: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Approximate signed distance and direction for each sampled point.

    Distance magnitude is to the nearest point of ``surface``; the sign is
    positive for samples in front of their pixel's surface depth and negative
    behind it.  The direction points from the sample toward that nearest
    surface point.  Rows flagged in ``surface_mask`` are surface samples:
    their distance is 0 and their direction is the pixel's surface normal.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx, dist = surface.nearest(points)
    sign = np.sign(np.asarray(pixel_depths) - np.asarray(sample_depths))
    d = sign * dist
    diff = surface.points[idx] - points
    with np.errstate(invalid="ignore", divide="ignore"):
        g = diff / dist[:, None]
    degenerate = dist < 1e-12
    if np.any(degenerate):
        g[degenerate] = surface.normals[idx[degenerate]]
        d[degenerate] = 0.0
    if surface_mask is not None:
        if surface_normals is None:
            raise ValueError("surface_mask requires surface_normals")
        d[surface_mask] = 0.0
        g[surface_mask] = surface_normals[surface_mask]
    return d, g


def capture_distance(
    p,
    sample_depth: float,
    pixel_depth: float,
    surface: SurfaceSet,
    *,
    surface_normal: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Single-point version of :func:`capture_distances`.

    Pass ``surface_normal`` for a surface sample (depth equal to the pixel
    depth) to get the normal-replacement behavior.
    """
    is_surface = surface_normal is not None
    d, g = capture_distances(
        np.asarray(p, dtype=np.float64).reshape(1, 3),
        np.array([sample_depth]),
        np.array([pixel_depth]),
        surface,
        surface_mask=np.array([is_surface]) if is_surface else None,
        surface_normals=np.asarray(surface_normal).reshape(1, 3) if is_surface else None,
    )
    return float(d[0]), g[0]


def point_weight(d, cfg: FusionConfig):
    """Fusion weight of a sampled point: exp(-decay * |d|), floored at the minimum."""
    w = np.maximum(np.exp(-cfg.distance_decay * np.abs(d)), cfg.min_point_weight)
    return float(w) if np.isscalar(d) else w


@dataclass
class GridCell:
    distance: float = 0.0
    weight: float = 0.0
    gradient: np.ndarray = None  # raw weighted running average (not unit)
    last_frame: int = -1

    def __post_init__(self):
        if self.gradient is None:
            self.gradient = np.zeros(3)


def fuse_point(cell: GridCell, d: float, w: float, g: np.ndarray, cfg: FusionConfig) -> GridCell:
    """Fold one observation into a cell.

    The distance and gradient updates use the stored (pre-update) weight in
    the denominator; the weight itself is then incremented and capped.
    """
    denom = cell.weight + w
    new_d = (cell.weight * cell.distance + w * d) / denom
    new_g = (cell.weight * cell.gradient + w * np.asarray(g)) / denom
    new_w = min(cell.weight + w, cfg.max_cell_weight)
    return replace(cell, distance=new_d, weight=new_w, gradient=new_g)


class GridStore:
    """Sparse voxel grid over integer cell indices ``floor((p - origin) / resolution)``.

    Cells live in flat arrays; a cell exists (and belongs to the history set)
    exactly when it has received at least one observation, so stored weights
    are always positive.
    """

    def __init__(self, resolution: float = 0.05, origin=(0.0, 0.0, 0.0)):
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        self.resolution = float(resolution)
        self.origin = np.asarray(origin, dtype=np.float64)
        self._slots: dict[tuple[int, int, int], int] = {}
        cap = 1024
        self.indices = np.zeros((cap, 3), dtype=np.int64)
        self.distance = np.zeros(cap)
        self.weight = np.zeros(cap)
        self.gradient = np.zeros((cap, 3))
        self.last_frame = np.full(cap, -1, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._slots)

    @property
    def n_cells(self) -> int:
        return len(self._slots)

    def _grow(self, needed: int) -> None:
        cap = self.indices.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, cap * 2)
        self.indices = np.resize(self.indices, (new_cap, 3))
        self.distance = np.resize(self.distance, new_cap)
        self.weight = np.resize(self.weight, new_cap)
        self.gradient = np.resize(self.gradient, (new_cap, 3))
        grown = np.full(new_cap, -1, dtype=np.int64)
        grown[:cap] = self.last_frame[:cap]
        self.last_frame = grown

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((pts - self.origin) / self.resolution).astype(np.int64)

    def centers(self, slots: np.ndarray) -> np.ndarray:
        return self.origin + (self.indices[slots] + 0.5) * self.resolution

    def slot_of(self, ijk: tuple[int, int, int]) -> int | None:
        return self._slots.get(tuple(int(x) for x in ijk))

    def cell(self, ijk) -> GridCell | None:
        slot = self.slot_of(ijk)
        if slot is None:
            return None
        return GridCell(
            distance=float(self.distance[slot]),
            weight=float(self.weight[slot]),
            gradient=self.gradient[slot].copy(),
            last_frame=int(self.last_frame[slot]),
        )

    def ensure_slots(self, ijk: np.ndarray) -> np.ndarray:
        """Slot id per index row, creating missing cells in first-touch order."""
        slots = np.empty(ijk.shape[0], dtype=np.int64)
        n = len(self._slots)
        for row, key in enumerate(map(tuple, ijk.tolist())):
            slot = self._slots.get(key)
            if slot is None:
                slot = n
                self._slots[key] = slot
                n += 1
            slots[row] = slot
        self._grow(n)
        new = slots >= len(self.indices) - (len(self.indices) - n)  # placeholder, overwritten below
        self.indices[slots] = ijk
        return slots

    def unit_gradients(self, slots: np.ndarray) -> np.ndarray:
        """Stored gradients renormalized to unit length (zero stays zero)."""
        g = self.gradient[slots]
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return np.divide(g, norm, out=np.zeros_like(g), where=norm > 1e-12)

    def snapshot(self, path) -> None:
        """Dump all cells (indices, fused values, header) for debugging and oracles."""
        n = len(self)
        np.savez(
            path,
            resolution=self.resolution,
            origin=self.origin,
            indices=self.indices[:n].copy(),
            distance=self.distance[:n].copy(),
            weight=self.weight[:n].copy(),
            gradient=self.gradient[:n].copy(),
            last_frame=self.last_frame[:n].copy(),
        )


def integrate_frame(
    store: GridStore,
    samples: FrameSamples,
    surface: SurfaceSet,
    cfg: FusionConfig,
    frame_index: int = 0,
) -> np.ndarray:
    """Fuse all of a frame's sampled points into the grid.

    Points are processed in ray-major, sample-minor order; samples that share
    a cell fold in sequentially in that order.  Returns the slot ids of the
    cells touched by this frame (the frame's current set), in first-touch
    order.
    """
    cfg.validate()
    m, s = samples.depths.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    points = samples.points.reshape(-1, 3)
    depths = samples.depths.reshape(-1)
    pixel_depths = np.repeat(samples.pixel_depths, s)
    surface_mask = np.tile(samples.kinds == KIND_SURFACE, m)
    normals = np.repeat(samples.surface_normals, s, axis=0)

    d, g = capture_distances(
        points, depths, pixel_depths, surface, surface_mask=surface_mask, surface_normals=normals
    )
    w = point_weight(d, cfg)
    slots = store.ensure_slots(store.cell_index(points))

    # Sequential fusion with vectorized rounds: in round k every cell folds in
    # its (k+1)-th observation of this frame, preserving per-cell order.
    order = np.argsort(slots, kind="stable")
    sorted_slots = slots[order]
    boundaries = np.nonzero(np.diff(sorted_slots, prepend=sorted_slots[0] - 1))[0]
    group_start = np.repeat(boundaries, np.diff(np.append(boundaries, len(sorted_slots))))
    rank = np.arange(len(sorted_slots)) - group_start
    for k in range(int(rank.max()) + 1):
        sel = order[rank == k]
        cells = slots[sel]
        w_prev = store.weight[cells]
        denom = w_prev + w[sel]
        store.distance[cells] = (w_prev * store.distance[cells] + w[sel] * d[sel]) / denom
        store.gradient[cells] = (w_prev[:, None] * store.gradient[cells] + w[sel, None] * g[sel]) / denom[:, None]
        store.weight[cells] = np.minimum(w_prev + w[sel], cfg.max_cell_weight)
    current = slots[np.sort(np.unique(slots, return_index=True)[1])]
    store.last_frame[current] = frame_index
    return current
