"""Analytic scenes with exact signed-distance oracles and a synthetic depth camera.

The signed distance convention is positive in free space and negative inside
obstacles.  A scene is a union of solid primitives; its distance field is the
pointwise minimum over the primitives.  The minimum is the exact Euclidean
signed distance wherever the solids are disjoint (and everywhere in mutual
free space); inside overlapping solids it is a conservative bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Sphere tracing stops once the field magnitude drops below this (meters).
SURFACE_TOLERANCE = 1e-4
MAX_TRACE_STEPS = 512

# Orthonormality tolerance for rigid-transform rotation blocks.
POSE_TOLERANCE = 1e-6


def _as_points(q) -> tuple[np.ndarray, bool]:
    """Coerce to an (N, 3) float64 array; report whether input was a single point."""
    arr = np.asarray(q, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(1, 3), True
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected 3D point(s), got shape {arr.shape}")
    return arr, False


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def sdf(self, q: np.ndarray) -> np.ndarray:
        return np.linalg.norm(q - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid box given by its center and half extents."""

    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]

    def sdf(self, q: np.ndarray) -> np.ndarray:
        p = np.abs(q - np.asarray(self.center)) - np.asarray(self.half_extent)
        outside = np.linalg.norm(np.maximum(p, 0.0), axis=-1)
        inside = np.minimum(p.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class HalfSpace:
    """Solid half-space; ``normal`` points into free space.

    sdf(q) = <normal, q> - offset, so the boundary plane is
    {q : <normal, q> = offset}.
    """

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if not math.isclose(float(np.linalg.norm(n)), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("half-space normal must be unit length")

    def sdf(self, q: np.ndarray) -> np.ndarray:
        return q @ np.asarray(self.normal) - self.offset


Primitive = Sphere | Box | HalfSpace


@dataclass
class Scene:
    primitives: list = field(default_factory=list)

    def sdf(self, q) -> np.ndarray | float:
        return scene_sdf(self, q)

    def bounding_box(self, margin: float = 0.0):
        """Axis-aligned bounds enclosing all bounded primitives (half-spaces ignored)."""
        los, his = [], []
        for p in self.primitives:
            if isinstance(p, Sphere):
                c = np.asarray(p.center)
                los.append(c - p.radius)
                his.append(c + p.radius)
            elif isinstance(p, Box):
                c = np.asarray(p.center)
                h = np.asarray(p.half_extent)
                los.append(c - h)
                his.append(c + h)
        if not los:
            raise ValueError("scene has no bounded primitives")
        lo = np.min(los, axis=0) - margin
        hi = np.max(his, axis=0) + margin
        return lo, hi


def scene_sdf(scene: Scene, q) -> np.ndarray | float:
    """Exact signed distance from ``q`` to the scene under the union-min rule."""
    if not scene.primitives:
        raise ValueError("scene has no primitives")
    pts, single = _as_points(q)
    vals = scene.primitives[0].sdf(pts)
    for prim in scene.primitives[1:]:
        vals = np.minimum(vals, prim.sdf(pts))
    return float(vals[0]) if single else vals


def make_room(center, size) -> list[HalfSpace]:
    """Six inward-facing half-spaces forming a rectangular room (solid walls outside)."""
    c = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    planes = []
    for axis in range(3):
        for sign in (+1.0, -1.0):
            n = np.zeros(3)
            n[axis] = -sign  # normal points back into the room
            offset = float(n @ (c + sign * half * np.eye(3)[axis]))
            planes.append(HalfSpace(tuple(n), offset))
    return planes


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; (u, v) are column/row pixel coordinates of pixel centers."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions per pixel, scaled so the z component is 1.

        With this scaling, ``origin + depth * R_wc @ ray`` lands exactly at
        camera depth ``depth``, matching how depth images are stored.
        Shape (H, W, 3).
        """
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        x = (uu - self.cx) / self.fx
        y = (vv - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def pixel_ray(self, u: int, v: int) -> np.ndarray:
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])


def check_pose(pose: np.ndarray, tol: float = POSE_TOLERANCE) -> None:
    """Raise unless ``pose`` is a 4x4 rigid transform within ``tol``."""
    pose = np.asarray(pose)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=tol):
        raise ValueError("pose rotation block is not orthonormal")
    if np.linalg.det(rot) < 0:
        raise ValueError("pose rotation block has negative determinant")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise ValueError("pose bottom row must be [0, 0, 0, 1]")


@dataclass
class DepthFrame:
    """One posed depth observation.

    ``depth`` holds camera-frame z in meters with NaN marking invalid (no hit)
    pixels; stored files use 0 for the same purpose.  ``pose_wc`` maps
    camera-frame points to world frame.
    """

    depth: np.ndarray
    pose_wc: np.ndarray
    camera: CameraModel
    index: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.pose_wc = np.asarray(self.pose_wc, dtype=np.float64)
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise ValueError("depth shape does not match camera dimensions")
        check_pose(self.pose_wc)
        valid = self.valid_mask()
        vals = self.depth[valid]
        if vals.size and (vals.min() <= self.camera.near or vals.max() >= self.camera.far):
            raise ValueError("valid depths must lie strictly between near and far clips")

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)

    @property
    def origin(self) -> np.ndarray:
        return self.pose_wc[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose_wc[:3, :3]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose with +z looking from ``eye`` toward ``target``.

    Image up (-y of the camera) is aligned with ``up`` as closely as the view
    direction allows; a fallback axis is used when they are parallel.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    y = -(up - (up @ z) * z)
    ynorm = np.linalg.norm(y)
    if ynorm < 1e-9:
        alt = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        y = -(alt - (alt @ z) * z)
        ynorm = np.linalg.norm(y)
    y /= ynorm
    x = np.cross(y, z)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = eye
    return pose


def render_depth(
    scene: Scene,
    pose_wc: np.ndarray,
    camera: CameraModel,
    *,
    surface_tol: float = SURFACE_TOLERANCE,
    max_steps: int = MAX_TRACE_STEPS,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    index: int = 0,
) -> DepthFrame:
    """Render a depth image by sphere tracing the scene field along every pixel ray.

    The recorded value is the camera-frame z coordinate of the hit point, so
    back-projecting ``depth * K^-1 [u, v, 1]`` recovers the surface.  Rays that
    leave the far clip or fail to converge get the invalid marker (NaN).
    Rendering is deterministic unless ``noise_std`` > 0, in which case Gaussian
    noise from ``rng`` is added to valid depths and the result clipped to the
    clip range.
    """
    check_pose(pose_wc)
    rays_cam = camera.pixel_rays().reshape(-1, 3)
    dirs = rays_cam @ pose_wc[:3, :3].T  # world-frame, camera-z component is 1
    origin = pose_wc[:3, 3]
    inv_norm = 1.0 / np.linalg.norm(dirs, axis=1)

    n_rays = dirs.shape[0]
    t = np.full(n_rays, camera.near, dtype=np.float64)  # camera-depth parameter
    alive = np.ones(n_rays, dtype=bool)
    hit = np.zeros(n_rays, dtype=bool)

    for _ in range(max_steps):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        pts = origin + t[idx, None] * dirs[idx]
        d = scene_sdf(scene, pts)
        now_hit = d < surface_tol
        hit[idx[now_hit]] = True
        alive[idx[now_hit]] = False
        adv = idx[~now_hit]
        t[adv] += d[~now_hit] * inv_norm[adv]
        escaped = t[adv] > camera.far
        alive[adv[escaped]] = False

    depth = np.where(hit & (t > camera.near) & (t < camera.far), t, np.nan)
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        valid = np.isfinite(depth)
        noisy = depth[valid] + rng.normal(0.0, noise_std, size=int(valid.sum()))
        eps = 1e-6
        depth[valid] = np.clip(noisy, camera.near + eps, camera.far - eps)
    return DepthFrame(depth.reshape(camera.height, camera.width), pose_wc, camera, index=index)


def generate_trajectory(
    scene: Scene,
    n_frames: int,
    policy: str = "orbit",
    *,
    target=(0.0, 0.0, 0.0),
    radius: float = 1.0,
    height: float = 1.0,
    start_deg: float = 0.0,
    sweep_deg: float = 360.0,
    bounds=None,
    rows: int = 4,
    clearance: float = 0.2,
) -> list[np.ndarray]:
    """Camera poses in free space looking at scene content.

    ``orbit`` places cameras on a horizontal circle of ``radius`` around
    ``target`` at absolute z ``height``, all looking at the target.
    ``lawnmower`` serpentines over the rectangle ``bounds`` = ((x0, y0),
    (x1, y1)) at ``height``, looking straight down.  Every returned position
    is verified to clear the scene by ``clearance`` meters.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    poses: list[np.ndarray] = []
    if policy == "orbit":
        angles = np.deg2rad(start_deg) + np.deg2rad(sweep_deg) * np.arange(n_frames) / max(n_frames, 1)
        for a in angles:
            eye = np.array([target[0] + radius * math.cos(a), target[1] + radius * math.sin(a), height])
            poses.append(look_at(eye, target))
    elif policy == "lawnmower":
        if bounds is None:
            raise ValueError("lawnmower policy requires bounds")
        (x0, y0), (x1, y1) = bounds
        per_row = max(1, math.ceil(n_frames / rows))
        xs = np.linspace(x0, x1, per_row)
        ys = np.linspace(y0, y1, rows)
        for r, y in enumerate(ys):
            row_xs = xs if r % 2 == 0 else xs[::-1]
            for x in row_xs:
                if len(poses) == n_frames:
                    break
                eye = np.array([x, y, height])
                poses.append(look_at(eye, eye + np.array([0.0, 0.0, -1.0])))
    else:
        raise ValueError(f"unknown trajectory policy: {policy!r}")
    poses = poses[:n_frames]

    positions = np.array([p[:3, 3] for p in poses])
    sd = scene_sdf(scene, positions)
    bad = np.nonzero(sd < clearance)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"camera {i} at {positions[i].tolist()} violates the free-space "
            f"clearance ({sd[i]:.3f} m < {clearance} m)"
        )
    return poses
