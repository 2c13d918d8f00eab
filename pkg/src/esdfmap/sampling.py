"""Active sampling: pixel allocation by block irregularity, then points along rays.

Each frame is divided into a fixed grid of blocks.  A block's irregularity is
a weighted sum of the population variances of its depth values and of its
normal-rendering values (the cosine between the view ray and the surface
normal).  The per-frame pixel budget is split across blocks proportionally to
irregularity; along each chosen ray, depths are drawn as stratified free-space
samples, Gaussian near-surface samples, and the surface depth itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import DepthFrame

KIND_STRATIFIED = 0
KIND_NEAR_SURFACE = 1
KIND_SURFACE = 2


@dataclass
class SamplingConfig:
    pixels_per_frame: int = 200
    depth_weight: float = 0.7
    normal_weight: float = 0.3
    stratified_per_ray: int = 22
    near_surface_per_ray: int = 5
    min_depth: float = 0.07
    behind_surface: float = 0.10
    surface_std: float = 0.10
    blocks: tuple[int, int] = (8, 8)
    mode: str = "irregularity"  # or "uniform" (ablation: ignore irregularity)

    def validate(self) -> None:
        if self.pixels_per_frame < 64:
            raise ValueError("sampling.pixels_per_frame must be >= 64")
        if self.depth_weight < 0 or self.normal_weight < 0:
            raise ValueError("sampling irregularity weights must be >= 0")
        if self.depth_weight == 0 and self.normal_weight == 0:
            raise ValueError("sampling irregularity weights cannot both be zero")
        if self.stratified_per_ray < 1:
            raise ValueError("sampling.stratified_per_ray must be >= 1")
        if self.near_surface_per_ray < 0:
            raise ValueError("sampling.near_surface_per_ray must be >= 0")
        if self.min_depth <= 0:
            raise ValueError("sampling.min_depth must be > 0")
        if self.behind_surface <= 0 or self.surface_std <= 0:
            raise ValueError("sampling.behind_surface and surface_std must be > 0")
        if self.mode not in ("irregularity", "uniform"):
            raise ValueError(f"unknown sampling.mode {self.mode!r}")

    @property
    def samples_per_ray(self) -> int:
        return self.stratified_per_ray + self.near_surface_per_ray + 1


@dataclass
class RaySample:
    """All samples of one pixel ray: depths, world points, and sample kinds."""

    pixel: tuple[int, int]  # (u, v)
    direction: np.ndarray  # world frame, scaled so camera z == 1
    depths: np.ndarray
    points: np.ndarray
    kinds: np.ndarray  # KIND_* codes, shared layout across rays


@dataclass
class FrameSamples:
    """Vectorized samples for all selected pixels of one frame (ray major)."""

    pixels: np.ndarray  # (M, 2) int, columns (u, v)
    directions: np.ndarray  # (M, 3)
    pixel_depths: np.ndarray  # (M,)
    depths: np.ndarray  # (M, S)
    points: np.ndarray  # (M, S, 3)
    kinds: np.ndarray  # (S,)
    surface_points: np.ndarray  # (M, 3)
    surface_normals: np.ndarray  # (M, 3) world frame, unit, facing free space

    @property
    def n_rays(self) -> int:
        return self.pixels.shape[0]

    def ray(self, i: int) -> RaySample:
        return RaySample(
            pixel=(int(self.pixels[i, 0]), int(self.pixels[i, 1])),
            direction=self.directions[i],
            depths=self.depths[i],
            points=self.points[i],
            kinds=self.kinds,
        )


def camera_points(frame: DepthFrame) -> np.ndarray:
    """Back-projected camera-frame points per pixel; NaN where depth invalid."""
    rays = frame.camera.pixel_rays()
    return frame.depth[:, :, None] * rays


def normal_render(frame: DepthFrame) -> np.ndarray:
    """Per-pixel cosine between the viewing ray and the surface normal.

    Normals come from the cross product of central finite differences of the
    back-projected depth image and are oriented to face the camera, so values
    lie in [0, 1] on valid pixels.  A pixel is invalid (NaN) if its own depth
    or any of its four neighbors' depths is invalid, including image borders.
    """
    valid = frame.valid_mask()
    if valid.sum() < 4:
        raise ValueError("frame has too few valid pixels for finite differences")
    pts = camera_points(frame)
    du = np.full_like(pts, np.nan)
    dv = np.full_like(pts, np.nan)
    du[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) / 2.0
    dv[1:-1, :] = (pts[2:, :] - pts[:-2, :]) / 2.0
    normal = np.cross(du, dv)
    norm = np.linalg.norm(normal, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = normal / norm[:, :, None]
        view = pts / np.linalg.norm(pts, axis=-1)[:, :, None]
        cos = -np.einsum("ijk,ijk->ij", view, normal)
    cos = np.where(cos < 0, -cos, cos)  # orient normals toward the camera
    ok = valid & np.isfinite(cos) & (norm > 0)
    return np.where(ok, np.clip(cos, -1.0, 1.0), np.nan)


def frame_normals(frame: DepthFrame) -> np.ndarray:
    """World-frame unit surface normals per pixel, oriented toward the camera."""
    pts = camera_points(frame)
    du = np.full_like(pts, np.nan)
    dv = np.full_like(pts, np.nan)
    du[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) / 2.0
    dv[1:-1, :] = (pts[2:, :] - pts[:-2, :]) / 2.0
    normal = np.cross(du, dv)
    with np.errstate(invalid="ignore", divide="ignore"):
        normal /= np.linalg.norm(normal, axis=-1)[:, :, None]
        flip = np.einsum("ijk,ijk->ij", pts, normal) > 0  # should face the camera
    normal[flip] *= -1.0
    return normal @ frame.rotation.T


def block_slices(height: int, width: int, blocks: tuple[int, int]) -> list[tuple[slice, slice]]:
    """Row-major block windows; the last row/column absorbs any remainder."""
    rows, cols = blocks
    bh = max(1, height // rows)
    bw = max(1, width // cols)
    out = []
    for r in range(rows):
        r0 = r * bh
        r1 = height if r == rows - 1 else (r + 1) * bh
        for c in range(cols):
            c0 = c * bw
            c1 = width if c == cols - 1 else (c + 1) * bw
            out.append((slice(r0, r1), slice(c0, c1)))
    return out


def block_irregularity(frame: DepthFrame, normals: np.ndarray, cfg: SamplingConfig) -> np.ndarray:
    """Irregularity score per block: weighted variances of depth and normal cosines.

    Population variance over the valid pixels of each block; blocks with fewer
    than two valid depth pixels score zero.
    """
    depth = frame.depth
    scores = np.zeros(cfg.blocks[0] * cfg.blocks[1])
    for b, (rs, cs) in enumerate(block_slices(depth.shape[0], depth.shape[1], cfg.blocks)):
        d = depth[rs, cs]
        d = d[np.isfinite(d)]
        if d.size < 2:
            continue
        score = cfg.depth_weight * float(np.var(d))
        n = normals[rs, cs]
        n = n[np.isfinite(n)]
        if n.size >= 2:
            score += cfg.normal_weight * float(np.var(n))
        scores[b] = score
    return scores


def allocate_counts(weights: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` into integer counts proportional to ``weights``.

    Each count is floor or ceil of its exact share (deviation < 1) and the
    counts sum to ``total`` exactly.  The leftover units go to blocks chosen by
    systematic sampling on the fractional parts, which makes the expected count
    of every block exactly proportional to its weight.
    """
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("weights must have positive sum")
    exact = total * weights / wsum
    counts = np.floor(exact).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        frac = exact - counts
        cum = np.cumsum(frac)
        cum *= leftover / cum[-1]  # guard float drift; exact sum is `leftover`
        targets = rng.uniform() + np.arange(leftover)
        chosen = np.searchsorted(cum, targets, side="left")
        counts[np.minimum(chosen, len(counts) - 1)] += 1
    return counts


def sample_pixels(
    irregularity: np.ndarray,
    usable: np.ndarray,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Choose pixel coordinates per block according to the irregularity scores.

    Returns ``(pixels, counts)`` where ``pixels`` is (M, 2) with columns
    (u, v) and ``counts`` the per-block allocation.  In uniform mode (or when
    every irregularity score is zero) all usable blocks weigh equally.  Within
    a block, pixels are drawn uniformly among usable pixels without
    replacement, falling back to replacement when the block holds fewer usable
    pixels than its allocation.
    """
    if not usable.any():
        raise ValueError("frame has no usable pixels")
    slices = block_slices(usable.shape[0], usable.shape[1], cfg.blocks)
    block_usable = np.array([int(usable[rs, cs].sum()) for rs, cs in slices])
    weights = np.asarray(irregularity, dtype=np.float64).copy()
    weights[block_usable == 0] = 0.0
    if cfg.mode == "uniform" or weights.sum() <= 0:
        weights = (block_usable > 0).astype(np.float64)
    counts = allocate_counts(weights, cfg.pixels_per_frame, rng)

    out = []
    for b, (rs, cs) in enumerate(slices):
        m = int(counts[b])
        if m == 0:
            continue
        vv, uu = np.nonzero(usable[rs, cs])
        take = rng.choice(len(vv), size=m, replace=m > len(vv))
        out.append(np.stack([uu[take] + cs.start, vv[take] + rs.start], axis=1))
    pixels = np.concatenate(out, axis=0) if out else np.zeros((0, 2), dtype=np.int64)
    return pixels, counts


def _draw_depths(
    surf: np.ndarray, cfg: SamplingConfig, rng: np.random.Generator
) -> np.ndarray:
    """Sample depths for each surface depth in ``surf``; shape (M, S)."""
    m = surf.shape[0]
    upper = surf + cfg.behind_surface
    if np.any(upper <= cfg.min_depth):
        raise ValueError("surface too close: sampling interval collapses below min_depth")
    nf = cfg.stratified_per_ray
    h = (upper - cfg.min_depth) / nf
    strat = cfg.min_depth + (np.arange(nf) + rng.uniform(size=(m, nf))) * h[:, None]
    near = rng.normal(loc=surf[:, None], scale=cfg.surface_std, size=(m, cfg.near_surface_per_ray))
    near = np.clip(near, cfg.min_depth, upper[:, None])
    return np.concatenate([strat, near, surf[:, None]], axis=1)


def sample_kinds(cfg: SamplingConfig) -> np.ndarray:
    return np.concatenate(
        [
            np.full(cfg.stratified_per_ray, KIND_STRATIFIED, dtype=np.int8),
            np.full(cfg.near_surface_per_ray, KIND_NEAR_SURFACE, dtype=np.int8),
            np.array([KIND_SURFACE], dtype=np.int8),
        ]
    )


def sample_points(
    pixel: tuple[int, int],
    frame: DepthFrame,
    cfg: SamplingConfig,
    rng: np.random.Generator,
) -> RaySample:
    """Sample one pixel's ray; see ``FrameSamples`` for the batched variant."""
    u, v = int(pixel[0]), int(pixel[1])
    d = frame.depth[v, u]
    if not np.isfinite(d) or d <= 0:
        raise ValueError(f"pixel ({u}, {v}) has no valid depth")
    direction = frame.rotation @ frame.camera.pixel_ray(u, v)
    depths = _draw_depths(np.array([d]), cfg, rng)[0]
    points = frame.origin + depths[:, None] * direction
    return RaySample(pixel=(u, v), direction=direction, depths=depths, points=points, kinds=sample_kinds(cfg))


def sample_frame(
    frame: DepthFrame,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    *,
    normals_world: np.ndarray | None = None,
    normal_cos: np.ndarray | None = None,
) -> FrameSamples:
    """Run pixel and point sampling for a whole frame.

    Usable pixels are those with a valid depth and a valid normal (the normal
    becomes the stored gradient of the ray's surface sample, so it is required).
    """
    cfg.validate()
    if normal_cos is None:
        normal_cos = normal_render(frame)
    if normals_world is None:
        normals_world = frame_normals(frame)
    usable = frame.valid_mask() & np.isfinite(normal_cos)
    if not usable.any():
        raise ValueError("frame has no usable pixels")
    scores = block_irregularity(frame, normal_cos, cfg)
    pixels, _ = sample_pixels(scores, usable, cfg, rng)

    u = pixels[:, 0]
    v = pixels[:, 1]
    surf = frame.depth[v, u]
    rays_cam = np.stack(
        [(u - frame.camera.cx) / frame.camera.fx, (v - frame.camera.cy) / frame.camera.fy, np.ones(len(u))],
        axis=1,
    )
    dirs = rays_cam @ frame.rotation.T
    depths = _draw_depths(surf, cfg, rng)
    points = frame.origin + depths[:, :, None] * dirs[:, None, :]
    return FrameSamples(
        pixels=pixels,
        directions=dirs,
        pixel_depths=surf,
        depths=depths,
        points=points,
        kinds=sample_kinds(cfg),
        surface_points=frame.origin + surf[:, None] * dirs,
        surface_normals=normals_world[v, u],
    )
