"""On-disk posed-depth dataset format.

Layout::

    <root>/meta.json          intrinsics, image size, depth scale, clip range
    <root>/poses.txt          per frame: index then 16 row-major floats (world-from-camera)
    <root>/frames/NNNNNN.pgm  16-bit big-endian PGM, value * depth_scale = meters, 0 = invalid

Depth values quantize to ``depth_scale`` meters per unit, so save -> load ->
save is bit exact.  Stored values that fall outside the open (near, far) clip
interval are treated as invalid on load.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .scene import CameraModel, DepthFrame, check_pose

DEFAULT_DEPTH_SCALE = 2.0e-4  # meters per stored unit (~0.2 mm, 13 m range)


class DatasetError(RuntimeError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file and rename so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_pgm16(path, values: np.ndarray) -> None:
    """Write a uint16 array as a binary big-endian PGM (maxval 65535)."""
    values = np.asarray(values)
    if values.dtype != np.uint16 or values.ndim != 2:
        raise ValueError("expected a 2D uint16 array")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment runs to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if len(fields) < 4 or fields[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    width, height, maxval = (int(x) for x in fields[1:4])
    if maxval != 65535:
        raise DatasetError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos : pos + width * height * 2]
    if len(raw) != width * height * 2:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.uint16)


def quantize_depth(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    """Depth in meters (NaN = invalid) to stored uint16 units."""
    units = np.where(np.isfinite(depth), np.round(depth / depth_scale), 0.0)
    return np.clip(units, 0, 65535).astype(np.uint16)


def frame_name(index: int) -> str:
    return f"{index:06d}.pgm"


def save_dataset(root, frames, camera: CameraModel, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    """Materialize frames to the dataset directory format."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    meta = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
        "depth_scale": depth_scale,
        "near": camera.near,
        "far": camera.far,
    }
    atomic_write_text(root / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    lines = []
    for frame in frames:
        write_pgm16(root / "frames" / frame_name(frame.index), quantize_depth(frame.depth, depth_scale))
        flat = " ".join(repr(float(x)) for x in frame.pose_wc.reshape(-1))
        lines.append(f"{frame.index} {flat}")
    atomic_write_text(root / "poses.txt", "\n".join(lines) + "\n")


def _load_meta(root: Path) -> tuple[CameraModel, float]:
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    try:
        camera = CameraModel(
            fx=float(meta["fx"]),
            fy=float(meta["fy"]),
            cx=float(meta["cx"]),
            cy=float(meta["cy"]),
            width=int(meta["width"]),
            height=int(meta["height"]),
            near=float(meta["near"]),
            far=float(meta["far"]),
        )
        scale = float(meta["depth_scale"])
    except KeyError as exc:
        raise DatasetError(f"{meta_path}: missing key {exc}") from exc
    if scale <= 0:
        raise DatasetError(f"{meta_path}: depth_scale must be positive")
    return camera, scale


def load_dataset(root) -> Iterator[DepthFrame]:
    """Yield frames in index order, validating poses and depth images."""
    root = Path(root)
    camera, scale = _load_meta(root)
    poses_path = root / "poses.txt"
    if not poses_path.exists():
        raise DatasetError(f"missing {poses_path}")
    poses: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(poses_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 17:
            raise DatasetError(f"{poses_path}:{lineno}: expected index + 16 floats")
        poses[int(parts[0])] = np.array([float(x) for x in parts[1:]]).reshape(4, 4)

    frame_files = sorted((root / "frames").glob("*.pgm"))
    if not frame_files:
        raise DatasetError(f"no frames under {root / 'frames'}")
    for path in frame_files:
        index = int(path.stem)
        if index not in poses:
            raise DatasetError(f"{path.name}: no pose entry for frame {index}")
        pose = poses[index]
        try:
            check_pose(pose)
        except ValueError as exc:
            raise DatasetError(f"{path.name}: bad pose: {exc}") from exc
        try:
            units = read_pgm16(path)
        except OSError as exc:
            raise DatasetError(f"{path.name}: unreadable: {exc}") from exc
        if units.shape != (camera.height, camera.width):
            raise DatasetError(f"{path.name}: size {units.shape} does not match meta")
        depth = units.astype(np.float64) * scale
        depth[(depth <= camera.near) | (depth >= camera.far)] = np.nan
        yield DepthFrame(depth, pose, camera, index=index)
