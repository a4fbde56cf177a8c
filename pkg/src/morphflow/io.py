"""Readers and writers for volumes, point sets, transforms, poses and images."""
from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, InvalidArgumentError
from .grid import ColorGrid, GridGeometry, ScalarGrid, Volume
from .measure import WeightedPointSet
from .render import Camera, Image

MVR_MAGIC = b"MVR1"
WPS_MAGIC = b"WPS1"
_MVR_HEADER = struct.Struct("<4s3I6dB")
_WPS_HEADER = struct.Struct("<4sIB")


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from exc


def write_grid(path, grid) -> None:
    """Write a scalar or color grid; values are stored x-fastest as float32."""
    geo = grid.geometry
    vals = grid.values
    channels = 1 if vals.ndim == 3 else vals.shape[3]
    # memory order is (x, y, z[, c]) with z fastest; the file wants x fastest
    body = np.ascontiguousarray(vals.transpose((2, 1, 0) if channels == 1 else (2, 1, 0, 3)),
                                dtype="<f4")
    head = _MVR_HEADER.pack(MVR_MAGIC, *geo.resolution, *geo.lo, *geo.hi, channels)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(body.tobytes())


def read_grid(path):
    data = _read(path)
    if len(data) < _MVR_HEADER.size or data[:4] != MVR_MAGIC:
        raise FormatError(f"{path}: not a volume file (bad magic)")
    magic, nx, ny, nz, x0, y0, z0, x1, y1, z1, channels = _MVR_HEADER.unpack_from(data)
    if channels not in (1, 3):
        raise FormatError(f"{path}: unsupported channel count {channels}")
    count = nx * ny * nz * channels
    body = data[_MVR_HEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {count} values, found {len(body) // 4}")
    try:
        geo = GridGeometry((x0, y0, z0), (x1, y1, z1), (nx, ny, nz))
    except InvalidArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    arr = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if channels == 1:
        return ScalarGrid(geo, arr.reshape(nz, ny, nx).transpose(2, 1, 0).copy())
    return ColorGrid(geo, arr.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3).copy())


def write_volume(density_path, color_path, volume: Volume) -> None:
    write_grid(density_path, volume.density)
    write_grid(color_path, volume.color)


def read_volume(density_path, color_path) -> Volume:
    d = read_grid(density_path)
    c = read_grid(color_path)
    if not isinstance(d, ScalarGrid) or not isinstance(c, ColorGrid):
        raise FormatError(f"{density_path}/{color_path}: expected a 1-channel and a 3-channel grid")
    if d.geometry != c.geometry:
        raise FormatError(f"{density_path} and {color_path} have different geometries")
    return Volume(d, c)


def write_point_set(path, P: WeightedPointSet) -> None:
    has_colors = P.colors is not None
    cols = [P.points, P.weights[:, None]] + ([P.colors] if has_colors else [])
    body = np.ascontiguousarray(np.hstack(cols), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_WPS_HEADER.pack(WPS_MAGIC, len(P), int(has_colors)))
        fh.write(body.tobytes())


def read_point_set(path, mass=1.0) -> WeightedPointSet:
    """Weights are renormalized after the float32 round trip."""
    data = _read(path)
    if len(data) < _WPS_HEADER.size or data[:4] != WPS_MAGIC:
        raise FormatError(f"{path}: not a point-set file (bad magic)")
    _, n, has_colors = _WPS_HEADER.unpack_from(data)
    width = 7 if has_colors else 4
    body = data[_WPS_HEADER.size:]
    if len(body) != 4 * n * width:
        raise FormatError(f"{path}: truncated point-set file")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, width)
    w = arr[:, 3]
    return WeightedPointSet(arr[:, :3], w / w.sum(), arr[:, 4:7] if has_colors else None, mass)


def write_transform(path, transform) -> None:
    with open(path, "w") as fh:
        fh.write(transform.to_text())


def read_transform(path):
    from .flows import RigidTransform
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return RigidTransform.from_text(text)
    except (ValueError, InvalidArgumentError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def read_png(path) -> Image:
    """RGB in [0, 1]; an alpha channel is composited over black."""
    try:
        img = PILImage.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise FileNotFoundError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("RGBA", "LA") or "transparency" in img.info:
        arr = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
        return Image(arr[..., :3] * arr[..., 3:4])
    return Image(np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0)


def write_png(path, image) -> None:
    rgb = image.rgb if isinstance(image, Image) else np.asarray(image, dtype=float)
    u8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_poses(path):
    """Cameras and image paths from a transforms.json-style pose file.

    Image size comes from the first image referenced; ``file_path`` entries
    without an extension get ``.png``.
    """
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read pose file {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: missing camera_angle_x or frames") from exc
    root = os.path.dirname(os.path.abspath(path))
    out = []
    for fr in frames:
        rel = fr["file_path"]
        if not os.path.splitext(rel)[1]:
            rel = rel + ".png"
        img_path = os.path.normpath(os.path.join(root, rel))
        out.append((img_path, np.asarray(fr["transform_matrix"], dtype=float)))
    return angle, out


def load_views(path):
    """``(cameras, images)`` for every frame listed in a pose file."""
    angle, frames = read_poses(path)
    cams, imgs = [], []
    for img_path, m in frames:
        img = read_png(img_path)
        cams.append(Camera.from_fov(img.width, img.height, angle, m))
        imgs.append(img)
    return cams, imgs


def write_views(directory, cameras, images, camera_angle_x, prefix="r_") -> str:
    """Write PNGs plus a pose file; returns the pose-file path."""
    os.makedirs(directory, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = f"{prefix}{i:03d}"
        write_png(os.path.join(directory, name + ".png"), img)
        frames.append({"file_path": "./" + name, "transform_matrix": cam.cam_to_world.tolist()})
    path = os.path.join(directory, "transforms.json")
    with open(path, "w") as fh:
        json.dump({"camera_angle_x": float(camera_angle_x), "frames": frames}, fh, indent=2)
    return path
