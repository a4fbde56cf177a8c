"""Pinhole rays, alpha compositing and the photometric objective.

Cameras follow the Synthetic-NeRF convention: the camera looks down its local
``-z`` axis with ``+y`` up, and ``cam_to_world`` maps camera to world
coordinates. Densities go through softplus and colors through a sigmoid
after trilinear interpolation of the raw grids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgumentError
from .grid import GridGeometry, Volume

# Softplus of this raw value is ~1e-13; used wherever "no density" must be
# represented by a finite raw value.
EMPTY_DENSITY_RAW = -30.0


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p, eps=1e-4):
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def density_to_alpha(sigma, delta):
    """Opacity of a segment of length ``delta`` with activated density ``sigma``."""
    return -np.expm1(-np.asarray(sigma, dtype=float) * delta)


def alpha_to_density(alpha, delta):
    alpha = np.asarray(alpha, dtype=float)
    return -np.log1p(-alpha) / delta


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cam_to_world: np.ndarray
    principal_point: tuple = None

    def __post_init__(self):
        self.width = int(self.width)
        self.height = int(self.height)
        self.focal = float(self.focal)
        if self.width <= 0 or self.height <= 0 or self.focal <= 0:
            raise InvalidArgumentError("camera width, height and focal must be positive")
        if self.principal_point is None:
            self.principal_point = (0.5 * self.width, 0.5 * self.height)
        self.principal_point = tuple(float(v) for v in self.principal_point)
        m = np.asarray(self.cam_to_world, dtype=float)
        if m.shape == (3, 4):
            m = np.vstack([m, [0.0, 0.0, 0.0, 1.0]])
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"cam_to_world must be 4x4, got {m.shape}")
        rot = m[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise InvalidArgumentError("cam_to_world rotation block must be a proper rotation")
        self.cam_to_world = m

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, cam_to_world):
        focal = 0.5 * width / np.tan(0.5 * camera_angle_x)
        return cls(width, height, focal, cam_to_world)

    @classmethod
    def look_at(cls, eye, target, width, height, focal, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:  # looking straight along up
            right = np.cross(fwd, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, fwd)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, cam_up, -fwd, eye
        return cls(width, height, focal, m)

    @classmethod
    def orbit(cls, azimuth_deg, elevation_deg, radius, center, width, height, focal):
        """Look-at camera on a sphere around ``center`` (z-up, angles in degrees)."""
        th, ph = np.radians(azimuth_deg), np.radians(elevation_deg)
        offset = radius * np.array([np.cos(ph) * np.cos(th), np.cos(ph) * np.sin(th), np.sin(ph)])
        c = np.asarray(center, dtype=float)
        return cls.look_at(c + offset, c, width, height, focal)

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    def pixel_grid(self) -> np.ndarray:
        """All ``(col, row)`` pixel indices in row-major image order."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([cols.ravel(), rows.ravel()], axis=1)


@dataclass
class RaySampling:
    near: float
    far: float
    step: float
    stop_transmittance: float = 1e-6

    def __post_init__(self):
        if not (0.0 <= self.near < self.far):
            raise InvalidArgumentError(f"need 0 <= near < far, got {self.near}, {self.far}")
        if self.step <= 0:
            raise InvalidArgumentError(f"step must be positive, got {self.step}")

    @classmethod
    def for_geometry(cls, geometry: GridGeometry, cameras=(), step=None):
        """Bounds that enclose the box from every camera; step = half a voxel diagonal."""
        if step is None:
            step = 0.5 * float(np.linalg.norm(geometry.voxel_size))
        half = 0.5 * geometry.diagonal
        dists = [float(np.linalg.norm(c.center - geometry.center)) for c in cameras]
        if dists:
            near = max(0.0, min(dists) - half)
            far = max(dists) + half
        else:
            near, far = 0.0, 100.0 * geometry.diagonal
        return cls(near, far, step)


@dataclass
class Image:
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidArgumentError(f"image must be HxWx3, got {self.rgb.shape}")

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


def generate_rays(camera: Camera, pixels=None):
    """World-space origins and unit directions through pixel centers.

    ``pixels`` holds ``(col, row)`` indices; the ray passes through
    ``(col + 0.5, row + 0.5)``.
    """
    if pixels is None:
        pixels = camera.pixel_grid()
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    cx, cy = camera.principal_point
    d_cam = np.stack([(px[:, 0] + 0.5 - cx) / camera.focal,
                      -(px[:, 1] + 0.5 - cy) / camera.focal,
                      -np.ones(len(px))], axis=1)
    dirs = d_cam @ camera.cam_to_world[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    return origins, dirs


def generate_ray(camera: Camera, pixel):
    o, d = generate_rays(camera, [pixel])
    return o[0], d[0]


def composite(alphas, colors):
    """Front-to-back compositing of one ray; returns (color, transmittances)."""
    a = np.asarray(alphas, dtype=float).reshape(-1)
    c = np.asarray(colors, dtype=float).reshape(-1, 3) if len(a) else np.zeros((0, 3))
    if len(a) != len(c):
        raise InvalidArgumentError(f"{len(a)} alphas but {len(c)} colors")
    trans = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]]) if len(a) else np.zeros(0)
    return (trans * a) @ c if len(a) else np.zeros(3), trans


def _sample_span(geometry, origins, dirs, sampling):
    """Start parameter and sample count per ray for the part inside the box."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / dirs
        t0 = (geometry.lo - origins) * inv
        t1 = (geometry.hi - origins) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=1)
        tmin = np.maximum(tmin, sampling.near)
        tmax = np.minimum(tmax, sampling.far)
        hit = tmax > tmin
        tmin = np.where(hit, tmin, sampling.near)
        tmax = np.where(hit, tmax, sampling.near)
        k0 = np.ceil((tmin - sampling.near) / sampling.step)
        k1 = np.floor((tmax - sampling.near) / sampling.step)
    n = np.where(hit, k1 - k0 + 1, 0).clip(min=0).astype(np.int64)
    t_start = np.where(n > 0, sampling.near + k0 * sampling.step, 0.0)
    return np.ascontiguousarray(t_start), np.ascontiguousarray(n)


def render_rays(volume: Volume, origins, dirs, sampling: RaySampling) -> np.ndarray:
    geo = volume.geometry
    origins = np.ascontiguousarray(origins, dtype=float)
    dirs = np.ascontiguousarray(dirs, dtype=float)
    t_start, n = _sample_span(geo, origins, dirs, sampling)
    return kernels.render_forward(volume.density.values, volume.color.values,
                                  geo.lo, geo.inv_voxel, origins, dirs, t_start, n,
                                  float(sampling.step), float(sampling.stop_transmittance))


def render_image(volume: Volume, camera: Camera, sampling: RaySampling) -> Image:
    """Render every pixel of ``camera``; samples outside the box are empty space."""
    o, d = generate_rays(camera)
    rgb = render_rays(volume, o, d, sampling)
    return Image(np.clip(rgb, 0.0, 1.0).reshape(camera.height, camera.width, 3))


def photometric_loss(rendered, observed) -> float:
    r = np.asarray(rendered, dtype=float).reshape(-1, 3)
    o = np.asarray(observed, dtype=float).reshape(-1, 3)
    if len(r) != len(o):
        raise InvalidArgumentError(f"{len(r)} rendered rays but {len(o)} observed")
    if len(r) == 0:
        raise InvalidArgumentError("photometric loss needs at least one ray")
    return float(((r - o) ** 2).sum(axis=1).mean())


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx],
                        None if self.colors is None else self.colors[idx])


def rays_from_views(cameras, images) -> RayBatch:
    """All pixel rays of the given views with their observed colors."""
    os_, ds, cs = [], [], []
    for cam, img in zip(cameras, images):
        rgb = img.rgb if isinstance(img, Image) else np.asarray(img, dtype=float)
        if rgb.shape[:2] != (cam.height, cam.width):
            raise InvalidArgumentError(
                f"image of shape {rgb.shape[:2]} does not match camera {cam.height}x{cam.width}")
        o, d = generate_rays(cam)
        os_.append(o)
        ds.append(d)
        cs.append(rgb.reshape(-1, 3))
    return RayBatch(np.concatenate(os_), np.concatenate(ds), np.concatenate(cs))


def grad_photometric(volume: Volume, batch: RayBatch, sampling: RaySampling):
    """Photometric loss of ``batch`` and its gradient w.r.t. both raw grids.

    Returns ``(loss, rendered, grad_density, grad_color)``; gradient arrays
    have the shapes of the grid value arrays.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("ray batch must be nonempty")
    geo = volume.geometry
    origins = np.ascontiguousarray(batch.origins, dtype=float)
    dirs = np.ascontiguousarray(batch.dirs, dtype=float)
    target = np.ascontiguousarray(batch.colors, dtype=float)
    t_start, n = _sample_span(geo, origins, dirs, sampling)
    gd = np.zeros(geo.shape)
    gc = np.zeros(geo.shape + (3,))
    rgb, sq = kernels.render_backward(volume.density.values, volume.color.values,
                                      geo.lo, geo.inv_voxel, origins, dirs, t_start, n,
                                      float(sampling.step), float(sampling.stop_transmittance),
                                      target, 1.0 / len(batch), gd, gc)
    return sq / len(batch), rgb, gd, gc


def psnr(rendered, observed) -> float:
    mse = float(np.mean((np.asarray(rendered, dtype=float) - np.asarray(observed, dtype=float)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)
