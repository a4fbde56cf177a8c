"""Coarse-to-fine grid reconstruction from posed images, and procedural
toy scenes with known ground truth."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DivergenceError, InvalidArgumentError
from .grid import ColorGrid, GridGeometry, ScalarGrid, Volume, upsample
from .render import (EMPTY_DENSITY_RAW, Camera, Image, RaySampling, density_to_alpha,
                     grad_photometric, logit, rays_from_views, render_image, softplus,
                     softplus_inverse)

log = logging.getLogger(__name__)

INIT_DENSITY = 1e-2
MASK_ALPHA = 1e-4


@dataclass
class ReconConfig:
    """Two-stage optimization schedule.

    ``coarse_resolution`` counts grid nodes per axis; the fine stage has
    ``(n - 1) * fine_factor + 1`` nodes so every coarse node stays a node.
    ``step=None`` samples rays at half a voxel diagonal of each stage.
    """

    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    coarse_resolution: tuple = (48, 48, 48)
    fine_factor: int = 2
    iterations_coarse: int = 2000
    iterations_fine: int = 5000
    ray_batch_size: int = 4096
    learning_rate: float = 0.1
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    step: float = None
    occupancy_mask: bool = False
    log_every: int = 200

    def __post_init__(self):
        self.coarse_resolution = tuple(int(n) for n in np.broadcast_to(self.coarse_resolution, 3))
        if min(self.coarse_resolution) < 2:
            raise InvalidArgumentError("coarse resolution needs at least 2 nodes per axis")
        if self.fine_factor < 1 or self.ray_batch_size < 1:
            raise InvalidArgumentError("fine_factor and ray_batch_size must be positive")
        if self.iterations_coarse < 0 or self.iterations_fine < 0:
            raise InvalidArgumentError("iteration counts must be non-negative")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be positive")

    @property
    def coarse_geometry(self) -> GridGeometry:
        lo, hi = self.bbox
        return GridGeometry(tuple(lo), tuple(hi), self.coarse_resolution)


def initial_volume(geometry: GridGeometry) -> Volume:
    """Nearly empty space with mid-gray colors."""
    raw = float(softplus_inverse(INIT_DENSITY))
    return Volume(ScalarGrid.full(geometry, raw), ColorGrid.full(geometry, 0.0))


class _Adam:
    def __init__(self, n, config: ReconConfig):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.cfg = config

    def step(self, param, grad):
        c = self.cfg
        self.t += 1
        b1, b2 = c.betas
        kernels.adam_step(param, grad, self.m, self.v, c.learning_rate, b1, b2, c.adam_eps,
                          1.0 - b1 ** self.t, 1.0 - b2 ** self.t)


@dataclass
class ReconResult:
    volume: Volume
    losses: list = field(default_factory=list)
    coarse_iterations: int = 0
    elapsed: float = 0.0


def _occupancy(volume: Volume, step) -> np.ndarray:
    """Nodes whose opacity, or that of a face neighbour, reaches MASK_ALPHA."""
    occ = density_to_alpha(softplus(volume.density.values), step) >= MASK_ALPHA
    grown = occ.copy()
    for ax in range(3):
        grown |= np.roll(occ, 1, ax) | np.roll(occ, -1, ax)
    return grown


def _run_stage(volume, rays, cameras, config, iterations, rng, losses, first_it, mask=None):
    sampling = RaySampling.for_geometry(volume.geometry, cameras, step=config.step)
    dens = volume.density.values.reshape(-1)
    cols = volume.color.values.reshape(-1)
    opt_d = _Adam(dens.size, config)
    opt_c = _Adam(cols.size, config)
    frozen = None if mask is None else ~mask.reshape(-1)
    n_rays = len(rays)
    for it in range(iterations):
        idx = rng.integers(0, n_rays, size=min(config.ray_batch_size, n_rays))
        loss, _, gd, gc = grad_photometric(volume, rays.subset(idx), sampling)
        if not np.isfinite(loss):
            raise DivergenceError(f"photometric loss became non-finite at iteration {first_it + it}",
                                  first_it + it)
        losses.append(loss)
        gd = gd.reshape(-1)
        if frozen is not None:
            gd[frozen] = 0.0
        opt_d.step(dens, gd)
        opt_c.step(cols, gc.reshape(-1))
        if config.log_every and (it + 1) % config.log_every == 0:
            log.info("iteration %d loss %.6g", first_it + it + 1, loss)
    return volume


def fit(cameras, images, config: ReconConfig = None, init: Volume = None) -> ReconResult:
    """Optimize a coarse grid, upsample it and refine it on random ray batches."""
    config = config or ReconConfig()
    if len(cameras) == 0 or len(images) == 0:
        raise InvalidArgumentError("reconstruction needs at least one posed view")
    if len(cameras) != len(images):
        raise InvalidArgumentError(f"{len(cameras)} cameras but {len(images)} images")
    sizes = {(im.rgb.shape if isinstance(im, Image) else np.shape(im)) for im in images}
    if len(sizes) != 1:
        raise InvalidArgumentError(f"inconsistent image sizes: {sorted(sizes)}")
    t0 = time.perf_counter()
    rays = rays_from_views(cameras, images)
    rng = np.random.default_rng(config.seed)
    volume = (init or initial_volume(config.coarse_geometry)).copy()
    losses = []
    _run_stage(volume, rays, cameras, config, config.iterations_coarse, rng, losses, 0)
    n_coarse = len(losses)
    if config.fine_factor > 1 or config.iterations_fine > 0:
        volume = Volume(upsample(volume.density, config.fine_factor),
                        upsample(volume.color, config.fine_factor))
        mask = None
        if config.occupancy_mask and n_coarse:
            step = config.step or 0.5 * float(np.linalg.norm(volume.geometry.voxel_size))
            mask = _occupancy(volume, step)
            volume.density.values[~mask] = EMPTY_DENSITY_RAW
        _run_stage(volume, rays, cameras, config, config.iterations_fine, rng, losses, n_coarse, mask)
    elapsed = time.perf_counter() - t0
    if losses:
        log.info("reconstruction finished: final loss %.6g in %.1fs", losses[-1], elapsed)
    return ReconResult(volume, losses, n_coarse, elapsed)


def reconstruct(cameras, images, config: ReconConfig = None) -> Volume:
    return fit(cameras, images, config).volume


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class Primitive:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = half extents)."""

    kind: str
    center: tuple
    size: object
    color: tuple
    density: float

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise InvalidArgumentError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.color = np.asarray(self.color, dtype=float).reshape(3)
        if self.kind == "sphere":
            self.size = float(self.size)
        else:
            self.size = np.broadcast_to(np.asarray(self.size, dtype=float), 3).copy()
        if np.any(np.asarray(self.size) <= 0):
            raise InvalidArgumentError("primitive size must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidArgumentError("primitive colors must lie in [0, 1]")
        if not self.density >= 0:
            raise InvalidArgumentError("primitive density must be non-negative")

    @property
    def extent(self):
        half = np.full(3, self.size) if self.kind == "sphere" else self.size
        return self.center - half, self.center + half

    def inside(self, x) -> np.ndarray:
        d = x - self.center
        if self.kind == "sphere":
            return np.einsum("ij,ij->i", d, d) <= self.size ** 2
        return np.all(np.abs(d) <= self.size, axis=1)


@dataclass
class CameraRing:
    """Cameras evenly spaced in azimuth on a circle at fixed elevation."""

    count: int
    radius: float
    elevation: float = 30.0
    width: int = 100
    height: int = 100
    camera_angle_x: float = 0.6911112070083618
    azimuth_offset: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)

    def cameras(self):
        focal = 0.5 * self.width / np.tan(0.5 * self.camera_angle_x)
        return [Camera.orbit(self.azimuth_offset + 360.0 * i / self.count, self.elevation,
                             self.radius, self.center, self.width, self.height, focal)
                for i in range(self.count)]


@dataclass
class SyntheticSceneSpec:
    primitives: list
    ring: CameraRing
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    resolution: tuple = (96, 96, 96)
    step: float = None

    def __post_init__(self):
        if not self.primitives:
            raise InvalidArgumentError("a synthetic scene needs at least one primitive")
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        lo, hi = (np.asarray(b, dtype=float) for b in self.bbox)
        for p in self.primitives:
            plo, phi = p.extent
            if np.any(plo < lo - 1e-12) or np.any(phi > hi + 1e-12):
                raise InvalidArgumentError(f"{p.kind} at {p.center.tolist()} leaves the bounding box")

    @property
    def geometry(self) -> GridGeometry:
        lo, hi = self.bbox
        return GridGeometry(tuple(lo), tuple(hi), tuple(np.broadcast_to(self.resolution, 3)))


def rasterize(spec: SyntheticSceneSpec) -> Volume:
    """Node values from the first primitive containing each node."""
    geo = spec.geometry
    x = geo.node_positions()
    raw_d = np.full(len(x), EMPTY_DENSITY_RAW)
    raw_c = np.zeros((len(x), 3))
    free = np.ones(len(x), dtype=bool)
    for p in spec.primitives:
        hit = free & p.inside(x)
        d = max(float(p.density), 0.0)
        raw_d[hit] = max(float(softplus_inverse(d)), EMPTY_DENSITY_RAW) if d > 0 else EMPTY_DENSITY_RAW
        raw_c[hit] = logit(p.color)
        free &= ~hit
    return Volume(ScalarGrid(geo, raw_d.reshape(geo.shape)),
                  ColorGrid(geo, raw_c.reshape(geo.shape + (3,))))


def scene_sampling(geometry: GridGeometry, cameras, step=None) -> RaySampling:
    return RaySampling.for_geometry(geometry, cameras, step=step)


def render_views(volume: Volume, cameras, step=None):
    sampling = scene_sampling(volume.geometry, cameras, step)
    return [render_image(volume, cam, sampling) for cam in cameras]


def make_synthetic_scene(spec: SyntheticSceneSpec):
    """Ground-truth volume and its renders from a ring of cameras."""
    volume = rasterize(spec)
    cams = spec.ring.cameras()
    images = render_views(volume, cams, spec.step)
    return volume, list(zip(cams, images))


def sphere_scene(ring: CameraRing, resolution=96, radius=0.5, color=(0.9, 0.3, 0.2),
                 density=40.0) -> SyntheticSceneSpec:
    return SyntheticSceneSpec([Primitive("sphere", (0, 0, 0), radius, color, density)],
                              ring, resolution=(resolution,) * 3)


def toy_scene(ring: CameraRing, resolution=96) -> SyntheticSceneSpec:
    """Asymmetric arrangement of colored blocks and a ball."""
    prims = [
        Primitive("box", (0.0, 0.0, -0.3), (0.55, 0.35, 0.12), (0.85, 0.75, 0.3), 40.0),
        Primitive("sphere", (0.25, 0.05, 0.15), 0.3, (0.2, 0.45, 0.9), 40.0),
        Primitive("box", (-0.35, -0.1, 0.15), (0.12, 0.12, 0.35), (0.9, 0.25, 0.2), 40.0),
    ]
    return SyntheticSceneSpec(prims, ring, resolution=(resolution,) * 3)
