"""Dense node-centered voxel grids with trilinear gather and scatter.

Values live on lattice nodes: node ``(i, j, k)`` sits at
``bbox_min + (i, j, k) * voxel_size`` and ``bbox_max`` is the last node. In
memory a scalar grid is a C-contiguous ``(Nx, Ny, Nz)`` float64 array and a
color grid is ``(Nx, Ny, Nz, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgumentError


@dataclass(frozen=True)
class GridGeometry:
    bbox_min: tuple
    bbox_max: tuple
    resolution: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        res = tuple(int(v) for v in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise InvalidArgumentError("geometry needs 3 components per field")
        if not all(a < b for a, b in zip(lo, hi)):
            raise InvalidArgumentError(f"bbox_min {lo} must be < bbox_max {hi}")
        if min(res) < 2:
            raise InvalidArgumentError(f"resolution {res} needs >= 2 nodes per axis")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "resolution", res)

    @classmethod
    def cube(cls, half_extent=1.0, resolution=32, center=(0.0, 0.0, 0.0)):
        c = np.asarray(center, dtype=float)
        return cls(tuple(c - half_extent), tuple(c + half_extent), (resolution,) * 3)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bbox_min)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bbox_max)

    @property
    def shape(self):
        return self.resolution

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.resolution) - 1.0)

    @property
    def inv_voxel(self) -> np.ndarray:
        return (np.asarray(self.resolution) - 1.0) / (self.hi - self.lo)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def world_to_grid(self, x) -> np.ndarray:
        """Continuous node index of world point(s) ``x``."""
        return (np.asarray(x, dtype=float) - self.lo) * self.inv_voxel

    def grid_to_world(self, idx) -> np.ndarray:
        return self.lo + np.asarray(idx, dtype=float) * self.voxel_size

    def node_positions(self) -> np.ndarray:
        """World coordinates of all nodes, ``(num_nodes, 3)``, in memory order."""
        axes = [np.linspace(a, b, n) for a, b, n in zip(self.bbox_min, self.bbox_max, self.resolution)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    def contains(self, x, slack=1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = slack * (self.hi - self.lo)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def with_resolution(self, resolution) -> "GridGeometry":
        return GridGeometry(self.bbox_min, self.bbox_max, tuple(resolution))


def _check_values(values, geometry, channels):
    expected = geometry.shape if channels == 1 else geometry.shape + (channels,)
    if values.shape != expected:
        raise InvalidArgumentError(f"grid values have shape {values.shape}, expected {expected}")
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("grid values must be finite")


@dataclass
class ScalarGrid:
    """Node-wise scalars; for density grids these are pre-softplus values."""

    geometry: GridGeometry
    values: np.ndarray

    channels = 1

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        _check_values(self.values, self.geometry, 1)

    @classmethod
    def full(cls, geometry, value=0.0):
        return cls(geometry, np.full(geometry.shape, float(value)))

    def copy(self):
        return ScalarGrid(self.geometry, self.values.copy())


@dataclass
class ColorGrid:
    """Node-wise RGB triples; pre-sigmoid logits unless stated otherwise."""

    geometry: GridGeometry
    values: np.ndarray

    channels = 3

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        _check_values(self.values, self.geometry, 3)

    @classmethod
    def full(cls, geometry, value=(0.0, 0.0, 0.0)):
        v = np.empty(geometry.shape + (3,))
        v[...] = np.asarray(value, dtype=float)
        return cls(geometry, v)

    def copy(self):
        return ColorGrid(self.geometry, self.values.copy())


@dataclass
class Volume:
    """Paired density and color grids over one geometry."""

    density: ScalarGrid
    color: ColorGrid

    def __post_init__(self):
        if self.density.geometry != self.color.geometry:
            raise InvalidArgumentError("density and color grids must share one geometry")

    @property
    def geometry(self) -> GridGeometry:
        return self.density.geometry

    def copy(self):
        return Volume(self.density.copy(), self.color.copy())


def _lattice(points, geometry):
    """Lower-corner indices, fractions and trilinear weights, dz fastest."""
    res = np.asarray(geometry.resolution)
    g = np.clip(geometry.world_to_grid(points), 0.0, res - 1.0)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    w = np.ones((len(points), 8))
    n = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                for axis, d in enumerate((dx, dy, dz)):
                    w[:, n] *= f[:, axis] if d else 1.0 - f[:, axis]
                n += 1
    return i0, w


def trilinear_sample(grid, x):
    """Trilinear interpolation of ``grid`` at world point(s) ``x``.

    Points outside the bounding box read as zero.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    i0, w = _lattice(pts, grid.geometry)
    vals = grid.values
    out = np.zeros((len(pts),) + vals.shape[3:])
    n = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = vals[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += corner * (w[:, n] if corner.ndim == 1 else w[:, n, None])
                n += 1
    out[~grid.geometry.contains(pts)] = 0.0
    return out[0] if single else out


def _as_points(points):
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return pts


def trilinear_splat(points, weights, geometry) -> ScalarGrid:
    """Scatter each weight onto its 8 enclosing nodes (adjoint of sampling).

    Out-of-box points are clamped onto the boundary cell so no mass is lost.
    """
    pts = _as_points(points)
    w = np.ascontiguousarray(np.asarray(weights, dtype=float).reshape(-1))
    if len(pts) != len(w):
        raise InvalidArgumentError(f"{len(pts)} points but {len(w)} weights")
    out = np.zeros(geometry.shape)
    kernels.splat_scalar(pts, w, geometry.lo, geometry.inv_voxel, out)
    return ScalarGrid(geometry, out)


def splat_colors(points, weights, colors, geometry) -> ColorGrid:
    """Mass-weighted mean color per node (plain RGB, not logits).

    Nodes that receive no mass are black.
    """
    pts = _as_points(points)
    w = np.ascontiguousarray(np.asarray(weights, dtype=float).reshape(-1))
    c = np.ascontiguousarray(np.asarray(colors, dtype=float).reshape(-1, 3))
    if not len(pts) == len(w) == len(c):
        raise InvalidArgumentError(
            f"length mismatch: {len(pts)} points, {len(w)} weights, {len(c)} colors")
    mass = np.zeros(geometry.shape)
    acc = np.zeros(geometry.shape + (3,))
    kernels.splat_vector(pts, w, c, geometry.lo, geometry.inv_voxel, mass, acc)
    nz = mass > 0
    acc[nz] /= mass[nz][:, None]
    acc[~nz] = 0.0
    return ColorGrid(geometry, acc)


def upsample(grid, factor: int):
    """Refine to ``(N - 1) * factor + 1`` nodes per axis by trilinear resampling."""
    factor = int(factor)
    if factor < 1:
        raise InvalidArgumentError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return grid.copy()
    geo = grid.geometry
    fine = geo.with_resolution(tuple((n - 1) * factor + 1 for n in geo.resolution))
    vals = trilinear_sample(grid, fine.node_positions())
    return type(grid)(fine, vals.reshape(fine.shape + grid.values.shape[3:]))


def union_geometry(a: GridGeometry, b: GridGeometry) -> GridGeometry:
    """Smallest lattice covering both boxes at the finer of the two spacings."""
    if a == b:
        return a
    lo = np.minimum(a.lo, b.lo)
    hi = np.maximum(a.hi, b.hi)
    spacing = np.minimum(a.voxel_size, b.voxel_size)
    res = np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1
    hi = lo + (res - 1) * spacing
    return GridGeometry(tuple(lo), tuple(hi), tuple(res))
