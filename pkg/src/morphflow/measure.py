"""Weighted point measures extracted from opacity volumes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyShapeError, InvalidArgumentError
from .grid import Volume
from .render import EMPTY_DENSITY_RAW, density_to_alpha, sigmoid, softplus


@dataclass
class WeightedPointSet:
    """Discrete probability measure ``sum_i w_i delta(x_i)`` with optional colors.

    ``mass`` records the alpha total before normalization so a morphed
    volume can be rescaled back to physical opacities.
    """

    points: np.ndarray
    weights: np.ndarray
    colors: np.ndarray = None
    mass: float = 1.0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        n = len(self.points)
        if n < 1:
            raise InvalidArgumentError("a point set needs at least one point")
        if len(self.weights) != n:
            raise InvalidArgumentError(f"{n} points but {len(self.weights)} weights")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidArgumentError("weights must be positive and finite")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"weights sum to {self.weights.sum()!r}, expected 1")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise InvalidArgumentError(f"{n} points but {len(self.colors)} colors")

    @classmethod
    def from_unnormalized(cls, points, masses, colors=None):
        m = np.asarray(masses, dtype=float)
        tot = float(m.sum())
        return cls(points, m / tot, colors, mass=tot)

    @classmethod
    def uniform(cls, points, colors=None):
        n = len(points)
        return cls(points, np.full(n, 1.0 / n), colors)

    def __len__(self):
        return len(self.points)

    @property
    def diameter(self) -> float:
        """Diagonal of the axis-aligned bounding box of the support."""
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def with_points(self, points) -> "WeightedPointSet":
        return WeightedPointSet(points, self.weights, self.colors, self.mass)


def node_alphas(volume: Volume, step: float) -> np.ndarray:
    """Per-node opacity of a segment of length ``step`` (flat, memory order).

    Nodes at or below the empty-space floor count as exactly transparent.
    """
    raw = volume.density.values.reshape(-1)
    sigma = np.where(raw <= EMPTY_DENSITY_RAW, 0.0, softplus(raw))
    return density_to_alpha(sigma, step)


def extract_point_set(volume: Volume, alpha_threshold=0.01, step_for_alpha=None,
                      max_points=20000) -> WeightedPointSet:
    """Collect nodes with alpha above ``alpha_threshold`` as a weighted measure.

    Weights are proportional to alpha. When more than ``max_points`` nodes
    survive, the most opaque ones are kept (ties go to the lower node index).
    """
    geo = volume.geometry
    if max_points < 1:
        raise InvalidArgumentError(f"max_points must be >= 1, got {max_points}")
    if step_for_alpha is None:
        step_for_alpha = 0.5 * float(np.linalg.norm(geo.voxel_size))
    alpha = node_alphas(volume, step_for_alpha)
    keep = np.nonzero(alpha > alpha_threshold)[0]
    if len(keep) == 0:
        raise EmptyShapeError(f"no node has alpha above {alpha_threshold}")
    if len(keep) > max_points:
        # stable sort on -alpha keeps index order among equal alphas
        order = np.argsort(-alpha[keep], kind="stable")[:max_points]
        keep = np.sort(keep[order])
    pts = geo.node_positions()[keep]
    colors = sigmoid(volume.color.values.reshape(-1, 3)[keep])
    return WeightedPointSet.from_unnormalized(pts, alpha[keep], colors)


def transform_point_set(P: WeightedPointSet, transform) -> WeightedPointSet:
    """Push the measure forward through ``x -> R x + z``."""
    return P.with_points(transform.apply(P.points))
