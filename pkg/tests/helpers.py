"""Shared builders for the test-suite."""
import numpy as np

from morphflow.measure import WeightedPointSet


def rotation(axis, angle):
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_rotation(rng, max_deg=180.0):
    return rotation(rng.normal(size=3), np.radians(rng.uniform(0, max_deg)))


def toy_shape(n=2000, seed=0):
    """Three boxes of unequal size: no rotational symmetry."""
    rng = np.random.default_rng(seed)
    boxes = [((-0.5, -0.2, -0.1), (0.5, 0.2, 0.1)),
             ((0.3, 0.2, -0.1), (0.5, 0.6, 0.1)),
             ((-0.5, -0.2, 0.1), (-0.3, 0.0, 0.5))]
    vols = np.array([np.prod(np.subtract(hi, lo)) for lo, hi in boxes])
    pick = rng.choice(len(boxes), n, p=vols / vols.sum())
    lo = np.array([boxes[i][0] for i in pick])
    hi = np.array([boxes[i][1] for i in pick])
    return lo + rng.random((n, 3)) * (hi - lo)


def random_measure(rng, n, spread=1.0, offset=0.0, weight_range=(0.2, 1.0)):
    pts = rng.uniform(-spread, spread, (n, 3)) + offset
    w = rng.uniform(*weight_range, n)
    return WeightedPointSet(pts, w / w.sum())
