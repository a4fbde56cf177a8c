"""Dual-flow morphing: a rigid flow that aligns pose and a transport flow
that deforms the aligned source onto the target.

The morphed measure at blending weight ``t`` is

    M_t = S + t * (Psi(S) - S) + t * (-grad Phi(Psi(S)))

where ``Psi`` is the rigid transform minimizing the Sinkhorn divergence to
the target and ``Phi`` is the debiased potential of that aligned pair.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sinkhorn
from .errors import (DegenerateProjectionError, InvalidArgumentError,
                     RegistrationFailedError, StalledDescentError)
from .grid import GridGeometry, ScalarGrid, ColorGrid, Volume, splat_colors, trilinear_sample, trilinear_splat
from .measure import WeightedPointSet, transform_point_set
from .render import EMPTY_DENSITY_RAW, alpha_to_density, logit, sigmoid, softplus_inverse
from .sinkhorn import SinkhornParams

log = logging.getLogger(__name__)

MAX_NODE_ALPHA = 1.0 - 1e-6


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidArgumentError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """The transform that applies ``first`` and then ``self``."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def to_text(self) -> str:
        vals = list(self.rotation.ravel()) + list(self.translation)
        return " ".join(repr(float(v)) for v in vals) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RigidTransform":
        vals = [float(v) for v in text.split()]
        if len(vals) != 12:
            raise InvalidArgumentError(f"rigid transform needs 12 numbers, got {len(vals)}")
        # re-project to absorb round-off from the text round trip
        return cls(project_rotation(np.reshape(vals[:9], (3, 3))), vals[9:])


def project_rotation(M) -> np.ndarray:
    """Closest proper rotation to ``M`` in Frobenius norm."""
    M = np.asarray(M, dtype=float)
    U, s, Vt = np.linalg.svd(M)
    if s[-1] < 1e-12:
        raise DegenerateProjectionError(f"matrix is numerically singular (sigma_min={s[-1]:.3g})")
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] *= -1.0
        R = U @ Vt
    return R


@dataclass
class RegistrationConfig:
    """Descent schedule for rigid registration.

    Both step sizes are dimensionless: the translation step multiplies the
    mass-weighted mean of the potential gradient, and the rotation step is
    divided by the largest eigenvalue of the source covariance. Descent stops
    early once an update moves R (Frobenius) plus z (in diameters) by less
    than ``tolerance``. ``sinkhorn=None`` picks :func:`default_registration_params`.
    """

    iterations: int = 200
    step_size: float = 1.0
    rotation_step: float = 3.0
    sinkhorn: SinkhornParams = None
    stall_patience: int = 10
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgumentError("registration needs at least one iteration")
        if not (self.step_size > 0 and self.rotation_step > 0):
            raise InvalidArgumentError("step sizes must be positive")


def default_registration_params(S: WeightedPointSet, T: WeightedPointSet, relative=1e-2,
                                tolerance=1e-2) -> SinkhornParams:
    """Blur ``relative * diam^2`` with a dual tolerance of ``tolerance * epsilon``."""
    both = np.vstack([S.points, T.points])
    diam = float(np.linalg.norm(both.max(axis=0) - both.min(axis=0)))
    eps = relative * diam ** 2
    return SinkhornParams(epsilon=eps, tolerance=tolerance * eps)


def estimate_rigid(S: WeightedPointSet, T: WeightedPointSet, config: RegistrationConfig = None):
    """Gradient descent on the Sinkhorn divergence over rigid motions of ``S``.

    The rotation is updated by a gradient step followed by projection onto
    the rotation group. Returns ``(transform, trace)``; ``trace[k]`` is the
    divergence of the k-th iterate and ``trace[-1]`` that of the returned
    transform (the best iterate seen).
    """
    config = config or RegistrationConfig()
    params = config.sinkhorn or default_registration_params(S, T)
    w = S.weights
    c = w @ S.points
    xc = S.points - c
    cov = (w[:, None] * xc).T @ xc
    eta_r = config.rotation_step / max(float(np.linalg.eigvalsh(cov)[-1]), 1e-300)
    eta_z = config.step_size
    scale = max(S.diameter, 1e-300)

    # rigid motions leave the self-correlation duals of the source unchanged
    a_src, ok_a, _ = sinkhorn.self_duals(S, params)
    b_tgt, ok_b, _ = sinkhorn.self_duals(T, params)
    if not (ok_a and ok_b):
        raise RegistrationFailedError("self-correlation duals did not converge", [])
    # the self half of the gradient moves rigidly with the source as well
    g_self = sinkhorn.self_gradient(S, a_src, params.epsilon, S.points)

    R = np.eye(3)
    shift = np.zeros(3)  # translation of the centroid
    trace = []
    best = (np.inf, None)
    increases = 0
    duals = None
    for k in range(config.iterations + 1):
        # exact at the identity, so S against itself hits the symmetric solver
        moved = S.with_points(S.points @ R.T + (c + shift - R @ c))
        duals = sinkhorn.solve(moved, T, params, init=duals, self_gamma=a_src,
                               self_beta=b_tgt, strict=False)
        if not duals.converged:
            raise RegistrationFailedError(
                f"sinkhorn did not converge at registration iterate {k}", trace)
        value = sinkhorn.divergence_from_duals(moved, T, duals)
        if trace and value > trace[-1]:
            increases += 1
            if increases >= config.stall_patience:
                raise StalledDescentError(
                    f"divergence increased for {increases} consecutive iterates; "
                    "reduce the step size", trace + [value])
        else:
            increases = 0
        trace.append(value)
        if value < best[0]:
            best = (value, (R.copy(), shift.copy()))
        if k == config.iterations:
            break
        grad = sinkhorn.target_gradient(T, duals, moved.points) - g_self @ R.T
        grad *= w[:, None]
        g_shift = grad.sum(axis=0)
        g_rot = grad.T @ xc
        d_shift = eta_z * g_shift
        R_next = project_rotation(R - eta_r * g_rot)
        moved_by = np.linalg.norm(R_next - R) + np.linalg.norm(d_shift) / scale
        shift = shift - d_shift
        R = R_next
        if moved_by < config.tolerance:
            # one more pass to score the final iterate
            moved = S.with_points(S.points @ R.T + (c + shift - R @ c))
            duals = sinkhorn.solve(moved, T, params, init=duals, self_gamma=a_src,
                                   self_beta=b_tgt, strict=False)
            if not duals.converged:
                raise RegistrationFailedError("sinkhorn did not converge at the final iterate", trace)
            value = sinkhorn.divergence_from_duals(moved, T, duals)
            trace.append(value)
            if value < best[0]:
                best = (value, (R.copy(), shift.copy()))
            break

    value, (R, shift) = best
    if trace[-1] != value:
        trace.append(value)
    return RigidTransform(R, c + shift - R @ c), trace


def _check_t(t):
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"blending weight t must lie in [0, 1], got {t}")
    return t


def rigid_flow(S: WeightedPointSet, transform: RigidTransform, t) -> np.ndarray:
    t = _check_t(t)
    return t * (transform.apply(S.points) - S.points)


def ot_displacement(aligned: WeightedPointSet, T: WeightedPointSet, params: SinkhornParams):
    """Per-point ``-grad Phi`` at the aligned source, plus the converged duals."""
    duals = sinkhorn.solve(aligned, T, params)
    return -sinkhorn.potential_gradient(aligned, T, duals, aligned.points), duals


def ot_flow(S: WeightedPointSet, transform: RigidTransform, T: WeightedPointSet, t,
            params: SinkhornParams) -> np.ndarray:
    t = _check_t(t)
    g_total, _ = ot_displacement(transform_point_set(S, transform), T, params)
    return t * g_total


@dataclass(frozen=True)
class MorphState:
    t: float
    morphed_points: np.ndarray
    weights: np.ndarray
    blended_colors: np.ndarray
    flow_f_total: np.ndarray
    flow_g_total: np.ndarray


def morph_points(S: WeightedPointSet, f_total, g_total, t, colors=None) -> MorphState:
    """Advance both flows together to weight ``t``."""
    t = _check_t(t)
    f_total = np.asarray(f_total, dtype=float)
    g_total = np.asarray(g_total, dtype=float)
    if f_total.shape != S.points.shape or g_total.shape != S.points.shape:
        raise InvalidArgumentError("flow arrays must match the source point array")
    pts = S.points.copy() if t == 0.0 else S.points + t * f_total + t * g_total
    if colors is None:
        colors = S.colors if S.colors is not None else np.zeros_like(S.points)
    return MorphState(t, pts, S.weights.copy(), np.asarray(colors, dtype=float), f_total, g_total)


def query_colors(color_grid: ColorGrid, points) -> np.ndarray:
    """Activated colors at ``points``; black outside the grid box."""
    pts = np.atleast_2d(points)
    out = sigmoid(trilinear_sample(color_grid, pts))
    out[~color_grid.geometry.contains(pts)] = 0.0
    return out


def blend_colors(source_colors, target_color_grid: ColorGrid, endpoint_points, t) -> np.ndarray:
    """Linear blend between source colors and target colors at the t=1 positions."""
    t = _check_t(t)
    target = query_colors(target_color_grid, endpoint_points)
    return np.clip((1.0 - t) * np.asarray(source_colors, dtype=float) + t * target, 0.0, 1.0)


def build_morphed_volume(state: MorphState, geometry: GridGeometry, total_mass: float,
                         step: float, cleanup_threshold: float = None) -> Volume:
    """Voxelize a morph state into raw density and color grids.

    Weights are scaled back by ``total_mass`` to physical opacities, splatted,
    clamped below one and inverted through the alpha/density relation for
    segments of length ``step``.
    """
    alpha = trilinear_splat(state.morphed_points, state.weights * total_mass, geometry).values
    if cleanup_threshold is not None:
        alpha[alpha < cleanup_threshold] = 0.0
    alpha = np.clip(alpha, 0.0, MAX_NODE_ALPHA)
    with np.errstate(divide="ignore"):
        raw = softplus_inverse(alpha_to_density(alpha, step))
    raw = np.maximum(raw, EMPTY_DENSITY_RAW)
    colors = splat_colors(state.morphed_points, state.weights, state.blended_colors, geometry)
    rgb = fill_empty_colors(colors.values, alpha > 0)
    return Volume(ScalarGrid(geometry, raw), ColorGrid(geometry, logit(rgb)))


def fill_empty_colors(rgb, occupied, passes=2, background=0.5):
    """Extend colors from occupied nodes into empty neighbours.

    Samples near a surface interpolate between occupied and empty nodes, so
    empty nodes next to the shape take the mean color of their occupied face
    neighbours (grown ``passes`` times); the rest get ``background``.
    """
    rgb = np.where(occupied[..., None], rgb, 0.0)
    have = occupied.copy()
    for _ in range(passes):
        acc = np.zeros_like(rgb)
        cnt = np.zeros(have.shape)
        for ax in range(3):
            for shift in (1, -1):
                src = [slice(None)] * 3
                dst = [slice(None)] * 3
                if shift == 1:
                    src[ax], dst[ax] = slice(None, -1), slice(1, None)
                else:
                    src[ax], dst[ax] = slice(1, None), slice(None, -1)
                src, dst = tuple(src), tuple(dst)
                acc[dst] += np.where(have[src][..., None], rgb[src], 0.0)
                cnt[dst] += have[src]
        new = ~have & (cnt > 0)
        rgb[new] = acc[new] / cnt[new][:, None]
        have |= new
    rgb[~have] = background
    return rgb


@dataclass
class MorphPlan:
    """Everything a morph needs that does not depend on ``t``.

    Both flows are linear in ``t``, so they are evaluated once here and
    scaled per frame.
    """

    source: WeightedPointSet
    transform: RigidTransform
    f_total: np.ndarray
    g_total: np.ndarray
    endpoint_colors: np.ndarray
    duals: sinkhorn.DualPotentials = None

    @property
    def endpoint_points(self):
        return self.source.points + self.f_total + self.g_total

    def state(self, t) -> MorphState:
        t = _check_t(t)
        src = self.source.colors if self.source.colors is not None else np.zeros_like(self.source.points)
        colors = np.clip((1.0 - t) * src + t * self.endpoint_colors, 0.0, 1.0)
        return morph_points(self.source, self.f_total, self.g_total, t, colors=colors)


def prepare_morph(S: WeightedPointSet, T: WeightedPointSet, target_colors: ColorGrid,
                  transform: RigidTransform, params: SinkhornParams) -> MorphPlan:
    aligned = transform_point_set(S, transform)
    f_total = aligned.points - S.points
    g_total, duals = ot_displacement(aligned, T, params)
    endpoint = S.points + f_total + g_total
    return MorphPlan(S, transform, f_total, g_total, query_colors(target_colors, endpoint), duals)
