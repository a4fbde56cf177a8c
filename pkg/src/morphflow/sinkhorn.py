"""Debiased Sinkhorn divergence between weighted point sets.

Ground cost is ``C(x, y) = |x - y|^2 / 2``. All reductions run in the log
domain through :func:`morphflow.kernels.softmin`, which max-stabilizes each
row so no finite input overflows.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConvergenceError, InvalidArgumentError

log = logging.getLogger(__name__)


@dataclass
class SinkhornParams:
    """Entropic blur ``epsilon`` is in squared world units.

    ``scaling`` is the ratio between successive blur levels of the annealing
    warm-up (``None`` solves at ``epsilon`` directly). ``tolerance`` defaults
    to ``1e-6 * epsilon`` on the sup-norm change of the duals.
    """

    epsilon: float
    max_iterations: int = 500
    tolerance: float = None
    scaling: float = 0.5

    p_exponent = 2
    cost_scale = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.tolerance is None:
            self.tolerance = 1e-6 * self.epsilon
        if not self.tolerance > 0:
            raise InvalidArgumentError("tolerance must be positive")
        if self.scaling is not None and not 0 < self.scaling < 1:
            raise InvalidArgumentError("scaling must lie in (0, 1)")

    @classmethod
    def for_diagonal(cls, diagonal, relative=1e-4, **kw):
        return cls(epsilon=relative * diagonal ** 2, **kw)


@dataclass
class DualPotentials:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray = None
    b: np.ndarray = None
    converged: bool = True
    iterations_used: int = 0
    epsilon: float = None


def cost(x, y):
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return 0.5 * np.sum(d * d, axis=-1)


def _pts(P):
    return np.ascontiguousarray(P.points, dtype=np.float64)


def _logw(P):
    return np.log(np.asarray(P.weights, dtype=np.float64))


def _softmin(x, y, h, eps, grad=False):
    out = np.empty(len(x))
    g = np.empty((len(x), 3)) if grad else None
    kernels.softmin(x, y, np.ascontiguousarray(h), float(eps), out, g)
    return (out, g) if grad else out


def _schedule(x, y, params):
    """Blur levels of the annealing warm-up, ending just above ``epsilon``."""
    if params.scaling is None:
        return []
    both = np.vstack([x, y])
    diam2 = float(np.sum((both.max(axis=0) - both.min(axis=0)) ** 2))
    levels = []
    e = diam2
    while e > params.epsilon:
        levels.append(e)
        e *= params.scaling
    return levels


_RATE_WINDOW = 10
_MAX_RELAXATION = 1.98


def _next_relaxation(history, omega):
    half = _RATE_WINDOW // 2
    r = (history[-1] / history[-half - 1]) ** (1.0 / half)
    if not np.isfinite(r) or r >= 1.0:
        return 1.0 + 0.5 * (omega - 1.0)
    eta = min((r + omega - 1.0) ** 2 / (omega * omega * r), 1.0 - 1e-10)
    return max(omega, min(_MAX_RELAXATION, 2.0 / (1.0 + np.sqrt(1.0 - eta))))


def same_measure(gamma, beta) -> bool:
    return gamma is beta or (
        len(gamma.points) == len(beta.points)
        and np.array_equal(gamma.points, beta.points)
        and np.array_equal(gamma.weights, beta.weights))


def sinkhorn_duals(gamma, beta, params: SinkhornParams, init=None) -> DualPotentials:
    """Alternating log-domain Sinkhorn updates for ``OT_eps(gamma, beta)``.

    ``init`` may carry duals ``(u, v)`` from a nearby problem; it then
    replaces the annealing warm-up. Identical measures are handed to the
    symmetric solver. Non-convergence is reported through ``converged=False``
    rather than raised.
    """
    if same_measure(gamma, beta):
        a, converged, it = self_duals(gamma, params, init=None if init is None else init.u)
        return DualPotentials(u=a, v=a.copy(), converged=converged, iterations_used=it,
                              epsilon=params.epsilon)
    x, y = _pts(gamma), _pts(beta)
    lg, lb = _logw(gamma), _logw(beta)
    eps = params.epsilon
    it = 0
    if init is not None:
        v = np.array(init.v, dtype=float)
        u = _softmin(x, y, lb + v / eps, eps)
    else:
        v = np.zeros(len(y))
        for e in _schedule(x, y, params)[: params.max_iterations - 1]:
            u = _softmin(x, y, lb + v / e, e)
            v = _softmin(y, x, lg + u / e, e)
            it += 1
        u = _softmin(x, y, lb + v / eps, eps)
    # Over-relaxed updates. The factor is set once from the rate of the first
    # window of plain iterations and halved back toward 1 if changes grow.
    omega = 1.0
    history = []
    converged = False
    while it < params.max_iterations:
        v_new = (1.0 - omega) * v + omega * _softmin(y, x, lg + u / eps, eps)
        u_new = (1.0 - omega) * u + omega * _softmin(x, y, lb + v_new / eps, eps)
        it += 1
        change = max(np.max(np.abs(u_new - u)), np.max(np.abs(v_new - v)))
        u, v = u_new, v_new
        if change < params.tolerance:
            converged = True
            break
        history.append(change)
        if len(history) % _RATE_WINDOW == 0:
            omega = _next_relaxation(history, omega)
    if omega != 1.0:
        u = _softmin(x, y, lb + v / eps, eps)
    if not converged:
        log.debug("sinkhorn stopped after %d iterations without converging", it)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ConvergenceError("sinkhorn duals became non-finite")
    return DualPotentials(u=u, v=v, converged=converged, iterations_used=it, epsilon=eps)


def self_duals(gamma, params: SinkhornParams, init=None):
    """Symmetric fixed point ``a`` of the update with ``beta = gamma``.

    Returns ``(a, converged, iterations_used)``; convergence means the
    fixed-point residual is below ``params.tolerance``.
    """
    x = _pts(gamma)
    lg = _logw(gamma)
    eps = params.epsilon
    it = 0
    if init is not None:
        a = np.array(init, dtype=float)
    else:
        a = np.zeros(len(x))
        for e in _schedule(x, x, params)[: params.max_iterations - 1]:
            a = 0.5 * (a + _softmin(x, x, lg + a / e, e))
            it += 1
    converged = False
    while it < params.max_iterations:
        ta = _softmin(x, x, lg + a / eps, eps)
        it += 1
        if np.max(np.abs(ta - a)) < params.tolerance:
            converged = True
            break
        a = 0.5 * (a + ta)
    if not np.all(np.isfinite(a)):
        raise ConvergenceError("self-correlation duals became non-finite")
    return a, converged, it


def ot_eps(gamma, beta, duals: DualPotentials) -> float:
    return float(np.dot(gamma.weights, duals.u) + np.dot(beta.weights, duals.v))


def solve(gamma, beta, params: SinkhornParams, init=None, self_gamma=None, self_beta=None,
          strict=True) -> DualPotentials:
    """All four dual vectors needed by the divergence and its gradient.

    Precomputed self-correlation duals may be passed in; they depend only on
    the pairwise distances inside each measure.
    """
    duals = sinkhorn_duals(gamma, beta, params, init=init)
    ok = duals.converged
    if same_measure(gamma, beta):
        self_gamma = self_beta = duals.u
    if self_gamma is None:
        self_gamma, c, n = self_duals(gamma, params)
        ok = ok and c
        duals.iterations_used = max(duals.iterations_used, n)
    if self_beta is None:
        self_beta, c, n = self_duals(beta, params)
        ok = ok and c
        duals.iterations_used = max(duals.iterations_used, n)
    duals.a, duals.b = self_gamma, self_beta
    duals.converged = ok
    if strict and not ok:
        raise ConvergenceError(
            f"sinkhorn did not reach tolerance {params.tolerance:.3g} "
            f"within {params.max_iterations} iterations", duals=duals)
    return duals


def divergence_from_duals(gamma, beta, duals: DualPotentials) -> float:
    return float(np.dot(gamma.weights, duals.u - duals.a) + np.dot(beta.weights, duals.v - duals.b))


def sinkhorn_divergence(gamma, beta, params: SinkhornParams) -> float:
    """``OT(g, b) - OT(g, g)/2 - OT(b, b)/2`` in its discrete dual form."""
    return divergence_from_duals(gamma, beta, solve(gamma, beta, params))


def potential(gamma, beta, duals: DualPotentials, query) -> np.ndarray:
    """The field whose gradient drives mass of ``gamma`` toward ``beta``."""
    q = np.ascontiguousarray(np.atleast_2d(query), dtype=np.float64)
    eps = duals.epsilon
    to_target = _softmin(q, _pts(beta), _logw(beta) + duals.v / eps, eps)
    to_self = _softmin(q, _pts(gamma), _logw(gamma) + duals.a / eps, eps)
    return to_target - to_self


def target_gradient(beta, duals: DualPotentials, query) -> np.ndarray:
    """Gradient of the target half of :func:`potential`."""
    q = np.ascontiguousarray(np.atleast_2d(query), dtype=np.float64)
    eps = duals.epsilon
    return _softmin(q, _pts(beta), _logw(beta) + duals.v / eps, eps, grad=True)[1]


def self_gradient(gamma, a, eps, query) -> np.ndarray:
    """Gradient of the self-correlation half of :func:`potential`."""
    q = np.ascontiguousarray(np.atleast_2d(query), dtype=np.float64)
    return _softmin(q, _pts(gamma), _logw(gamma) + a / eps, eps, grad=True)[1]


def potential_gradient(gamma, beta, duals: DualPotentials, query) -> np.ndarray:
    """Gradient of :func:`potential` at each query point, ``(Q, 3)``."""
    return target_gradient(beta, duals, query) - self_gradient(gamma, duals.a, duals.epsilon, query)


def exact_ot_bruteforce(gamma, beta) -> float:
    """Unregularized OT cost between equal-size uniform sets by enumeration."""
    n = len(gamma.points)
    if n != len(beta.points) or n > 8:
        raise InvalidArgumentError("brute force needs two sets of equal size <= 8")
    for P in (gamma, beta):
        if not np.allclose(P.weights, 1.0 / n, rtol=0, atol=1e-12):
            raise InvalidArgumentError("brute force needs uniform weights")
    C = cost(gamma.points[:, None, :], beta.points[None, :, :])
    perms = np.array(list(itertools.permutations(range(n))))
    totals = C[np.arange(n)[None, :], perms].sum(axis=1)
    return float(totals.min() / n)


def dump_duals(duals: DualPotentials, path) -> None:
    """Write the dual vectors as a whitespace-separated table (debug aid)."""
    with open(path, "w") as fh:
        fh.write(f"# epsilon {duals.epsilon!r} converged {duals.converged} "
                 f"iterations {duals.iterations_used}\n")
        fh.write("# side index dual self_dual\n")
        for side, d, s in (("source", duals.u, duals.a), ("target", duals.v, duals.b)):
            for i, val in enumerate(d):
                sval = "nan" if s is None else repr(float(s[i]))
                fh.write(f"{side} {i} {float(val)!r} {sval}\n")
