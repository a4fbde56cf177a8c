import numpy as np
import pytest

from morphflow.errors import (DegenerateProjectionError, InvalidArgumentError,
                              RegistrationFailedError, StalledDescentError)
from morphflow.flows import (RegistrationConfig, RigidTransform, blend_colors,
                             build_morphed_volume, estimate_rigid, fill_empty_colors, morph_points,
                             ot_flow, prepare_morph, project_rotation, query_colors, rigid_flow)
from morphflow.grid import ColorGrid, GridGeometry, trilinear_splat
from morphflow.measure import WeightedPointSet
from morphflow.render import density_to_alpha, sigmoid, softplus
from morphflow.sinkhorn import SinkhornParams, sinkhorn_divergence

from helpers import random_rotation, rotation, toy_shape


def dirac(x):
    return WeightedPointSet(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])


def haar_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1)], 1)


class TestRigidTransform:
    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidArgumentError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(InvalidArgumentError):
            RigidTransform(2 * np.eye(3))

    def test_inverse_and_text(self, rng):
        tr = RigidTransform(random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(5, 3))
        assert np.allclose(tr.inverse().apply(tr.apply(x)), x, atol=1e-12)
        back = RigidTransform.from_text(tr.to_text())
        assert np.allclose(back.rotation, tr.rotation, atol=1e-15)
        assert np.array_equal(back.translation, tr.translation)
        with pytest.raises(InvalidArgumentError):
            RigidTransform.from_text("1 2 3")


class TestProjectRotation:
    def test_fixed_points(self, rng):
        assert np.allclose(project_rotation(np.eye(3)), np.eye(3), atol=1e-15)
        R = random_rotation(rng)
        assert np.max(np.abs(project_rotation(R) - R)) <= 1e-12

    def test_reflection_yields_proper_rotation(self, rng):
        M = rng.normal(size=(3, 3))
        if np.linalg.det(M) > 0:
            M[:, 0] *= -1
        R = project_rotation(M)
        assert np.isclose(np.linalg.det(R), 1.0) and np.allclose(R.T @ R, np.eye(3))

    def test_maximality_over_random_rotations(self, rng):
        Q = haar_rotations(rng, 10000)
        for _ in range(3):
            M = rng.normal(size=(3, 3))
            best = np.trace(project_rotation(M).T @ M)
            others = np.einsum("nij,ij->n", Q, M)
            assert best >= others.max() - 1e-12

    def test_singular(self):
        with pytest.raises(DegenerateProjectionError):
            project_rotation(np.diag([1.0, 1.0, 0.0]))


@pytest.fixture(scope="module")
def shape():
    return WeightedPointSet.uniform(toy_shape(400, seed=3))


class TestRegistration:
    def test_identical_is_identity(self, shape):
        tr, trace = estimate_rigid(shape, shape)
        assert np.linalg.norm(tr.rotation - np.eye(3)) <= 1e-3
        assert np.linalg.norm(tr.translation) <= 1e-3 * shape.diameter
        assert trace[-1] <= trace[0]

    @pytest.mark.parametrize("axis,deg,z", [((1, 2, 0.5), 25.0, (0.1, -0.15, 0.05)),
                                            ((0, 0, 1), 30.0, (-0.2, 0.0, 0.0)),
                                            ((1, -1, 1), 12.0, (0.0, 0.1, 0.1))])
    def test_recovers_ground_truth(self, shape, axis, deg, z):
        R0 = rotation(axis, np.radians(deg))
        z0 = np.array(z) * shape.diameter
        T = shape.with_points(shape.points @ R0.T + z0)
        tr, trace = estimate_rigid(shape, T)
        assert np.linalg.norm(tr.rotation - R0) <= 1e-2
        assert np.linalg.norm(tr.translation - z0) <= 1e-2 * shape.diameter
        assert trace[-1] <= trace[0]

    def test_nonconvergence_raises_with_trace(self, shape):
        T = shape.with_points(shape.points + 0.3)
        cfg = RegistrationConfig(sinkhorn=SinkhornParams(1e-4, max_iterations=2))
        with pytest.raises(RegistrationFailedError) as err:
            estimate_rigid(shape, T, cfg)
        assert isinstance(err.value.trace, list)

    def test_huge_steps_stall(self, shape):
        R0 = rotation((1, 2, 0.5), np.radians(25))
        T = shape.with_points(shape.points @ R0.T + 0.1 * shape.diameter)
        with pytest.raises(StalledDescentError):
            estimate_rigid(shape, T, RegistrationConfig(step_size=1000.0, rotation_step=1000.0,
                                                        iterations=60))

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            RegistrationConfig(iterations=0)
        with pytest.raises(InvalidArgumentError):
            RegistrationConfig(step_size=0.0)


class TestFlows:
    def test_rigid_flow(self, rng):
        S = WeightedPointSet.uniform(rng.normal(size=(30, 3)))
        z = np.array([0.5, -1.0, 2.0])
        assert np.all(rigid_flow(S, RigidTransform(np.eye(3), z), 0.0) == 0)
        assert np.allclose(rigid_flow(S, RigidTransform(np.eye(3), z), 1.0), z)
        tr = RigidTransform(random_rotation(rng), z)
        assert np.allclose(rigid_flow(S, tr, 0.5), 0.5 * rigid_flow(S, tr, 1.0), rtol=0, atol=1e-12)

    def test_rigid_flow_preserves_distances(self, rng):
        S = WeightedPointSet.uniform(rng.normal(size=(40, 3)))
        tr = RigidTransform(random_rotation(rng), rng.normal(size=3))
        d0 = np.linalg.norm(S.points[:, None] - S.points[None], axis=-1)
        off = ~np.eye(40, dtype=bool)
        # the intermediate motion is only rigid at the endpoints, so check those
        for t in (0.0, 1.0):
            p = S.points + rigid_flow(S, tr, t)
            d = np.linalg.norm(p[:, None] - p[None], axis=-1)
            assert np.max(np.abs(d[off] - d0[off]) / d0[off]) <= 1e-9

    def test_invalid_t(self, rng):
        S = WeightedPointSet.uniform(rng.normal(size=(3, 3)))
        for t in (-0.1, 1.5, np.nan):
            with pytest.raises(InvalidArgumentError):
                rigid_flow(S, RigidTransform(), t)

    def test_ot_flow_dirac(self):
        x, y = dirac([0.1, 0.2, 0.3]), dirac([1.0, -0.5, 0.0])
        p = SinkhornParams(0.05)
        assert np.all(ot_flow(x, RigidTransform(), y, 0.0, p) == 0)
        g = ot_flow(x, RigidTransform(), y, 1.0, p)
        assert np.allclose(x.points + g, y.points, atol=1e-12)

    def test_ot_flow_self_field_vanishes(self):
        S = WeightedPointSet.uniform(toy_shape(300, seed=8))
        p = SinkhornParams(1e-2 * S.diameter ** 2)
        g = ot_flow(S, RigidTransform(), S, 1.0, p)
        assert np.max(np.linalg.norm(g, axis=1)) <= 1e-5 * S.diameter

    def test_linear_in_t(self, rng):
        S = WeightedPointSet.uniform(toy_shape(200, seed=1))
        T = WeightedPointSet.uniform(toy_shape(150, seed=2) + 0.2)
        p = SinkhornParams(1e-2 * 9.0)
        tr = RigidTransform(rotation((0, 0, 1), 0.3), [0.1, 0.0, 0.0])
        g1 = ot_flow(S, tr, T, 1.0, p)
        for t in (0.2, 0.7):
            assert np.max(np.abs(ot_flow(S, tr, T, t, p) - t * g1)) <= 1e-12
            assert np.max(np.abs(rigid_flow(S, tr, t) - t * rigid_flow(S, tr, 1.0))) <= 1e-12


class TestMorphPoints:
    def test_state_contract(self, rng):
        S = WeightedPointSet.uniform(rng.normal(size=(25, 3)), colors=rng.uniform(size=(25, 3)))
        f, g = rng.normal(size=(2, 25, 3))
        s0 = morph_points(S, f, g, 0.0)
        assert np.array_equal(s0.morphed_points, S.points)
        for t in (0.3, 1.0):
            st = morph_points(S, f, g, t)
            assert np.array_equal(st.morphed_points, S.points + t * f + t * g)
            assert np.array_equal(st.weights, S.weights)
        with pytest.raises(InvalidArgumentError):
            morph_points(S, f[:3], g, 0.5)
        with pytest.raises(InvalidArgumentError):
            morph_points(S, f, g, 2.0)

    def test_immutable(self, rng):
        S = WeightedPointSet.uniform(rng.normal(size=(3, 3)))
        st = morph_points(S, np.zeros((3, 3)), np.zeros((3, 3)), 0.5)
        with pytest.raises(Exception):
            st.t = 0.2

    def test_dirac_endpoint(self):
        x, y = dirac([0.0, 0.0, 0.0]), dirac([0.4, 0.3, -0.2])
        geo = GridGeometry((-1, -1, -1), (1, 1, 1), (5, 5, 5))
        plan = prepare_morph(x, y, ColorGrid.full(geo), RigidTransform(), SinkhornParams(0.05))
        assert np.allclose(plan.state(1.0).morphed_points, y.points, atol=1e-12)
        assert np.array_equal(plan.state(0.0).morphed_points, x.points)

    def test_mass_invariance(self):
        S = WeightedPointSet.uniform(toy_shape(200, seed=4))
        T = WeightedPointSet.uniform(toy_shape(180, seed=5) + 0.1)
        geo = GridGeometry((-2, -2, -2), (3, 3, 3), (6, 6, 6))
        plan = prepare_morph(S, T, ColorGrid.full(geo), RigidTransform(), SinkhornParams(0.1))
        for t in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
            assert abs(plan.state(t).weights.sum() - 1.0) <= 1e-12


class TestColors:
    def test_blend_endpoints_and_midpoint(self):
        geo = GridGeometry((0, 0, 0), (1, 1, 1), (3, 3, 3))
        blue = ColorGrid(geo, np.broadcast_to(np.array([-30.0, -30.0, 30.0]), geo.shape + (3,)).copy())
        src = np.array([[1.0, 0.0, 0.0]])
        end = np.array([[0.5, 0.5, 0.5]])
        assert np.allclose(blend_colors(src, blue, end, 0.0), src)
        assert np.allclose(blend_colors(src, blue, end, 1.0), [[0, 0, 1]], atol=1e-8)
        assert np.allclose(blend_colors(src, blue, end, 0.5), [[0.5, 0, 0.5]], atol=1e-8)

    def test_outside_queries_black(self):
        geo = GridGeometry((0, 0, 0), (1, 1, 1), (3, 3, 3))
        grid = ColorGrid.full(geo, 2.0)
        assert np.all(query_colors(grid, [[2.0, 0.5, 0.5]]) == 0)
        assert np.allclose(blend_colors([[0.6, 0.6, 0.6]], grid, [[2.0, 0.5, 0.5]], 0.5), 0.3)

    def test_fill_empty_colors(self):
        rgb = np.zeros((4, 1, 1, 3))
        rgb[0, 0, 0] = [1.0, 0.0, 0.0]
        occ = np.zeros((4, 1, 1), dtype=bool)
        occ[0] = True
        out = fill_empty_colors(rgb, occ)
        assert np.allclose(out[:3, 0, 0], [1, 0, 0]) and np.allclose(out[3, 0, 0], 0.5)


class TestBuildVolume:
    step = 0.05

    def test_single_point_node(self):
        geo = GridGeometry((0, 0, 0), (2, 2, 2), (3, 3, 3))
        S = WeightedPointSet(np.array([[1.0, 1.0, 1.0]]), [1.0], colors=[[0.8, 0.3, 0.1]])
        st = morph_points(S, np.zeros((1, 3)), np.zeros((1, 3)), 0.0)
        vol = build_morphed_volume(st, geo, 0.5, self.step)
        alpha = density_to_alpha(softplus(vol.density.values), self.step)
        assert np.isclose(alpha[1, 1, 1], 0.5)
        mask = np.ones(geo.shape, dtype=bool)
        mask[1, 1, 1] = False
        assert np.all(alpha[mask] < 1e-12)
        assert np.allclose(sigmoid(vol.color.values[1, 1, 1]), [0.8, 0.3, 0.1])

    def test_mass_matches(self, rng):
        geo = GridGeometry((-1, -1, -1), (1, 1, 1), (9, 9, 9))
        pts = rng.uniform(-0.8, 0.8, (500, 3))
        S = WeightedPointSet.uniform(pts, colors=rng.uniform(size=(500, 3)))
        st = morph_points(S, np.zeros_like(pts), np.zeros_like(pts), 0.0)
        total = 3.7
        splat = trilinear_splat(st.morphed_points, st.weights * total, geo).values
        assert abs(splat.sum() - total) <= 1e-9 * total
        vol = build_morphed_volume(st, geo, total, self.step)
        alpha = density_to_alpha(softplus(vol.density.values), self.step)
        low = splat < 0.5
        assert np.allclose(alpha[low], splat[low], rtol=1e-6, atol=1e-12)

    def test_deterministic_and_clamped(self, rng):
        geo = GridGeometry((0, 0, 0), (1, 1, 1), (4, 4, 4))
        pts = np.full((10, 3), 0.0)
        S = WeightedPointSet.uniform(pts)
        st = morph_points(S, np.zeros_like(pts), np.zeros_like(pts), 0.0)
        a = build_morphed_volume(st, geo, 50.0, self.step)
        b = build_morphed_volume(st, geo, 50.0, self.step)
        assert np.array_equal(a.density.values, b.density.values)
        assert np.all(np.isfinite(a.density.values))
        top = density_to_alpha(softplus(a.density.values[0, 0, 0]), self.step)
        assert np.isclose(top, 1 - 1e-6, rtol=0, atol=1e-9)

    def test_cleanup_threshold(self):
        geo = GridGeometry((0, 0, 0), (1, 1, 1), (2, 2, 2))
        S = WeightedPointSet(np.array([[0.0, 0, 0], [1.0, 1, 1]]), [0.99999, 0.00001])
        st = morph_points(S, np.zeros((2, 3)), np.zeros((2, 3)), 0.0)
        vol = build_morphed_volume(st, geo, 1.0, self.step, cleanup_threshold=1e-4)
        alpha = density_to_alpha(softplus(vol.density.values), self.step)
        assert alpha[1, 1, 1] < 1e-12 and alpha[0, 0, 0] > 0.5


def test_endpoint_contraction_small():
    S = WeightedPointSet.uniform(toy_shape(300, seed=11))
    T = WeightedPointSet.uniform(toy_shape(250, seed=12) * 0.8 + 0.3)
    both = np.vstack([S.points, T.points])
    p = SinkhornParams(1e-3 * float(np.sum((both.max(0) - both.min(0)) ** 2)))
    geo = GridGeometry(both.min(0) - 0.5, both.max(0) + 0.5, (6, 6, 6))
    plan = prepare_morph(S, T, ColorGrid.full(geo), RigidTransform(), p)
    end = S.with_points(plan.endpoint_points)
    assert sinkhorn_divergence(end, T, p) <= 0.05 * sinkhorn_divergence(S, T, p)
