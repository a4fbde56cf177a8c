import os
import subprocess
import sys

import numpy as np
import pytest

from morphflow import kernels
from morphflow.grid import ColorGrid, GridGeometry, ScalarGrid, Volume
from morphflow.render import Camera, RayBatch, RaySampling, generate_rays, grad_photometric, render_rays

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")


def on_backend(name, monkeypatch, fn):
    mod = BACKENDS[name]
    for attr in ("render_forward", "render_backward", "splat_scalar", "splat_vector",
                 "softmin", "adam_step"):
        monkeypatch.setattr(kernels, attr, getattr(mod, attr))
    return fn()


@pytest.fixture
def scene(rng):
    geo = GridGeometry((-1, -1, -1), (1, 1, 1), (7, 8, 6))
    vol = Volume(ScalarGrid(geo, rng.normal(0.5, 1.5, geo.shape)),
                 ColorGrid(geo, rng.normal(size=geo.shape + (3,))))
    cam = Camera.look_at((2.5, -1.5, 1.2), (0, 0, 0), 12, 10, 14.0)
    o, d = generate_rays(cam)
    batch = RayBatch(o, d, rng.uniform(size=(len(o), 3)))
    return vol, batch, RaySampling(0.5, 6.0, 0.05)


def test_python_backend_always_available():
    assert BACKENDS["python"].BACKEND == "python"
    assert kernels.BACKEND in BACKENDS


@needs_compiled
class TestParity:
    def test_render_forward(self, scene, monkeypatch):
        vol, batch, s = scene
        out = [on_backend(b, monkeypatch, lambda: render_rays(vol, batch.origins, batch.dirs, s))
               for b in ("python", "cython")]
        assert np.allclose(out[0], out[1], rtol=1e-10, atol=1e-12)

    def test_render_backward(self, scene, monkeypatch):
        vol, batch, s = scene
        out = [on_backend(b, monkeypatch, lambda: grad_photometric(vol, batch, s))
               for b in ("python", "cython")]
        assert np.isclose(out[0][0], out[1][0], rtol=1e-10)
        for k in (1, 2, 3):
            assert np.allclose(out[0][k], out[1][k], rtol=1e-9, atol=1e-12)

    def test_splat(self, rng):
        pts = rng.uniform(-1.2, 1.2, (300, 3))
        w = rng.uniform(size=300)
        vals = rng.uniform(size=(300, 3))
        lo, inv = np.array([-1.0, -1.0, -1.0]), np.array([2.5, 3.0, 2.0])
        res = []
        for b in ("python", "cython"):
            m = np.zeros((6, 7, 5))
            mv, vv = np.zeros((6, 7, 5)), np.zeros((6, 7, 5, 3))
            BACKENDS[b].splat_scalar(pts, w, lo, inv, m)
            BACKENDS[b].splat_vector(pts, w, vals, lo, inv, mv, vv)
            res.append((m, mv, vv))
        for a, c in zip(*res):
            assert np.allclose(a, c, rtol=1e-12, atol=1e-14)

    def test_stop_transmittance_matches(self, scene, monkeypatch):
        vol, batch, _ = scene
        s = RaySampling(0.5, 6.0, 0.05, stop_transmittance=1e-2)
        out = [on_backend(b, monkeypatch, lambda: render_rays(vol, batch.origins, batch.dirs, s))
               for b in ("python", "cython")]
        assert np.allclose(out[0], out[1], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_adam_step_matches_reference(name, rng):
    p = rng.normal(size=50)
    g = rng.normal(size=50)
    m, v = rng.normal(size=50) * 0.1, rng.uniform(size=50) * 0.1
    lr, b1, b2, eps, t = 0.1, 0.9, 0.999, 1e-8, 5
    m_ref = b1 * m + (1 - b1) * g
    v_ref = b2 * v + (1 - b2) * g * g
    p_ref = p - lr * (m_ref / (1 - b1 ** t)) / (np.sqrt(v_ref / (1 - b2 ** t)) + eps)
    BACKENDS[name].adam_step(p, g, m, v, lr, b1, b2, eps, 1 - b1 ** t, 1 - b2 ** t)
    assert np.allclose(m, m_ref, rtol=1e-14) and np.allclose(v, v_ref, rtol=1e-14)
    assert np.allclose(p, p_ref, rtol=1e-12)


def test_env_switch_forces_python():
    env = dict(os.environ, MORPHFLOW_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from morphflow import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
