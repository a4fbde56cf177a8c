"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--grid 64] [--rays 4096]
"""
import argparse
import time

import numpy as np

from morphflow import kernels
from morphflow.grid import GridGeometry
from morphflow.render import Camera, RaySampling, _sample_span, generate_rays


def best_of(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def cases(args, rng):
    n = args.grid
    geo = GridGeometry((-1, -1, -1), (1, 1, 1), (n, n, n))
    dens = rng.normal(0.0, 2.0, geo.shape)
    col = rng.normal(size=geo.shape + (3,))
    side = int(np.sqrt(args.rays))
    cam = Camera.orbit(30.0, 30.0, 3.0, (0, 0, 0), side, side, side * 1.2)
    o, d = generate_rays(cam)
    s = RaySampling.for_geometry(geo, [cam])
    t0, ns = _sample_span(geo, o, d, s)
    tgt = rng.uniform(size=(len(o), 3))
    pts = rng.uniform(-1, 1, (args.points, 3))
    w = rng.uniform(size=args.points)
    vals = rng.uniform(size=(args.points, 3))
    x, y = rng.normal(size=(args.softmin, 3)), rng.normal(size=(args.softmin, 3))
    h = rng.normal(size=args.softmin)

    def forward(mod):
        return lambda: mod.render_forward(dens, col, geo.lo, geo.inv_voxel, o, d, t0, ns,
                                          s.step, s.stop_transmittance)

    def backward(mod):
        def run():
            gd, gc = np.zeros(geo.shape), np.zeros(geo.shape + (3,))
            mod.render_backward(dens, col, geo.lo, geo.inv_voxel, o, d, t0, ns, s.step,
                                s.stop_transmittance, tgt, 1.0, gd, gc)
        return run

    def splat(mod):
        def run():
            m, v = np.zeros(geo.shape), np.zeros(geo.shape + (3,))
            mod.splat_vector(pts, w, vals, geo.lo, geo.inv_voxel, m, v)
        return run

    def softmin(mod):
        out, g = np.empty(len(x)), np.empty((len(x), 3))
        return lambda: mod.softmin(x, y, h, 0.1, out, g)

    return [(f"render_forward  {len(o)} rays", forward),
            (f"render_backward {len(o)} rays", backward),
            (f"splat_vector    {args.points} points", splat),
            (f"softmin         {args.softmin}x{args.softmin}", softmin)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--points", type=int, default=200000)
    p.add_argument("--softmin", type=int, default=2000)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    names = sorted(backends)
    print(f"{'kernel':36s}" + "".join(f"{n:>12s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, make in cases(args, rng):
        t = {n: best_of(make(backends[n]), args.repeat) for n in names}
        row = f"{label:36s}" + "".join(f"{t[n]:11.4f}s" for n in names)
        if len(names) > 1:
            row += f"{t['python'] / t['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
