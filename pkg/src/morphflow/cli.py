"""``morphflow`` command line: reconstruct, extract, register, morph, render,
sequence, and a ``synth`` helper that writes toy scenes to disk.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import flows, io, recon, sinkhorn
from .config import CameraSpec, PipelineConfig, check_t
from .errors import (EmptyShapeError, FormatError, InvalidArgumentError, MorphflowError,
                     NumericalError)
from .grid import union_geometry
from .measure import extract_point_set
from .render import Camera, RaySampling, psnr, render_image

log = logging.getLogger("morphflow")

SCENES = ("source", "target")


class StageError(MorphflowError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# workspace layout

class Workspace:
    """Fixed artifact names so stages can be rerun or resumed."""

    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def _p(self, *parts):
        return os.path.join(self.root, *parts)

    def volume(self, name):
        return self._p(f"{name}_density.mvr"), self._p(f"{name}_color.mvr")

    def has_volume(self, name):
        return all(os.path.exists(p) for p in self.volume(name))

    def points(self, which):
        return self._p(f"{which}.wps")

    @property
    def shapes(self):
        return self._p("shapes.json")

    @property
    def transform(self):
        return self._p("transform.txt")

    @property
    def trace(self):
        return self._p("registration_trace.csv")

    @property
    def frames(self):
        return self._p("frames")

    def debug(self, name):
        os.makedirs(self._p("debug"), exist_ok=True)
        return self._p("debug", name)

    def morph_name(self, t):
        return f"morph_t{t:.3f}"

    def read_shapes(self):
        if not os.path.exists(self.shapes):
            return {}
        with open(self.shapes) as fh:
            return json.load(fh)

    def write_shapes(self, data):
        with open(self.shapes, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def _require(path, what):
    if path is None:
        raise InvalidArgumentError(f"{what} is not configured")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def volume_hash(volume) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(volume.density.values).tobytes())
    h.update(np.ascontiguousarray(volume.color.values).tobytes())
    return h.hexdigest()


def _fmt_t(t):
    return f"{t:.2f}"


def frame_name(t, cam: CameraSpec):
    return f"frame_t{_fmt_t(t)}_az{cam.azimuth:g}_el{cam.elevation:g}.png"


# ---------------------------------------------------------------------------
# stages

def cmd_reconstruct(cfg: PipelineConfig, which: str):
    ws = Workspace(cfg.workspace)
    poses = _require(cfg.path(f"{which}_poses"), f"{which} pose file")
    cams, imgs = io.load_views(poses)
    result = recon.fit(cams, imgs, cfg.recon)
    io.write_volume(*ws.volume(which), result.volume)
    sampling = RaySampling.for_geometry(result.volume.geometry, cams, step=cfg.recon.step)
    rendered = np.stack([render_image(result.volume, c, sampling).rgb for c in cams])
    score = psnr(rendered, np.stack([im.rgb for im in imgs]))
    final = result.losses[-1] if result.losses else float("nan")
    print(f"reconstruct {which}: final loss {final:.6g}, train PSNR {score:.2f} dB, "
          f"{result.elapsed:.1f}s")
    test = cfg.path(f"{which}_test_poses")
    if test is not None and os.path.exists(test):
        tcams, timgs = io.load_views(test)
        tr = np.stack([render_image(result.volume, c, sampling).rgb for c in tcams])
        print(f"reconstruct {which}: held-out PSNR {psnr(tr, np.stack([im.rgb for im in timgs])):.2f} dB")
    return result


def _load_volume(ws, name):
    d, c = ws.volume(name)
    _require(d, f"{name} density volume")
    _require(c, f"{name} color volume")
    return io.read_volume(d, c)


def _alpha_step(cfg, geometry):
    step = cfg.section("render").get("step")
    return step or 0.5 * float(np.linalg.norm(geometry.voxel_size))


def cmd_extract(cfg: PipelineConfig, which: str):
    ws = Workspace(cfg.workspace)
    vol = _load_volume(ws, which)
    ex = cfg.section("extract")
    try:
        P = extract_point_set(vol, alpha_threshold=float(ex["alpha_threshold"]),
                              step_for_alpha=_alpha_step(cfg, vol.geometry),
                              max_points=int(ex["max_points"]))
    except EmptyShapeError as exc:
        raise EmptyShapeError(f"{which} scene: {exc}") from exc
    io.write_point_set(ws.points(which), P)
    shapes = ws.read_shapes()
    shapes[which] = {"mass": P.mass, "points": len(P)}
    ws.write_shapes(shapes)
    print(f"extract {which}: {len(P)} points, alpha mass {P.mass:.6g}")
    return P


def _load_points(ws, which):
    path = _require(ws.points(which), f"{which} point set")
    mass = ws.read_shapes().get(which, {}).get("mass", 1.0)
    return io.read_point_set(path, mass=mass)


def _pair_diameter(S, T):
    both = np.vstack([S.points, T.points])
    return float(np.linalg.norm(both.max(axis=0) - both.min(axis=0)))


def cmd_register(cfg: PipelineConfig, debug=False):
    ws = Workspace(cfg.workspace)
    S, T = _load_points(ws, "source"), _load_points(ws, "target")
    reg = cfg.registration(_pair_diameter(S, T))
    try:
        transform, trace = flows.estimate_rigid(S, T, reg)
    except flows.RegistrationFailedError as exc:
        _write_trace(ws.trace, exc.trace)
        raise
    io.write_transform(ws.transform, transform)
    _write_trace(ws.trace, trace)
    if debug:
        moved = S.with_points(transform.apply(S.points))
        sinkhorn.dump_duals(sinkhorn.solve(moved, T, reg.sinkhorn, strict=False),
                            ws.debug("registration_duals.txt"))
    print(f"register: divergence {trace[0]:.6g} -> {trace[-1]:.6g} in {len(trace) - 1} steps")
    return transform, trace


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "divergence"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def prepare_plan(cfg: PipelineConfig, debug=False):
    """Load every t-independent input of a morph and evaluate both flows."""
    ws = Workspace(cfg.workspace)
    S, T = _load_points(ws, "source"), _load_points(ws, "target")
    src_geo = io.read_grid(ws.volume("source")[0]).geometry
    target = _load_volume(ws, "target")
    transform = io.read_transform(_require(ws.transform, "rigid transform"))
    params = cfg.sinkhorn_params(_pair_diameter(S, T))
    plan = flows.prepare_morph(S, T, target.color, transform, params)
    if debug:
        sinkhorn.dump_duals(plan.duals, ws.debug("morph_duals.txt"))
    geometry = union_geometry(src_geo, target.geometry)
    return plan, geometry, S.mass


def morph_volume(cfg, plan, geometry, mass, t):
    state = plan.state(t)
    return flows.build_morphed_volume(state, geometry, mass, _alpha_step(cfg, geometry),
                                      cfg.section("morph").get("cleanup_threshold"))


def cmd_morph(cfg: PipelineConfig, t_values, debug=False):
    t_values = check_t(t_values)
    ws = Workspace(cfg.workspace)
    plan, geometry, mass = prepare_plan(cfg, debug)
    out = []
    for t in t_values:
        vol = morph_volume(cfg, plan, geometry, mass, t)
        paths = ws.volume(ws.morph_name(t))
        io.write_volume(*paths, vol)
        print(f"morph t={t:g}: wrote {paths[0]}")
        out.append(paths)
    return out


def _sampling(cfg, geometry, cams):
    r = cfg.section("render")
    s = RaySampling.for_geometry(geometry, cams, step=r.get("step"))
    near = s.near if r.get("near") is None else float(r["near"])
    far = s.far if r.get("far") is None else float(r["far"])
    return RaySampling(near, far, s.step)


def orbit_camera(cfg, spec: CameraSpec, geometry):
    r = cfg.section("render")
    w, h = int(r["width"]), int(r["height"])
    focal = 0.5 * w / np.tan(0.5 * float(r["camera_angle_x"]))
    return Camera.orbit(spec.azimuth, spec.elevation, spec.radius, geometry.center, w, h, focal)


def render_volume(cfg, volume, spec: CameraSpec, path):
    cam = orbit_camera(cfg, spec, volume.geometry)
    img = render_image(volume, cam, _sampling(cfg, volume.geometry, [cam]))
    io.write_png(path, img)
    return img


def cmd_render(cfg: PipelineConfig, volume_prefix, spec: CameraSpec, out):
    d, c = volume_prefix + "_density.mvr", volume_prefix + "_color.mvr"
    vol = io.read_volume(_require(d, "density volume"), _require(c, "color volume"))
    t0 = time.perf_counter()
    render_volume(cfg, vol, spec, out)
    print(f"render: wrote {out} ({time.perf_counter() - t0:.2f}s)")


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (MorphflowError, OSError) as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc


def cmd_sequence(cfg: PipelineConfig, debug=False):
    """Run whichever stages are missing, then render every (t, camera) frame."""
    ws = Workspace(cfg.workspace)
    t_values, cams = cfg.t_values, cfg.cameras
    for which in SCENES:
        if not ws.has_volume(which):
            _stage(f"reconstruct {which}", cmd_reconstruct, cfg, which)
        if not os.path.exists(ws.points(which)) or which not in ws.read_shapes():
            _stage(f"extract {which}", cmd_extract, cfg, which)
    if not os.path.exists(ws.transform):
        _stage("register", cmd_register, cfg, debug)
    plan, geometry, mass = _stage("morph", prepare_plan, cfg, debug)
    os.makedirs(ws.frames, exist_ok=True)
    rows = []
    for t in t_values:
        vol = _stage("morph", morph_volume, cfg, plan, geometry, mass, t)
        for spec in cams:
            digest = volume_hash(vol)
            path = os.path.join(ws.frames, frame_name(t, spec))
            t0 = time.perf_counter()
            _stage("render", render_volume, cfg, vol, spec, path)
            dt = time.perf_counter() - t0
            log.info("frame %s rendered in %.3fs (volume %s)", os.path.basename(path), dt, digest[:12])
            rows.append([_fmt_t(t), f"{spec.azimuth:g}", f"{spec.elevation:g}", f"{spec.radius:g}",
                         os.path.basename(path), digest])
    with open(os.path.join(ws.frames, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "azimuth", "elevation", "radius", "file", "volume_sha256"])
        w.writerows(rows)
    print(f"sequence: {len(rows)} frames in {ws.frames}")
    return rows


# ---------------------------------------------------------------------------
# toy data

def _synth_spec(kind, ring, resolution):
    if kind == "sphere":
        return recon.sphere_scene(ring, resolution)
    if kind == "box":
        return recon.SyntheticSceneSpec(
            [recon.Primitive("box", (0.1, -0.05, 0.0), (0.45, 0.3, 0.25), (0.2, 0.4, 0.9), 40.0)],
            ring, resolution=(resolution,) * 3)
    if kind == "toy":
        return recon.toy_scene(ring, resolution)
    raise InvalidArgumentError(f"unknown scene {kind!r}")


def cmd_synth(kind, out, views=20, holdout=0, size=100, resolution=95, radius=3.0, elevation=30.0):
    ring = recon.CameraRing(views, radius, elevation, size, size)
    spec = _synth_spec(kind, ring, resolution)
    volume, pairs = recon.make_synthetic_scene(spec)
    io.write_views(os.path.join(out, "train"), [c for c, _ in pairs], [i for _, i in pairs],
                   ring.camera_angle_x)
    if holdout:
        held = recon.CameraRing(holdout, radius, elevation - 10.0, size, size,
                                azimuth_offset=180.0 / views + 7.0)
        cams = held.cameras()
        io.write_views(os.path.join(out, "test"), cams, recon.render_views(volume, cams),
                       held.camera_angle_x)
    io.write_volume(os.path.join(out, "gt_density.mvr"), os.path.join(out, "gt_color.mvr"), volume)
    print(f"synth {kind}: {views} views in {out}")


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="morphflow", description=__doc__.splitlines()[0])
    p.add_argument("--debug", action="store_true", help="verbose logs and dual dumps")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="pipeline TOML file")
        sp.add_argument("--workspace", help="override paths.workspace")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
        return sp

    sp = with_config(sub.add_parser("reconstruct", help="fit a volume to posed images"))
    sp.add_argument("--which", choices=SCENES + ("both",), default="both")
    sp = with_config(sub.add_parser("extract", help="volume to weighted point set"))
    sp.add_argument("--which", choices=SCENES + ("both",), default="both")
    with_config(sub.add_parser("register", help="estimate the rigid transform"))
    sp = with_config(sub.add_parser("morph", help="write morphed volumes"))
    sp.add_argument("--t", type=float, action="append", help="blending weight (repeatable)")
    sp = with_config(sub.add_parser("render", help="render one volume to PNG"))
    sp.add_argument("--volume", required=True, help="prefix of <prefix>_density.mvr/_color.mvr")
    sp.add_argument("--azimuth", type=float, default=30.0)
    sp.add_argument("--elevation", type=float, default=30.0)
    sp.add_argument("--radius", type=float, default=4.0)
    sp.add_argument("--out", required=True)
    with_config(sub.add_parser("sequence", help="render the full (t, camera) frame grid"))
    sp = sub.add_parser("synth", help="write a procedural toy scene with posed views")
    sp.add_argument("--scene", choices=("sphere", "box", "toy"), default="toy")
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", type=int, default=20)
    sp.add_argument("--holdout", type=int, default=0)
    sp.add_argument("--size", type=int, default=100)
    sp.add_argument("--resolution", type=int, default=95)
    return p


def _config(args):
    overrides = list(args.set)
    if args.workspace:
        overrides.append(f"paths.workspace={json.dumps(args.workspace)}")
    return PipelineConfig.load(args.config, overrides)


def run(args):
    if args.command == "synth":
        return cmd_synth(args.scene, args.out, args.views, args.holdout, args.size, args.resolution)
    cfg = _config(args)
    which = getattr(args, "which", None)
    targets = SCENES if which == "both" else (which,)
    if args.command == "reconstruct":
        for w in targets:
            cmd_reconstruct(cfg, w)
    elif args.command == "extract":
        for w in targets:
            cmd_extract(cfg, w)
    elif args.command == "register":
        cmd_register(cfg, args.debug)
    elif args.command == "morph":
        cmd_morph(cfg, args.t if args.t else cfg.t_values, args.debug)
    elif args.command == "render":
        cmd_render(cfg, args.volume, CameraSpec(args.azimuth, args.elevation, args.radius), args.out)
    elif args.command == "sequence":
        cmd_sequence(cfg, args.debug)


def exit_code(exc) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return 1 if isinstance(cause, NumericalError) else 2


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (MorphflowError, OSError) as exc:
        print(f"morphflow {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
