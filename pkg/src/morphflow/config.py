"""Pipeline configuration: one TOML file plus ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import InvalidArgumentError
from .flows import RegistrationConfig
from .recon import ReconConfig
from .sinkhorn import SinkhornParams

DEFAULTS = {
    "paths": {"source_poses": None, "target_poses": None, "workspace": "workspace"},
    "recon": {},
    "extract": {"alpha_threshold": 0.01, "max_points": 20000},
    "sinkhorn": {"epsilon_relative": 1e-4, "max_iterations": 500, "tolerance_relative": 1e-6},
    "registration": {"iterations": 200, "step_size": 1.0, "rotation_step": 3.0,
                     "tolerance": 1e-4, "epsilon_relative": 1e-2, "tolerance_relative": 1e-2,
                     "max_iterations": 500},
    "render": {"width": 200, "height": 200, "camera_angle_x": 0.6911112070083618,
               "near": None, "far": None, "step": None},
    "morph": {"t": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
              "cameras": [{"azimuth": 30.0, "elevation": 30.0, "radius": 4.0},
                          {"azimuth": 150.0, "elevation": 30.0, "radius": 4.0},
                          {"azimuth": 270.0, "elevation": 30.0, "radius": 4.0}],
              "cleanup_threshold": None},
}

_RECON_KEYS = {"bbox", "coarse_resolution", "fine_factor", "iterations_coarse", "iterations_fine",
               "ray_batch_size", "learning_rate", "seed", "step", "occupancy_mask", "log_every"}


def _merge(base, extra, where=""):
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def parse_override(text):
    """``section.key=value`` with ``value`` parsed as a TOML value when possible."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise InvalidArgumentError(f"override must look like section.key=value, got {text!r}")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs
    return section, key.strip(), value


@dataclass
class CameraSpec:
    azimuth: float
    elevation: float
    radius: float

    def __post_init__(self):
        self.azimuth = float(self.azimuth)
        self.elevation = float(self.elevation)
        self.radius = float(self.radius)
        if not 0.0 <= self.azimuth < 360.0:
            raise InvalidArgumentError(f"azimuth must lie in [0, 360), got {self.azimuth}")
        if not -90.0 < self.elevation < 90.0:
            raise InvalidArgumentError(f"elevation must lie in (-90, 90), got {self.elevation}")
        if not self.radius > 0:
            raise InvalidArgumentError("camera radius must be positive")


def check_t(values):
    out = [float(t) for t in values]
    for t in out:
        if not 0.0 <= t <= 1.0:
            raise InvalidArgumentError(f"blending weight t must lie in [0, 1], got {t}")
    return out


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: str = "."

    @classmethod
    def load(cls, path=None, overrides=()):
        data = {}
        base = "."
        if path is not None:
            try:
                with open(path, "rb") as fh:
                    data = tomllib.load(fh)
            except OSError as exc:
                raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
            except tomllib.TOMLDecodeError as exc:
                raise InvalidArgumentError(f"{path}: {exc}") from exc
            base = os.path.dirname(os.path.abspath(path))
        raw = _merge(DEFAULTS, data)
        for text in overrides:
            section, key, value = parse_override(text)
            raw.setdefault(section, {})[key] = value
        cfg = cls(raw, base)
        cfg.validate()
        return cfg

    def section(self, name) -> dict:
        return self.raw.get(name, {})

    def path(self, key):
        val = self.section("paths").get(key)
        if val is None:
            return None
        return val if os.path.isabs(val) else os.path.normpath(os.path.join(self.base_dir, val))

    @property
    def workspace(self):
        return self.path("workspace")

    def validate(self):
        unknown = set(self.section("recon")) - _RECON_KEYS
        if unknown:
            raise InvalidArgumentError(f"unknown recon settings: {sorted(unknown)}")
        self.t_values
        self.cameras
        self.recon

    @property
    def recon(self) -> ReconConfig:
        kw = dict(self.section("recon"))
        if "bbox" in kw:
            kw["bbox"] = tuple(tuple(map(float, b)) for b in kw["bbox"])
        return ReconConfig(**kw)

    @property
    def t_values(self):
        return check_t(self.section("morph").get("t", []))

    @property
    def cameras(self):
        return [CameraSpec(**c) for c in self.section("morph").get("cameras", [])]

    def sinkhorn_params(self, diameter) -> SinkhornParams:
        s = self.section("sinkhorn")
        eps = s.get("epsilon") or s["epsilon_relative"] * diameter ** 2
        return SinkhornParams(epsilon=eps, max_iterations=int(s["max_iterations"]),
                              tolerance=s["tolerance_relative"] * eps)

    def registration(self, diameter) -> RegistrationConfig:
        s = self.section("registration")
        eps = s.get("epsilon") or s["epsilon_relative"] * diameter ** 2
        params = SinkhornParams(epsilon=eps, max_iterations=int(s["max_iterations"]),
                                tolerance=s["tolerance_relative"] * eps)
        return RegistrationConfig(iterations=int(s["iterations"]), step_size=float(s["step_size"]),
                                  rotation_step=float(s["rotation_step"]), sinkhorn=params,
                                  tolerance=float(s["tolerance"]))
