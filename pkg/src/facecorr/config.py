"""Pipeline configuration: defaults, ``key = value`` files and overrides."""

import math
from dataclasses import dataclass, fields, replace

from .dense import DenseParams
from .levelset import FillParams
from .preprocess import PreprocessConfig


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline in one flat record.

    Lengths are in mm; ``kq_factor``, ``patch_width`` and the level-set
    steps are multiples of the mesh resolution. ``workers = 0`` means all
    available CPUs.
    """

    # sparse initialisation
    delta: float = math.pi / 36
    subsample_step: int = 4
    # keypoint loop
    t_k: float = 1.2
    kq_factor: float = 2.0
    n_q: int = 80
    t_1: int = 3
    max_iters: int = 10
    patch_width: float = 5.0
    descriptor_radius: float = 5.0
    normalization: str = "pooled"
    # level-set fill; t_a = area_factor * mean triangle area
    area_factor: float = 1.0
    radius_step: float = 1.0
    arc_step: float = 1.0
    fill: bool = True
    # model
    lam: float = 0.8
    eps_f: float = 1e-4
    energy: float = 0.98
    fit_iters: int = 100
    # weight of each region block against the whole face in recognition
    region_weight: float = 1.0
    # preprocessing
    crop_radius: float = 80.0
    grid_spacing: float = 1.0
    smoothing_weight: float = 0.1
    max_pose_iters: int = 10
    # synthetic data
    n_faces: int = 10
    warp_magnitude: float = 4.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        positive = ("delta", "kq_factor", "patch_width", "descriptor_radius", "radius_step",
                    "arc_step", "eps_f", "crop_radius", "grid_spacing", "subsample_step",
                    "max_iters", "fit_iters", "max_pose_iters", "n_faces")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("t_k", "n_q", "t_1", "area_factor", "lam", "smoothing_weight", "region_weight",
                     "warp_magnitude", "workers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.normalization not in ("pooled", "global"):
            raise ValueError("normalization must be 'pooled' or 'global'")
        if not 0 < self.energy <= 1:
            raise ValueError("energy must lie in (0, 1]")

    def dense_params(self):
        return DenseParams(t_k=self.t_k, kq_factor=self.kq_factor, n_q=self.n_q, t_1=self.t_1,
                           max_iters=self.max_iters, patch_width=self.patch_width,
                           descriptor_radius=self.descriptor_radius,
                           normalization=self.normalization, workers=self.workers)

    def fill_params(self):
        return FillParams(kq_factor=self.kq_factor, radius_step=self.radius_step,
                          arc_step=self.arc_step, descriptor_radius=self.descriptor_radius,
                          area_factor=self.area_factor, normalization=self.normalization,
                          workers=self.workers)

    def preprocess_config(self):
        return PreprocessConfig(crop_radius=self.crop_radius, grid_spacing=self.grid_spacing,
                                smoothing_weight=self.smoothing_weight,
                                max_pose_iters=self.max_pose_iters)

    def with_overrides(self, values):
        """Copy with ``values`` (name -> value or string) applied; ``None`` is skipped."""
        types = {f.name: f.type for f in fields(self)}
        changes = {}
        for key, val in values.items():
            if val is None:
                continue
            key = key.replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            changes[key] = _coerce(types[key], val, key)
        return replace(self, **changes)

    def to_text(self):
        """``key = value`` lines that :func:`parse_config_text` reads back exactly."""
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            lines.append(f"{f.name} = {float(val)!r}\n" if f.type is float else f"{f.name} = {val}\n")
        return "".join(lines)


def _coerce(typ, val, key):
    if not isinstance(val, str):
        return typ(val) if typ is not bool else bool(val)
    s = val.strip()
    if typ is str:
        return s
    try:
        if typ is bool:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        return float(s)
    except ValueError:
        raise ValueError(f"bad value for {key}: {val!r}") from None


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (flags)."""
    cfg = PipelineConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = cfg.with_overrides(parse_config_text(fh.read()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
