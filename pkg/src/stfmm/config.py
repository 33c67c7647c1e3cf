"""Run configuration: validated fields, JSON file round-trip, flag overrides."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .quadrature import QuadratureSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # mesh: a triangle file, or a generated cube surface
    mesh: str | None = None
    cube_subdiv: int = 4
    t_end: float = 0.25
    timesteps: int = 16
    slices: int | None = None
    alpha: float = 1.0
    # FMM
    n_max: int = 80
    c_st: float = 0.9
    n_tr: int = 5
    m_t: int = 6
    m_x: int = 6
    grain: int = 4
    quadrature: dict = field(default_factory=lambda: asdict(QuadratureSpec()))
    # execution
    ranks: int = 1
    workers: int = 1
    transport: str = "inproc"
    threshold: float | None = None
    # solve
    tol: float = 1e-8
    max_iter: int = 500
    restart: int | None = None
    seed: int = 0
    dense_cap: int = 16384
    # outputs
    trace_out: str | None = None
    report_out: str | None = None
    solution_out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        pos_int = ("cube_subdiv", "timesteps", "n_max", "ranks", "max_iter", "grain", "dense_cap")
        for name in pos_int:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("n_tr", "m_t", "m_x", "workers", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        for name in ("t_end", "alpha", "c_st", "tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if self.slices is not None and not 1 <= self.slices <= self.timesteps:
            raise ConfigError(f"slices must lie in [1, timesteps={self.timesteps}]")
        if self.slices is not None and self.slices < self.ranks:
            raise ConfigError(f"{self.slices} slices cannot feed {self.ranks} ranks")
        if self.restart is not None and self.restart < 1:
            raise ConfigError("restart must be >= 1")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"transport must be 'inproc' or 'tcp', got {self.transport!r}")
        if self.threshold is not None and not self.threshold >= 0:
            raise ConfigError("threshold must be >= 0 (or inf)")
        if self.workers == 0 and self.threshold is not None and math.isinf(self.threshold):
            raise ConfigError("threshold=inf needs at least one worker")
        try:
            QuadratureSpec(**self.quadrature)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad quadrature spec: {exc}") from exc

    # ---- derived objects ----------------------------------------------------
    def quadrature_spec(self):
        return QuadratureSpec(**self.quadrature)

    def expansion_orders(self):
        from .kernel import ExpansionOrders

        return ExpansionOrders(self.m_t, self.m_x, self.alpha)

    def slice_bounds(self):
        if self.slices is None:
            return None
        from .mesh import partition_time_slices

        return partition_time_slices(self.timesteps, self.slices).bounds

    def build_mesh(self):
        from .mesh import build_tensor_mesh, generate_cube_surface, load_spatial_mesh

        space = load_spatial_mesh(self.mesh) if self.mesh else generate_cube_surface(self.cube_subdiv)
        return build_tensor_mesh(space, self.t_end, self.timesteps)

    # ---- serialization -----------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        if d["threshold"] is not None and math.isinf(d["threshold"]):
            d["threshold"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if isinstance(d.get("threshold"), str):
            d["threshold"] = float(d["threshold"])
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())

    def override(self, **kw):
        """New config with the non-None entries of ``kw`` replaced."""
        d = asdict(self)
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(**d)
