"""Problem configuration: TOML schema, defaults and validation.

Schema (every key optional unless marked required)::

    [domain]       width*, height*, nx*, ny*, max_total_levels (0)
    [material]     E0 (1.0), nu (0.3), rho_min (1e-3)
    [problem]      volume_fraction*, filter_radius (= amr.radius)
    [[loads]]      x, y, component* ("x"|"y"), magnitude*
    [[fixed]]      x, y, component ("both"), value (0.0)
    [amr]          mode ("none"|"dynamic"|"refine_only_static"), radius,
                   rho_s (0.5), min_steps_between (5), max_steps_between (10),
                   change_tol (0.01), trigger ("design"|"compliance"),
                   compliance_tol (0.01)
    [oc]           move (0.2), eta (0.5), bisection_tol (1e-6)
    [solver]       tol (1e-8), maxit (0 = automatic)
    [continuation] p_start (1.0), p_end (3.0), p_step (0.5), steps_per_stage (30)
    [run]          max_steps (1000), convergence_tol (0.01), seed (0),
                   max_steps_per_level (300)
    [output]       dir ("out")

Lengths are in domain units. ``amr.radius`` defaults to 2.5 finest element
sizes. At least one load and one fixed entry are required.
"""
from __future__ import annotations

import logging
import sys
from dataclasses import asdict, dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fem import BoundarySpec, ConfigurationError, FixedBC, MaterialSpec, PointLoad, Selector
from .topopt import ContinuationSchedule, OCParams

log = logging.getLogger(__name__)

MODES = ("none", "dynamic", "refine_only_static")


@dataclass(frozen=True)
class AdaptationPolicy:
    mode: str = "dynamic"
    r_amr: float = 0.0
    rho_s: float = 0.5
    min_steps_between: int = 5
    max_steps_between: int = 10
    change_tol: float = 0.01
    max_total_levels: int = 0
    trigger: str = "design"
    compliance_tol: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"amr.mode must be one of {MODES}, got {self.mode!r}")
        if self.min_steps_between > self.max_steps_between:
            raise ConfigurationError("amr.min_steps_between must not exceed amr.max_steps_between")
        if self.r_amr < 0:
            raise ConfigurationError("amr.radius must be >= 0")
        if self.trigger not in ("design", "compliance"):
            raise ConfigurationError(f"amr.trigger must be 'design' or 'compliance', got {self.trigger!r}")


@dataclass(frozen=True)
class ProblemConfig:
    width: float
    height: float
    nx: int
    ny: int
    volume_fraction: float
    boundary: BoundarySpec
    max_total_levels: int = 0
    material: MaterialSpec = MaterialSpec()
    rmin: float = 0.0
    policy: AdaptationPolicy = AdaptationPolicy()
    oc: OCParams = OCParams()
    solver_tol: float = 1e-8
    solver_maxit: int | None = None
    continuation: ContinuationSchedule = ContinuationSchedule()
    max_steps: int = 1000
    max_steps_per_level: int = 300
    convergence_tol: float = 0.01
    output_dir: str = "out"
    seed: int = 0

    @property
    def finest_size(self) -> float:
        return self.width / self.nx / 2**self.max_total_levels

    @property
    def mode(self) -> str:
        return self.policy.mode

    def replace(self, **changes) -> "ProblemConfig":
        from dataclasses import replace

        return replace(self, **changes)


_SCHEMA = {
    "domain": {"width", "height", "nx", "ny", "max_total_levels"},
    "material": {"E0", "nu", "rho_min"},
    "problem": {"volume_fraction", "filter_radius"},
    "amr": {"mode", "radius", "rho_s", "min_steps_between", "max_steps_between", "change_tol", "trigger", "compliance_tol"},
    "oc": {"move", "eta", "bisection_tol"},
    "solver": {"tol", "maxit"},
    "continuation": {"p_start", "p_end", "p_step", "steps_per_stage"},
    "run": {"max_steps", "convergence_tol", "seed", "max_steps_per_level"},
    "output": {"dir"},
    "loads": {"x", "y", "component", "magnitude"},
    "fixed": {"x", "y", "component", "value"},
}
_REQUIRED = {
    "domain": ("width", "height", "nx", "ny"),
    "problem": ("volume_fraction",),
    "loads": ("component", "magnitude"),
    "fixed": (),
}


def _check_keys(doc: dict) -> None:
    for section, body in doc.items():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        entries = body if isinstance(body, list) else [body]
        for k, entry in enumerate(entries):
            if not isinstance(entry, dict):
                raise ConfigurationError(f"[{section}] must be a table")
            path = f"{section}[{k}]" if isinstance(body, list) else section
            for key in entry:
                if key not in _SCHEMA[section]:
                    raise ConfigurationError(f"unknown key {path}.{key}")
            for key in _REQUIRED.get(section, ()):
                if key not in entry:
                    raise ConfigurationError(f"missing required key {path}.{key}")
    for section in ("domain", "problem", "loads", "fixed"):
        if section not in doc:
            raise ConfigurationError(f"missing required section [{section}]")


def _range(path: str, value, lo=None, hi=None, lo_open=False, hi_open=False):
    bad = (
        (lo is not None and (value <= lo if lo_open else value < lo))
        or (hi is not None and (value >= hi if hi_open else value > hi))
    )
    if bad:
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise ConfigurationError(f"{path} = {value!r} out of range {lb}{lo}, {hi}{rb}")
    return value


def _selector(path: str, entry: dict) -> Selector:
    if "x" not in entry and "y" not in entry:
        raise ConfigurationError(f"{path} needs x and/or y")
    return Selector(entry.get("x"), entry.get("y"))


def parse_config(text: str) -> ProblemConfig:
    """Parse and validate TOML configuration text; defaults are logged."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    _check_keys(doc)
    dom = doc["domain"]
    prob = doc["problem"]
    get = lambda sec, key, default: doc.get(sec, {}).get(key, default)  # noqa: E731
    used_defaults = []

    def opt(sec, key, default):
        if key not in doc.get(sec, {}):
            used_defaults.append(f"{sec}.{key}={default!r}")
        return get(sec, key, default)

    nx = int(_range("domain.nx", dom["nx"], 1))
    ny = int(_range("domain.ny", dom["ny"], 1))
    width = float(_range("domain.width", dom["width"], 0, lo_open=True))
    height = float(_range("domain.height", dom["height"], 0, lo_open=True))
    levels = int(_range("domain.max_total_levels", opt("domain", "max_total_levels", 0), 0, 20))
    vf = float(_range("problem.volume_fraction", prob["volume_fraction"], 0, 1, lo_open=True))

    material = MaterialSpec(
        E0=float(_range("material.E0", opt("material", "E0", 1.0), 0, lo_open=True)),
        nu=float(_range("material.nu", opt("material", "nu", 0.3), 0, 0.5, hi_open=True)),
        p=float(opt("continuation", "p_end", 3.0)),
        rho_min=float(_range("material.rho_min", opt("material", "rho_min", 1e-3), 0, 1, True, True)),
    )
    finest = width / nx / 2**levels
    r_amr = float(_range("amr.radius", opt("amr", "radius", 2.5 * finest), 0))
    rmin = float(_range("problem.filter_radius", prob.get("filter_radius", r_amr), 0))
    if "filter_radius" not in prob:
        used_defaults.append(f"problem.filter_radius={rmin!r} (= amr.radius)")
    policy = AdaptationPolicy(
        mode=str(opt("amr", "mode", "dynamic")),
        r_amr=r_amr,
        rho_s=float(_range("amr.rho_s", opt("amr", "rho_s", 0.5), 0, 1, True, True)),
        min_steps_between=int(_range("amr.min_steps_between", opt("amr", "min_steps_between", 5), 1)),
        max_steps_between=int(_range("amr.max_steps_between", opt("amr", "max_steps_between", 10), 1)),
        change_tol=float(_range("amr.change_tol", opt("amr", "change_tol", 0.01), 0, lo_open=True)),
        max_total_levels=levels,
        trigger=str(opt("amr", "trigger", "design")),
        compliance_tol=float(_range("amr.compliance_tol", opt("amr", "compliance_tol", 0.01), 0, lo_open=True)),
    )
    oc = OCParams(
        move=float(_range("oc.move", opt("oc", "move", 0.2), 0, 1, lo_open=True)),
        eta=float(_range("oc.eta", opt("oc", "eta", 0.5), 0, 1, lo_open=True)),
        bisection_tol=float(_range("oc.bisection_tol", opt("oc", "bisection_tol", 1e-6), 0, lo_open=True)),
    )
    cont = ContinuationSchedule(
        p_start=float(_range("continuation.p_start", opt("continuation", "p_start", 1.0), 1)),
        p_end=float(_range("continuation.p_end", material.p, 1)),
        p_step=float(_range("continuation.p_step", opt("continuation", "p_step", 0.5), 0, lo_open=True)),
        steps_per_stage=int(_range("continuation.steps_per_stage", opt("continuation", "steps_per_stage", 30), 1)),
    )
    if cont.p_start > cont.p_end:
        raise ConfigurationError("continuation.p_start must not exceed continuation.p_end")

    def entries(section):
        body = doc[section]
        return body if isinstance(body, list) else [body]

    loads = []
    for k, e in enumerate(entries("loads")):
        loads.append(PointLoad(_selector(f"loads[{k}]", e), str(e["component"]), float(e["magnitude"])))
    fixed = []
    for k, e in enumerate(entries("fixed")):
        fixed.append(FixedBC(_selector(f"fixed[{k}]", e), str(e.get("component", "both")), float(e.get("value", 0.0))))
    if not loads:
        raise ConfigurationError("at least one [[loads]] entry is required")
    boundary = BoundarySpec(tuple(fixed), tuple(loads))
    maxit = int(_range("solver.maxit", opt("solver", "maxit", 0), 0))

    cfg = ProblemConfig(
        width=width,
        height=height,
        nx=nx,
        ny=ny,
        volume_fraction=vf,
        boundary=boundary,
        max_total_levels=levels,
        material=material,
        rmin=rmin,
        policy=policy,
        oc=oc,
        solver_tol=float(_range("solver.tol", opt("solver", "tol", 1e-8), 0, lo_open=True)),
        solver_maxit=maxit or None,
        continuation=cont,
        max_steps=int(_range("run.max_steps", opt("run", "max_steps", 1000), 1)),
        max_steps_per_level=int(_range("run.max_steps_per_level", opt("run", "max_steps_per_level", 300), 1)),
        convergence_tol=float(_range("run.convergence_tol", opt("run", "convergence_tol", 0.01), 0, lo_open=True)),
        output_dir=str(opt("output", "dir", "out")),
        seed=int(opt("run", "seed", 0)),
    )
    if abs(width / nx - height / ny) > 1e-12 * width / nx:
        raise ConfigurationError("domain.width/nx must equal domain.height/ny (square elements)")
    for d in used_defaults:
        log.info("config default: %s", d)
    return cfg


def load_config(path) -> ProblemConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_summary(cfg: ProblemConfig) -> dict:
    out = asdict(cfg)
    out["boundary"] = repr(cfg.boundary)
    return out
