"""Problem configuration: flat key=value schema, presets, and builders.

A :class:`ProblemConfig` fully determines a run or a sweep.  Config files
are flat ``key = value`` lines (``#`` comments allowed); numeric values may
be simple arithmetic such as ``1/400`` or ``2*pi``.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exp_action import ExpEvaluator, build_evaluator
from .grid_fem import Grid, assemble_operators, build_grid, interpolate
from .potentials import PotentialSpec, flory_huggins, ginzburg_landau, linear_forcing
from .time_steppers import Cutoff, Forcing, disabled, one_sided, reaction_from_potential, two_sided


class ConfigError(ValueError):
    """Malformed config file, unknown key, or invalid value."""


@dataclass
class ProblemConfig:
    dim: int = 1
    domain_min: float = -1.0
    domain_max: float = 1.0
    cells: int = 800
    degree: int = 4
    bc: str = "neumann"
    diffusion: float = 1e-4
    potential: str = "ginzburg-landau"
    epsilon: float = 1.0
    theta: float = 0.25
    theta_c: float = 1.0
    forcing: str = "none"           # none | zero | manufactured
    initial: str = "example1"       # example1 | disk | disk-literal | cosine | constant:<v>
    steps_k: int = 4
    tau: float = 1.0 / 400
    T: float = 1.0
    cutoff: str = "two-sided"       # two-sided | one-sided | disabled
    cutoff_bound: Optional[float] = None
    baseline: str = "none"          # none | etd-rk2
    kappa: float = 2.0
    backend: Optional[str] = None
    axis: str = "temporal"          # temporal | spatial
    resolutions: tuple = ()
    ref_cells: Optional[int] = None
    ref_degree: Optional[int] = None
    ref_steps_k: Optional[int] = None
    ref_tau: Optional[float] = None
    snapshots: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    preset: Optional[str] = None

    def replace(self, **kw) -> "ProblemConfig":
        return dataclasses.replace(self, **kw)

    @property
    def num_steps(self) -> int:
        return steps_for(self.T, self.tau)

    @property
    def has_exact_solution(self) -> bool:
        return self.forcing == "manufactured"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def steps_for(T: float, tau: float) -> int:
    n = round(T / tau)
    if n < 1 or abs(n * tau - T) > 1e-9 * T:
        raise ConfigError(f"T={T} is not an integer multiple of tau={tau}")
    return n


_TEMPORAL = dict(dim=1, domain_min=-1.0, domain_max=1.0, cells=800, degree=4, bc="neumann",
                 diffusion=1e-4, potential="ginzburg-landau", epsilon=1.0, initial="example1",
                 T=1.0, cutoff="two-sided", axis="temporal", resolutions=(10, 20, 40, 80, 160), backend="eigen",
                 ref_steps_k=4, ref_tau=1.0 / 800)
_SPATIAL = dict(_TEMPORAL, axis="spatial", steps_k=4, tau=1.0 / 400, ref_cells=800, ref_degree=4,
                ref_tau=None)

PRESETS: dict[str, dict] = {
    **{f"example1-temporal-k{k}": dict(_TEMPORAL, steps_k=k) for k in (2, 3, 4)},
    "example1-temporal-etdrk2": dict(_TEMPORAL, steps_k=1, baseline="etd-rk2", kappa=2.0),
    **{f"example1-spatial-r{r}": dict(_SPATIAL, degree=r) for r in (1, 2, 3, 4)},
    "example1-spatial-etdrk2": dict(_SPATIAL, degree=1, steps_k=1, baseline="etd-rk2", kappa=2.0),
    "example2": dict(dim=1, domain_min=-1.0, domain_max=1.0, cells=200, degree=2, bc="neumann",
                     diffusion=1e-4, potential="flory-huggins", epsilon=1.0, theta=0.25, theta_c=1.0,
                     initial="example1", steps_k=2, tau=1.0 / 100, T=1.0, cutoff="two-sided",
                     ref_cells=400, ref_degree=4, ref_steps_k=4, ref_tau=1.0 / 400),
    "example3": dict(dim=2, domain_min=0.0, domain_max=2 * math.pi, cells=128, degree=1, bc="periodic",
                     diffusion=1.0, potential="flory-huggins", epsilon=0.01, theta=0.25, theta_c=1.0,
                     initial="disk", steps_k=2, tau=5e-7, T=0.01, cutoff="two-sided", backend="tensor"),
    "linear-manufactured": dict(dim=1, domain_min=0.0, domain_max=1.0, cells=40, degree=4, bc="neumann",
                                diffusion=1.0, potential="linear", forcing="manufactured",
                                initial="cosine", steps_k=2, tau=0.1, T=1.0, cutoff="disabled",
                                axis="temporal", resolutions=(10, 20, 40, 80)),
    "linear-equilibrium": dict(dim=1, domain_min=0.0, domain_max=1.0, cells=20, degree=2, bc="neumann",
                               diffusion=1.0, potential="linear", forcing="zero", initial="constant:0.5",
                               steps_k=3, tau=0.01, T=1.0, cutoff="one-sided", cutoff_bound=0.0),
}

PRESET_NOTES = {
    "example1-temporal-k2": "Allen-Cahn (Ginzburg-Landau), temporal sweep, k=2",
    "example1-temporal-k3": "Allen-Cahn (Ginzburg-Landau), temporal sweep, k=3",
    "example1-temporal-k4": "Allen-Cahn (Ginzburg-Landau), temporal sweep, k=4",
    "example1-temporal-etdrk2": "temporal sweep with the stabilized ETD-RK2 baseline, kappa=2",
    "example1-spatial-r1": "spatial sweep, r=1",
    "example1-spatial-r2": "spatial sweep, r=2",
    "example1-spatial-r3": "spatial sweep, r=3",
    "example1-spatial-r4": "spatial sweep, r=4",
    "example1-spatial-etdrk2": "spatial sweep (r=1) with the ETD-RK2 baseline",
    "example2": "Flory-Huggins 1D, h=tau=1/100, r=k=2",
    "example3": "Flory-Huggins 2D disk, M=128, r=1, periodic, eps=0.01, T=eps",
    "linear-manufactured": "heat equation with source, exact solution exp(-t) cos(pi x)",
    "linear-equilibrium": "zero source, constant data (steady state)",
}


def preset(name: str) -> ProblemConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return ProblemConfig(**PRESETS[name], preset=name)


# -- value parsing -----------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_NAMES = {"pi": math.pi, "e": math.e}


def _arith(text: str) -> float:
    def ev(node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name) and node.id in _NAMES:
            return _NAMES[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        raise ValueError(text)
    try:
        return ev(ast.parse(text.strip(), mode="eval").body)
    except (SyntaxError, ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None


_INT_KEYS = {"dim", "cells", "degree", "steps_k", "ref_cells", "ref_degree", "ref_steps_k"}
_FLOAT_KEYS = {"domain_min", "domain_max", "diffusion", "epsilon", "theta", "theta_c", "tau", "T",
               "cutoff_bound", "kappa", "ref_tau"}
_CHOICES = {"bc": {"neumann", "periodic"}, "potential": {"ginzburg-landau", "flory-huggins", "linear"},
            "forcing": {"none", "zero", "manufactured"}, "cutoff": {"two-sided", "one-sided", "disabled"},
            "baseline": {"none", "etd-rk2"}, "backend": {"eigen", "contour", "tensor"},
            "axis": {"temporal", "spatial"}}
KEYS = tuple(f.name for f in dataclasses.fields(ProblemConfig))


def parse_value(key: str, text: str):
    text = text.strip()
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}")
    try:
        if key in _INT_KEYS | _FLOAT_KEYS:
            if text.lower() in ("", "none") and (key.startswith("ref_") or key == "cutoff_bound"):
                return None
            v = _arith(text)
            if key in _INT_KEYS:
                if float(v) != int(v):
                    raise ValueError(f"expected an integer, got {text!r}")
                return int(v)
            return float(v)
        if key == "resolutions":
            return tuple(int(_arith(s)) for s in text.split(",") if s.strip())
        if key == "snapshots":
            return tuple(float(_arith(s)) for s in text.split(",") if s.strip())
        if key == "initial":
            if text.startswith("constant:"):
                _arith(text.split(":", 1)[1])
            elif text not in ("example1", "disk", "disk-literal", "cosine"):
                raise ValueError(f"unknown initial condition {text!r}")
            return text
        if key in _CHOICES:
            if key == "backend" and text.lower() in ("", "none", "auto"):
                return None
            if text not in _CHOICES[key]:
                raise ValueError(f"expected one of {sorted(_CHOICES[key])}, got {text!r}")
            return text
        return text or None
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from None


def _line_of(lines: list[str], key: str) -> int:
    for i, line in enumerate(lines, 1):
        if line.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return i
    return 0


def read_config_file(path) -> dict:
    """Parse a flat key=value file into typed values; errors name line and key."""
    text = Path(path).read_text()
    lines = text.splitlines()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text, source=str(path))
    except configparser.ParsingError as exc:
        bad = ", ".join(f"line {n - 1}: {ln.strip()}" for n, ln in exc.errors)
        raise ConfigError(f"{path}: malformed entries ({bad})") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for key, raw in cp["config"].items():
        try:
            out[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}, line {_line_of(lines, key)}: {exc}") from None
    return out


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), raw)
    return out


def resolve_config(preset_name=None, config_path=None, overrides=(), backend=None) -> ProblemConfig:
    """Layering: defaults < preset < config file < --set overrides < --backend."""
    values: dict = {}
    file_values = read_config_file(config_path) if config_path else {}
    name = preset_name or file_values.get("preset")
    if name:
        values.update(preset(name).to_dict())
    values.update(file_values)
    values.update(parse_overrides(overrides))
    if backend:
        values["backend"] = parse_value("backend", backend)
    cfg = ProblemConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ProblemConfig) -> None:
    if cfg.dim not in (1, 2):
        raise ConfigError(f"dim must be 1 or 2, got {cfg.dim}")
    if not cfg.domain_max > cfg.domain_min:
        raise ConfigError("domain_max must exceed domain_min")
    if cfg.diffusion <= 0 or cfg.tau <= 0 or cfg.T <= 0:
        raise ConfigError("diffusion, tau and T must be positive")
    if cfg.potential == "linear" and cfg.forcing == "none":
        raise ConfigError("potential=linear needs forcing=zero or forcing=manufactured")
    if cfg.potential != "linear" and cfg.forcing != "none":
        raise ConfigError(f"forcing={cfg.forcing} only applies to potential=linear")
    if cfg.cutoff == "one-sided" and cfg.cutoff_bound is None:
        raise ConfigError("cutoff=one-sided needs cutoff_bound")
    if list(cfg.resolutions) != sorted(set(cfg.resolutions)):
        raise ConfigError("resolutions must be strictly increasing")
    if any(not 0 <= q <= 1 for q in cfg.snapshots):
        raise ConfigError("snapshots are fractions of T in [0, 1]")
    steps_for(cfg.T, cfg.tau)


# -- builders ----------------------------------------------------------------

def potential_spec(cfg: ProblemConfig) -> PotentialSpec:
    if cfg.potential == "ginzburg-landau":
        return ginzburg_landau(cfg.epsilon)
    if cfg.potential == "flory-huggins":
        return flory_huggins(cfg.theta, cfg.theta_c, cfg.epsilon)
    return linear_forcing()


def make_grid(cfg: ProblemConfig, cells: Optional[int] = None, degree: Optional[int] = None) -> Grid:
    return build_grid(cfg.dim, (cfg.domain_min, cfg.domain_max), cells or cfg.cells,
                      degree or cfg.degree, cfg.bc)


def make_evaluator(cfg: ProblemConfig, grid: Grid) -> ExpEvaluator:
    return build_evaluator(assemble_operators(grid, cfg.diffusion), cfg.backend)


def exact_solution(cfg: ProblemConfig, grid: Grid, t: float) -> np.ndarray:
    if not cfg.has_exact_solution:
        raise ConfigError("problem has no closed-form solution")
    return math.exp(-t) * interpolate(grid, lambda *x: np.prod([np.cos(np.pi * xi) for xi in x], axis=0))


def initial_field(cfg: ProblemConfig, grid: Grid) -> np.ndarray:
    alpha = potential_spec(cfg).alpha
    name = cfg.initial
    if name == "example1":
        if cfg.dim != 1:
            raise ConfigError("initial=example1 is one-dimensional")
        return interpolate(grid, lambda x: alpha * np.where(x < -0.5, 1.0, np.cos(1.5 * np.pi * (x + 0.5))))
    if name in ("disk", "disk-literal"):
        if cfg.dim != 2:
            raise ConfigError(f"initial={name} is two-dimensional")
        c = 0.5 * (cfg.domain_min + cfg.domain_max)
        chi = lambda x, y: ((x - c) ** 2 + (y - c) ** 2 <= 1.2).astype(float)
        if name == "disk":
            return interpolate(grid, lambda x, y: alpha * (2.0 * chi(x, y) - 1.0))
        return interpolate(grid, lambda x, y: alpha * (chi(x, y) - 2.0))
    if name == "cosine":
        return interpolate(grid, lambda *x: np.prod([np.cos(np.pi * xi) for xi in x], axis=0))
    value = _arith(name.split(":", 1)[1])
    return np.full(grid.num_nodes, float(value))


def make_source(cfg: ProblemConfig, grid: Grid):
    if cfg.potential != "linear":
        return reaction_from_potential(potential_spec(cfg))
    if cfg.forcing == "zero":
        zero = np.zeros(grid.num_nodes)
        return Forcing(lambda t: zero)
    shape = interpolate(grid, lambda *x: np.prod([np.cos(np.pi * xi) for xi in x], axis=0))
    amp = cfg.diffusion * cfg.dim * np.pi ** 2 - 1.0
    return Forcing(lambda t: amp * math.exp(-t) * shape)


def make_cutoff(cfg: ProblemConfig) -> Cutoff:
    if cfg.cutoff == "disabled":
        return disabled()
    if cfg.cutoff == "one-sided":
        return one_sided(cfg.cutoff_bound)
    bound = cfg.cutoff_bound if cfg.cutoff_bound is not None else potential_spec(cfg).alpha
    if not np.isfinite(bound):
        raise ConfigError("two-sided cut-off needs a finite bound (set cutoff_bound)")
    return two_sided(bound)


def scheme_label(cfg: ProblemConfig) -> str:
    if cfg.baseline == "etd-rk2":
        label = f"etdrk2-kappa{cfg.kappa:g}"
    else:
        label = f"expms-k{cfg.steps_k}"
    return label if cfg.cutoff != "disabled" else label + "-nocut"
