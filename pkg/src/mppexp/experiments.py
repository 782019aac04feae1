"""Convergence sweeps, the cut-off comparison, and the 2D interface run.

Runs inside a sweep are independent and execute on a thread pool (numpy
releases the GIL in the dense kernels); results are assembled in resolution
order, so reports do not depend on scheduling.
"""
from __future__ import annotations

import logging
import math
import os
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import (ConfigError, ProblemConfig, exact_solution, initial_field, make_cutoff, make_evaluator,
                     make_grid, make_source, potential_spec, scheme_label, steps_for)
from .exp_action import ExpEvaluator
from .grid_fem import Grid, discrete_norm, l2_distance, write_nodal_csv
from .time_steppers import RunResult, SchemeConfig, Status, solve

log = logging.getLogger(__name__)

CSV_FMT = ".9e"


class Axis(str, Enum):
    TEMPORAL = "temporal"
    SPATIAL = "spatial"


@dataclass(frozen=True)
class RefSpec:
    """How the reference field is produced: closed form, or a finer run."""
    k: int = 4
    tau: Optional[float] = None
    cells: Optional[int] = None
    degree: Optional[int] = None
    exact: bool = False


@dataclass(frozen=True)
class ConvergenceStudy:
    axis: Axis
    resolutions: tuple
    fixed: float          # tau for spatial sweeps, cell count for temporal ones
    reference: RefSpec
    T: float = 1.0

    def __post_init__(self):
        res = list(self.resolutions)
        if len(res) < 3:
            raise ValueError("a convergence study needs at least 3 resolutions")
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError("resolutions must be strictly increasing")
        if not self.reference.exact:
            finest = self._reference_resolution()
            if finest is not None and finest <= res[-1]:
                raise ValueError(f"reference resolution {finest} is not finer than {res[-1]}")

    def _reference_resolution(self):
        ref = self.reference
        if self.axis is Axis.TEMPORAL:
            return None if ref.tau is None else round(self.T / ref.tau)
        return ref.cells

    @classmethod
    def from_config(cls, cfg: ProblemConfig) -> "ConvergenceStudy":
        axis = Axis(cfg.axis)
        if cfg.has_exact_solution:
            ref = RefSpec(exact=True)
        elif axis is Axis.TEMPORAL:
            if cfg.ref_tau is None:
                raise ConfigError("temporal sweep needs ref_tau (or a manufactured problem)")
            ref = RefSpec(k=cfg.ref_steps_k or 4, tau=cfg.ref_tau)
        else:
            if cfg.ref_cells is None:
                raise ConfigError("spatial sweep needs ref_cells (or a manufactured problem)")
            ref = RefSpec(k=cfg.ref_steps_k or 4, tau=cfg.ref_tau or cfg.tau,
                          cells=cfg.ref_cells, degree=cfg.ref_degree or cfg.degree)
        fixed = cfg.cells if axis is Axis.TEMPORAL else cfg.tau
        try:
            return cls(axis, tuple(cfg.resolutions), fixed, ref, cfg.T)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunReport:
    resolutions: list
    errors: list
    rates: list
    statuses: list
    rho_trace: np.ndarray
    rho_max: list = field(default_factory=list)
    max_abs: list = field(default_factory=list)
    discrepancy: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        """First non-Ok status, else Ok."""
        for s in self.statuses:
            if s != Status.OK.value:
                return s
        return Status.OK.value

    @property
    def ok(self) -> bool:
        return self.status == Status.OK.value

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 2


def estimate_rate(errors: Sequence[float]) -> list[float]:
    """log2 of consecutive error ratios."""
    e = np.asarray(errors, dtype=float)
    if e.size < 2:
        raise ValueError("need at least two errors")
    if np.any(~(e > 0)):
        raise ValueError("errors must be positive")
    return list(np.log2(e[:-1] / e[1:]))


def max_workers() -> int:
    env = os.environ.get("MPP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring MPP_THREADS=%r", env)
    return os.cpu_count() or 1


# evaluator construction (dense eigendecomposition) dominates small runs;
# share it across runs on the same grid
_EV_CACHE: "OrderedDict[tuple, ExpEvaluator]" = OrderedDict()
_EV_LOCK = threading.Lock()
_EV_CACHE_SIZE = 16


def cached_evaluator(cfg: ProblemConfig, grid: Grid) -> ExpEvaluator:
    key = (grid.dim, grid.a, grid.b, grid.num_cells, grid.degree, grid.bc, cfg.diffusion, cfg.backend)
    with _EV_LOCK:
        ev = _EV_CACHE.get(key)
        if ev is None:
            ev = make_evaluator(cfg, grid)
            _EV_CACHE[key] = ev
            if len(_EV_CACHE) > _EV_CACHE_SIZE:
                _EV_CACHE.popitem(last=False)
        else:
            _EV_CACHE.move_to_end(key)
        return ev


def run_once(cfg: ProblemConfig, cells=None, degree=None, k=None, tau=None, cutoff=None,
             baseline=None, snapshot_steps: Sequence[int] = ()) -> tuple[Grid, RunResult]:
    """Single solve of ``cfg`` with optional resolution/scheme substitutions."""
    grid = make_grid(cfg, cells, degree)
    ev = cached_evaluator(cfg, grid)
    tau = cfg.tau if tau is None else tau
    baseline = cfg.baseline if baseline is None else baseline
    scheme = SchemeConfig(k=k or cfg.steps_k, tau=tau, num_steps=steps_for(cfg.T, tau),
                          source=make_source(cfg, grid), cutoff=cutoff or make_cutoff(cfg),
                          etd_kappa=cfg.kappa if baseline == "etd-rk2" else None)
    return grid, solve(ev, scheme, initial_field(cfg, grid), snapshot_steps)


def _max_abs(res: RunResult) -> float:
    h = res.history
    if not h.umax:
        return float(np.max(np.abs(res.u)))
    return float(max(max(h.umax), -min(h.umin)))


def _compare(grid: Grid, u: np.ndarray, ref_grid: Grid, u_ref: np.ndarray) -> float:
    same = (grid.dim, grid.num_cells, grid.degree, grid.bc) == \
           (ref_grid.dim, ref_grid.num_cells, ref_grid.degree, ref_grid.bc)
    if same:
        return discrete_norm(grid, u - u_ref)
    if grid.dim != 1:
        raise ConfigError("cross-grid comparison is implemented for 1D grids only")
    # the lumped norm of nodal differences superconverges at Lobatto nodes
    # (one order above the L2 error); compare the functions themselves
    return l2_distance(grid, u, ref_grid, u_ref)


# sweeps of different schemes on one problem share their reference run
_REF_CACHE: "OrderedDict[tuple, tuple[Grid, RunResult]]" = OrderedDict()
_REF_LOCK = threading.Lock()
_SCHEME_ONLY = {"steps_k", "baseline", "kappa", "axis", "resolutions", "snapshots", "preset"}


def reference_run(cfg: ProblemConfig, ref: RefSpec) -> tuple[Grid, RunResult]:
    """Fine run with the multistep scheme (never the baseline), cut-off as configured."""
    key = (tuple((k, v) for k, v in cfg.to_dict().items() if k not in _SCHEME_ONLY), ref)
    with _REF_LOCK:
        hit = _REF_CACHE.get(key)
        if hit is None:
            hit = run_once(cfg, cells=ref.cells, degree=ref.degree, k=ref.k, tau=ref.tau, baseline="none")
            _REF_CACHE[key] = hit
            if len(_REF_CACHE) > 8:
                _REF_CACHE.popitem(last=False)
        return hit


def _rates_for(errors, statuses):
    rates = [math.nan]
    for i in range(1, len(errors)):
        pair_ok = statuses[i - 1] == "Ok" and statuses[i] == "Ok"
        e0, e1 = errors[i - 1], errors[i]
        rates.append(math.log2(e0 / e1) if pair_ok and e0 > 0 and e1 > 0 else math.nan)
    return rates


def run_convergence_study(study: ConvergenceStudy, cfg: ProblemConfig, workers: Optional[int] = None,
                          keep_fields: bool = False) -> RunReport:
    """Error against the reference (or closed form) at T for every resolution."""
    ref_grid = u_ref = None
    if not study.reference.exact:
        ref_grid, ref_res = reference_run(cfg, study.reference)
        if ref_res.status is not Status.OK:
            log.error("reference run failed: %s", ref_res.status_label)
        u_ref = ref_res.u

    def one(res_value):
        if study.axis is Axis.TEMPORAL:
            grid, res = run_once(cfg, tau=cfg.T / res_value)
        else:
            grid, res = run_once(cfg, cells=res_value, tau=study.fixed)
        if study.reference.exact:
            err = discrete_norm(grid, res.u - exact_solution(cfg, grid, cfg.T))
        else:
            err = _compare(grid, res.u, ref_grid, u_ref)
        return grid, res, err

    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        outcomes = list(pool.map(one, study.resolutions))

    statuses = [res.status_label for _, res, _ in outcomes]
    errors = [err for _, _, err in outcomes]
    report = RunReport(resolutions=list(study.resolutions), errors=errors,
                       rates=_rates_for(errors, statuses), statuses=statuses,
                       rho_trace=outcomes[-1][1].rho,
                       rho_max=[float(r.rho.max()) if r.rho.size else 0.0 for _, r, _ in outcomes],
                       max_abs=[_max_abs(r) for _, r, _ in outcomes])
    if keep_fields:
        report.extra["fields"] = [(g, r.u) for g, r, _ in outcomes]
    return report


def _single_report(grid, res: RunResult, resolution, error=math.nan) -> RunReport:
    return RunReport(resolutions=[resolution], errors=[error], rates=[math.nan],
                     statuses=[res.status_label], rho_trace=res.rho,
                     rho_max=[float(res.rho.max()) if res.rho.size else 0.0], max_abs=[_max_abs(res)],
                     extra={"grid": grid, "u": res.u})


def run_single(cfg: ProblemConfig) -> RunReport:
    """One run of ``cfg``; error against the closed form or the ref_* reference when available."""
    grid, res = run_once(cfg)
    err = math.nan
    if cfg.has_exact_solution:
        err = discrete_norm(grid, res.u - exact_solution(cfg, grid, cfg.T))
    elif cfg.ref_tau is not None or cfg.ref_cells is not None:
        ref_grid, ref = reference_run(cfg, _ref_from_config(cfg))
        err = _compare(grid, res.u, ref_grid, ref.u)
    return _single_report(grid, res, cfg.num_steps, err)


def _ref_from_config(cfg: ProblemConfig) -> RefSpec:
    return RefSpec(k=cfg.ref_steps_k or 4, tau=cfg.ref_tau or cfg.tau,
                   cells=cfg.ref_cells or cfg.cells, degree=cfg.ref_degree or cfg.degree)


def run_cutoff_comparison(cfg: ProblemConfig, legs=("enabled", "disabled")) -> dict[str, RunReport]:
    """Identical runs with the two-sided cut-off and without it.

    The disabled leg is expected to leave the domain of the logarithmic
    potential; if it does not, ``discrepancy`` is set on its report.
    """
    if cfg.potential != "flory-huggins":
        raise ConfigError("the cut-off comparison needs potential=flory-huggins")
    alpha = potential_spec(cfg).alpha
    enabled = cfg.replace(cutoff="two-sided", cutoff_bound=alpha)
    have_ref = cfg.ref_tau is not None or cfg.ref_cells is not None
    ref_grid = u_ref = None
    if have_ref:
        ref_grid, ref = reference_run(enabled, _ref_from_config(cfg))
        u_ref = ref.u

    out = {}
    for leg in legs:
        leg_cfg = enabled if leg == "enabled" else cfg.replace(cutoff="disabled")
        grid, res = run_once(leg_cfg)
        err = _compare(grid, res.u, ref_grid, u_ref) if have_ref else math.nan
        report = _single_report(grid, res, leg_cfg.cells, err)
        if leg == "disabled" and res.status is Status.OK:
            report.discrepancy = ("run without cut-off stayed inside (-1, 1); "
                                  "instability not reproduced at this resolution")
            log.warning(report.discrepancy)
        out[leg] = report
    return out


def interface_radius(grid: Grid, u: np.ndarray) -> float:
    """Mean distance from the centre to the zero crossings along the horizontal centreline."""
    n = grid.n_axis
    U = u.reshape(n, n)
    x = grid.axis_nodes
    c = 0.5 * (grid.a + grid.b)
    row = U[:, int(np.argmin(np.abs(x - c)))]
    hits = []
    for i in range(n - 1):
        if row[i] * row[i + 1] < 0:
            xc = x[i] - row[i] * (x[i + 1] - x[i]) / (row[i + 1] - row[i])
            hits.append(abs(xc - c))
    return float(np.mean(hits)) if hits else math.nan


def reflection_defect(grid: Grid, u: np.ndarray) -> float:
    """max |u(x1, x2) - u(x2, x1)| over the nodes."""
    n = grid.n_axis
    U = u.reshape(n, n)
    return float(np.max(np.abs(U - U.T)))


def snapshot_steps(cfg: ProblemConfig) -> list[int]:
    N = cfg.num_steps
    return sorted({int(round(q * N)) for q in cfg.snapshots})


def run_2d_interface(cfg: ProblemConfig, out_dir=None, experiment: str = "example3") -> RunReport:
    """Cut-off run with snapshots, radius and symmetry diagnostics.

    With ``ref_tau`` set, a finer-step reference run is also made and the
    final-time difference is reported as the error.
    """
    if cfg.dim != 2:
        raise ConfigError("the interface experiment needs dim=2")
    steps = snapshot_steps(cfg)
    grid, res = run_once(cfg, snapshot_steps=steps)
    err = math.nan
    extra = {}
    if cfg.ref_tau is not None:
        rgrid, ref = run_once(cfg, k=cfg.ref_steps_k or 4, tau=cfg.ref_tau, baseline="none")
        err = discrete_norm(grid, res.u - ref.u)
        extra["reference_radius"] = interface_radius(rgrid, ref.u)
    report = _single_report(grid, res, cfg.num_steps, err)
    taken = sorted(res.snapshots)
    report.extra.update(extra)
    report.extra["snapshot_steps"] = taken
    report.extra["snapshot_times"] = [s * cfg.tau for s in taken]
    report.extra["radii"] = [interface_radius(grid, res.snapshots[s]) for s in taken]
    report.extra["symmetry"] = [reflection_defect(grid, res.snapshots[s]) for s in taken]
    if out_dir is not None:
        scheme = scheme_label(cfg)
        for s in taken:
            write_nodal_csv(Path(out_dir) / f"{experiment}_{scheme}_step{s}.csv", grid, res.snapshots[s])
    return report


def radius_non_increasing(radii: Sequence[float], rtol: float = 1e-12) -> bool:
    r = np.asarray(radii, dtype=float)
    return bool(np.all(np.isfinite(r)) and np.all(r[1:] <= r[:-1] * (1 + rtol)))


# -- CSV writers -------------------------------------------------------------

def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, CSV_FMT)


def write_report_csv(path, report: RunReport) -> None:
    lines = ["resolution,error,rate,status"]
    for res, err, rate, status in zip(report.resolutions, report.errors, report.rates, report.statuses):
        lines.append(f"{res},{_num(err)},{_num(rate)},{status}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_rho_csv(path, rho: np.ndarray) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("step,rho\n")
        for i, v in enumerate(rho, 1):
            fh.write(f"{i},{format(float(v), CSV_FMT)}\n")


def write_series_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, int) else _num(v))
                              for v in row) + "\n")

