"""Exponential multistep integration with nodal cut-off.

One step of the k-step scheme is

    u_hat^n = exp(tau L) u^{n-1} + int_{t_{n-1}}^{t_n} exp((t_n - s) L) sum_j L_j(s) f^{n-j} ds
    u^n     = clamp(u_hat^n)

where L_j are the Lagrange polynomials through t_{n-1}, ..., t_{n-k}.  Writing
the extrapolant in the monomials of theta = (s - t_{n-1})/tau turns the integral
into a sum of phi-function actions, evaluated exactly by the backend.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exp_action import ExpEvaluator
from .potentials import PotentialKind, PotentialSpec, eval_df, eval_f_nodal

log = logging.getLogger(__name__)

K_MAX = 6
NEWTON_TOL = 1e-12
NEWTON_MAXITER = 50


class StartingFailure(RuntimeError):
    pass


# ---------------------------------------------------------------- cut-off

class CutoffKind(str, Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"
    DISABLED = "disabled"


@dataclass(frozen=True)
class Cutoff:
    kind: CutoffKind
    bound: float = 0.0

    def __post_init__(self):
        if self.kind is CutoffKind.TWO_SIDED and not self.bound > 0:
            raise ValueError("two-sided cut-off needs a positive bound alpha")

    def apply(self, u: np.ndarray) -> np.ndarray:
        if self.kind is CutoffKind.TWO_SIDED:
            return np.minimum(np.maximum(u, -self.bound), self.bound)
        if self.kind is CutoffKind.ONE_SIDED:
            return np.maximum(u, self.bound)
        return np.array(u, dtype=float, copy=True)

    def satisfied(self, u: np.ndarray) -> bool:
        if self.kind is CutoffKind.TWO_SIDED:
            return bool(np.max(np.abs(u)) <= self.bound)
        if self.kind is CutoffKind.ONE_SIDED:
            return bool(np.min(u) >= self.bound)
        return True

    @property
    def enabled(self) -> bool:
        return self.kind is not CutoffKind.DISABLED


def two_sided(alpha: float) -> Cutoff:
    return Cutoff(CutoffKind.TWO_SIDED, float(alpha))


def one_sided(u_min: float) -> Cutoff:
    return Cutoff(CutoffKind.ONE_SIDED, float(u_min))


def disabled() -> Cutoff:
    return Cutoff(CutoffKind.DISABLED)


# ---------------------------------------------------------------- sources

@dataclass(frozen=True)
class Reaction:
    """Autonomous semilinear source f(u) with derivative for Newton solves.

    ``in_domain`` flags arguments where f is undefined (Flory-Huggins, |u| >= 1).
    """
    f: Callable[..., np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    in_domain: Callable[[np.ndarray], bool] = lambda u: True
    semilinear = True

    def __call__(self, u, t, guard=False):
        return self.f(u, guard=guard)

    def derivative(self, u, t):
        return self.df(u)


@dataclass(frozen=True)
class Forcing:
    """Given source f(t) (nodal vector); defined for t <= 0 as well."""
    func: Callable[[float], np.ndarray]
    semilinear = False

    def __call__(self, u, t, guard=False):
        return np.asarray(self.func(t), dtype=float)

    def derivative(self, u, t):
        return np.zeros_like(u)

    def in_domain(self, u):
        return True


def reaction_from_potential(spec: PotentialSpec) -> Reaction:
    if spec.kind is PotentialKind.LINEAR:
        raise ValueError("linear potentials carry a forcing, use Forcing")

    def f(u, guard=False):
        return eval_f_nodal(spec, u, guard=guard)

    def in_domain(u):
        if spec.kind is PotentialKind.FLORY_HUGGINS:
            return bool(np.all(np.abs(u) < 1.0))
        return bool(np.all(np.isfinite(u)))

    return Reaction(f=f, df=lambda u: eval_df(spec, u, guard=True), in_domain=in_domain)


# ---------------------------------------------------------------- config / history

@dataclass(frozen=True)
class SchemeConfig:
    k: int
    tau: float
    num_steps: int
    source: object
    cutoff: Cutoff = field(default_factory=disabled)
    # ETD-RK2 baseline: stabilisation kappa, or None for the multistep scheme
    etd_kappa: Optional[float] = None
    # Gauss-Legendre substeps per starting level
    start_substeps: int = 1

    def __post_init__(self):
        if not 1 <= self.k <= K_MAX:
            raise ValueError(f"k must be in [1, {K_MAX}], got {self.k}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.num_steps < self.k:
            raise ValueError(f"need at least k={self.k} steps, got {self.num_steps}")

    @property
    def T(self) -> float:
        return self.tau * self.num_steps


@dataclass
class StepHistory:
    """Last k levels (newest first), their sources, and per-step diagnostics."""
    k: int
    t: float = 0.0
    n: int = 0
    levels: deque = field(default_factory=deque)
    f_levels: deque = field(default_factory=deque)
    rho: list = field(default_factory=list)
    umax: list = field(default_factory=list)
    umin: list = field(default_factory=list)
    violation_step: Optional[int] = None

    def push(self, u, f_u, t):
        self.levels.appendleft(u)
        self.f_levels.appendleft(f_u)
        while len(self.levels) > self.k:
            self.levels.pop()
            self.f_levels.pop()
        self.t = t

    def record(self, u_hat, u):
        self.rho.append(float(np.max(np.abs(u - u_hat))))
        self.umax.append(float(np.max(np.abs(u))))
        self.umin.append(float(np.min(u)))

    @property
    def current(self) -> np.ndarray:
        return self.levels[0]


# ---------------------------------------------------------------- extrapolation

def lagrange_extrapolation_coeffs(k: int) -> np.ndarray:
    """C[m, j-1]: coefficient of theta^m in L_j, where L_j(1 - i) = delta_ij.

    theta = (s - t_{n-1}) / tau, so t_{n-j} sits at theta = 1 - j.
    """
    if not 1 <= k <= K_MAX:
        raise ValueError(f"k must be in [1, {K_MAX}], got {k}")
    theta = 1.0 - np.arange(1, k + 1)
    V = np.vander(theta, k, increasing=True)   # V[i, m] = theta_i^m
    return np.linalg.solve(V, np.eye(k))


def _monomial_coeffs(k: int, f_levels: Sequence[np.ndarray]) -> list[np.ndarray]:
    C = lagrange_extrapolation_coeffs(k)
    F = np.stack(list(f_levels)[:k])
    return list(C @ F)


# ---------------------------------------------------------------- steps

def _source_values(cfg: SchemeConfig, u, t, hist: StepHistory):
    src = cfg.source
    if src.semilinear and not src.in_domain(u):
        if hist.violation_step is None:
            hist.violation_step = hist.n
            log.warning("domain violation at step %d (t=%.6g)", hist.n, t)
        return src(u, t, guard=True)
    return src(u, t)


def exp_multistep_step(ev: ExpEvaluator, cfg: SchemeConfig, hist: StepHistory, t_n: float):
    """Advance ``hist`` by one step of the k-step scheme; returns (u_hat, u_new)."""
    coeffs = _monomial_coeffs(cfg.k, hist.f_levels)
    u_hat = ev.propagate(cfg.tau, hist.current, coeffs)
    hist.n += 1
    u_new = cfg.cutoff.apply(u_hat)
    hist.record(u_hat, u_new)
    hist.push(u_new, _source_values(cfg, u_new, t_n, hist), t_n)
    return u_hat, u_new


def etd_rk2_step(ev: ExpEvaluator, cfg: SchemeConfig, u_prev: np.ndarray, kappa: float,
                 t: float = 0.0, hist: Optional[StepHistory] = None) -> np.ndarray:
    """Stabilised ETD-RK2 on u' = (L - kappa) u + (f(u) + kappa u)."""
    tau = cfg.tau
    hist = hist if hist is not None else StepHistory(k=1)

    def g(u, s):
        return _source_values(cfg, u, s, hist) + kappa * u

    g0 = g(u_prev, t)
    a = ev.combine(tau, [(0, u_prev), (1, tau * g0)], shift=kappa)
    return a + ev.combine(tau, [(2, tau * (g(a, t + tau) - g0))], shift=kappa)


# ---------------------------------------------------------------- starting values

_S3 = math.sqrt(3.0)
GL2_A = np.array([[0.25, 0.25 - _S3 / 6.0], [0.25 + _S3 / 6.0, 0.25]])
GL2_B = np.array([0.5, 0.5])
GL2_C = np.array([0.5 - _S3 / 6.0, 0.5 + _S3 / 6.0])
# u_new = u + d . (Y - u), d = b^T A^{-1}; avoids re-applying the stiff operator
GL2_D = GL2_B @ np.linalg.inv(GL2_A)


def gauss_legendre_step(L, u: np.ndarray, t: float, tau: float, source) -> np.ndarray:
    """One step of the two-stage Gauss-Legendre RK method for u' = L u + f(u, t).

    Stage values are found by Newton's method with the exact Jacobian; the
    linear case converges in one iteration.
    """
    L = sp.csr_matrix(L)
    n = u.size
    I = sp.identity(n, format="csr")
    Y = np.concatenate([u, u])
    times = t + GL2_C * tau

    def residual(Y):
        Y1, Y2 = Y[:n], Y[n:]
        F1 = L @ Y1 + source(Y1, times[0], guard=True)
        F2 = L @ Y2 + source(Y2, times[1], guard=True)
        return np.concatenate([
            Y1 - u - tau * (GL2_A[0, 0] * F1 + GL2_A[0, 1] * F2),
            Y2 - u - tau * (GL2_A[1, 0] * F1 + GL2_A[1, 1] * F2),
        ])

    for it in range(NEWTON_MAXITER):
        R = residual(Y)
        J1 = L + sp.diags(source.derivative(Y[:n], times[0]))
        J2 = L + sp.diags(source.derivative(Y[n:], times[1]))
        J = sp.bmat([[I - tau * GL2_A[0, 0] * J1, -tau * GL2_A[0, 1] * J2],
                     [-tau * GL2_A[1, 0] * J1, I - tau * GL2_A[1, 1] * J2]], format="csc")
        dY = spla.splu(J, permc_spec="MMD_AT_PLUS_A").solve(-R)
        Y = Y + dY
        if not np.all(np.isfinite(Y)):
            break
        if np.max(np.abs(dY)) <= NEWTON_TOL * max(1.0, np.max(np.abs(Y))):
            return u + GL2_D[0] * (Y[:n] - u) + GL2_D[1] * (Y[n:] - u)
    raise StartingFailure(f"Gauss-Legendre Newton iteration failed at t={t:.6g}")


def starting_values(ev: ExpEvaluator, cfg: SchemeConfig, u0: np.ndarray) -> StepHistory:
    """History holding u^0..u^{k-1} (semilinear) or u^0 with past forcing (linear)."""
    k, tau, src = cfg.k, cfg.tau, cfg.source
    u0 = np.asarray(u0, dtype=float)
    hist = StepHistory(k=k)
    if not src.semilinear:
        # forcing is known for t <= 0, so the multistep scheme starts at n = 1
        for j in range(k - 1, -1, -1):
            hist.push(u0 if j == 0 else None, src(u0, -j * tau), -j * tau)
        # levels other than the newest are never read in linear mode
        return hist
    hist.push(u0, _source_values(cfg, u0, 0.0, hist), 0.0)
    u = u0
    L = ev.op.generator
    for n in range(1, k):
        u_hat = u
        h = tau / cfg.start_substeps
        for j in range(cfg.start_substeps):
            u_hat = gauss_legendre_step(L, u_hat, (n - 1) * tau + j * h, h, src)
        hist.n = n
        u = cfg.cutoff.apply(u_hat)
        hist.record(u_hat, u)
        hist.push(u, _source_values(cfg, u, n * tau, hist), n * tau)
    return hist


# ---------------------------------------------------------------- driver

class Status(str, Enum):
    OK = "Ok"
    DOMAIN_VIOLATION = "DomainViolation"
    STARTING_FAILURE = "StartingFailure"


@dataclass
class RunResult:
    u: np.ndarray
    history: StepHistory
    status: Status
    snapshots: dict = field(default_factory=dict)

    @property
    def status_label(self) -> str:
        if self.status is Status.DOMAIN_VIOLATION:
            return f"DomainViolation({self.history.violation_step})"
        return self.status.value

    @property
    def rho(self) -> np.ndarray:
        return np.asarray(self.history.rho)


def solve(ev: ExpEvaluator, cfg: SchemeConfig, u0: np.ndarray,
          snapshot_steps: Sequence[int] = ()) -> RunResult:
    """Run ``cfg.num_steps`` steps from ``u0``; failures are reported, not raised."""
    u0 = np.asarray(u0, dtype=float)
    snaps = {0: u0.copy()} if 0 in snapshot_steps else {}
    tau = cfg.tau
    if cfg.etd_kappa is not None:
        hist = StepHistory(k=1)
        hist.push(u0, None, 0.0)
        u = u0
        for n in range(1, cfg.num_steps + 1):
            hist.n = n
            u_hat = etd_rk2_step(ev, cfg, u, cfg.etd_kappa, t=(n - 1) * tau, hist=hist)
            u = cfg.cutoff.apply(u_hat)
            hist.record(u_hat, u)
            hist.push(u, None, n * tau)
            if n in snapshot_steps:
                snaps[n] = u.copy()
    else:
        try:
            hist = starting_values(ev, cfg, u0)
        except StartingFailure as exc:
            log.error("%s", exc)
            return RunResult(u=u0, history=StepHistory(k=cfg.k), status=Status.STARTING_FAILURE)
        start = 1 if not cfg.source.semilinear else cfg.k
        for n in range(1, start):
            if n in snapshot_steps:
                snaps[n] = hist.levels[start - 1 - n].copy()
        for n in range(start, cfg.num_steps + 1):
            exp_multistep_step(ev, cfg, hist, n * tau)
            if n in snapshot_steps:
                snaps[n] = hist.current.copy()
        u = hist.current
    status = Status.OK if hist.violation_step is None else Status.DOMAIN_VIOLATION
    return RunResult(u=u, history=hist, status=status, snapshots=snaps)
