"""Reaction terms f = -F' for the Allen-Cahn equation and linear forcing."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

DELTA_GUARD = 1e-13


class DomainViolation(ArithmeticError):
    """A Flory-Huggins argument left the open interval (-1, 1)."""


class PotentialKind(str, Enum):
    GINZBURG_LANDAU = "ginzburg-landau"
    FLORY_HUGGINS = "flory-huggins"
    LINEAR = "linear"


@dataclass(frozen=True)
class PotentialSpec:
    """Nonlinearity f(u), scaled by 1/epsilon^2.

    Ginzburg-Landau: f(u) = (u - u^3) / eps^2, wells at +-1.
    Flory-Huggins:   f(u) = (theta_c u - theta atanh(u)) / eps^2,
                     wells at +-alpha with atanh(alpha)/alpha = theta_c/theta.
    Linear: no u-dependence; ``forcing(x..., t)`` is a given source (may be None).
    """
    kind: PotentialKind
    epsilon: float = 1.0
    theta: float = 0.25
    theta_c: float = 1.0
    forcing: Optional[Callable] = None
    alpha: float = 1.0

    @property
    def scale(self) -> float:
        return 1.0 / self.epsilon ** 2

    @property
    def semilinear(self) -> bool:
        return self.kind is not PotentialKind.LINEAR


def ginzburg_landau(epsilon: float = 1.0) -> PotentialSpec:
    return PotentialSpec(PotentialKind.GINZBURG_LANDAU, epsilon=epsilon, alpha=1.0)


def flory_huggins(theta: float = 0.25, theta_c: float = 1.0, epsilon: float = 1.0) -> PotentialSpec:
    if not 0 < theta < theta_c:
        raise ValueError(f"Flory-Huggins needs 0 < theta < theta_c, got theta={theta}, theta_c={theta_c}")
    alpha = solve_alpha_ratio(theta_c / theta)
    return PotentialSpec(PotentialKind.FLORY_HUGGINS, epsilon=epsilon, theta=theta,
                         theta_c=theta_c, alpha=alpha)


def linear_forcing(forcing: Optional[Callable] = None) -> PotentialSpec:
    return PotentialSpec(PotentialKind.LINEAR, forcing=forcing, alpha=np.inf)


def _fh_argument(u, guard: bool):
    u = np.asarray(u, dtype=float)
    bad = ~(np.abs(u) < 1.0)
    if np.any(bad) and not guard:
        raise DomainViolation(f"Flory-Huggins argument outside (-1, 1): max |u| = {np.max(np.abs(u)):.6g}")
    lim = 1.0 - DELTA_GUARD
    return np.clip(np.nan_to_num(u, nan=0.0), -lim, lim) if guard else u


def eval_f(spec: PotentialSpec, u, guard: bool = False):
    """f(u) componentwise; ``guard`` clamps Flory-Huggins arguments into (-1, 1)."""
    kind = spec.kind
    if kind is PotentialKind.GINZBURG_LANDAU:
        u = np.asarray(u, dtype=float)
        out = spec.scale * (u - u ** 3)
    elif kind is PotentialKind.FLORY_HUGGINS:
        u = _fh_argument(u, guard)
        out = spec.scale * (spec.theta_c * u - spec.theta * np.arctanh(u))
    else:
        out = np.zeros_like(np.asarray(u, dtype=float))
    return out if np.ndim(out) else float(out)


def eval_df(spec: PotentialSpec, u, guard: bool = True):
    """Derivative f'(u), used by the Newton solves of the starting procedure."""
    kind = spec.kind
    if kind is PotentialKind.GINZBURG_LANDAU:
        u = np.asarray(u, dtype=float)
        return spec.scale * (1.0 - 3.0 * u ** 2)
    if kind is PotentialKind.FLORY_HUGGINS:
        u = _fh_argument(u, guard)
        return spec.scale * (spec.theta_c - spec.theta / (1.0 - u * u))
    return np.zeros_like(np.asarray(u, dtype=float))


def eval_f_nodal(spec: PotentialSpec, u: np.ndarray, guard: bool = False) -> np.ndarray:
    return np.asarray(eval_f(spec, np.asarray(u, dtype=float), guard=guard), dtype=float).reshape(np.shape(u))


def solve_alpha_ratio(ratio: float, tol: float = 1e-14, maxiter: int = 200) -> float:
    """Positive root of atanh(a) = ratio * a, i.e. (1/2a) ln((1+a)/(1-a)) = ratio.

    Newton from 1 - 1/ratio, safeguarded by a bisection bracket.
    """
    if not ratio > 1.0:
        raise ValueError(f"no root in (0, 1) unless theta_c/theta > 1 (got {ratio})")

    def g(a):
        return 2.0 * np.arctanh(a) - 2.0 * ratio * a

    lo, hi = 1e-8, 1.0 - 1e-15
    if g(lo) >= 0:
        # ratio so close to 1 that the root sits below the bracket
        return lo
    a = 1.0 - 1.0 / ratio
    for _ in range(maxiter):
        ga = g(a)
        if abs(ga) <= tol:
            return float(a)
        if ga < 0:
            lo = a
        else:
            hi = a
        dg = 2.0 / (1.0 - a * a) - 2.0 * ratio
        step = a - ga / dg if dg != 0 else np.nan
        a_new = step if lo < step < hi else 0.5 * (lo + hi)
        if a_new == a or hi - lo <= 4 * np.spacing(hi):
            return float(a_new)
        a = a_new
    raise RuntimeError("alpha root iteration did not converge")


def solve_alpha(spec: PotentialSpec) -> float:
    if spec.kind is PotentialKind.GINZBURG_LANDAU:
        return 1.0
    if spec.kind is not PotentialKind.FLORY_HUGGINS:
        raise ValueError("alpha is only defined for double-well potentials")
    if not spec.theta_c > spec.theta:
        raise ValueError("Flory-Huggins needs theta_c > theta")
    return solve_alpha_ratio(spec.theta_c / spec.theta)


def stabilization_ok(tau: float, kappa: float, alpha: float, epsilon: float = 1.0) -> bool:
    """Stabilised ETD-RK2 maximum-principle criterion, in units where f carries 1/eps^2.

    1/tau + kappa >= (1/(4(1 - alpha^2)) - 1) / eps^2.
    """
    if alpha >= 1.0:
        return True
    return 1.0 / tau + kappa >= (1.0 / (4.0 * (1.0 - alpha ** 2)) - 1.0) / epsilon ** 2


def lipschitz_bound(spec: PotentialSpec, samples: int = 10_000) -> float:
    """max |f'| over a uniform sample of [-alpha, alpha]."""
    u = np.linspace(-spec.alpha, spec.alpha, samples)
    return float(np.max(np.abs(eval_df(spec, u))))
