"""Gauss-Lobatto reference element on [-1, 1].

The (r+1) Gauss-Lobatto points double as the nodal points of the degree-r
Lagrange basis, which is what makes the quadrature-lumped mass matrix diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEGREE = 16
_NEWTON_TOL = 1e-14
_NEWTON_MAXITER = 100


def legendre_and_derivative(r: int, x):
    """Return (P_r(x), P_r'(x)) by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev = np.ones_like(x)
    if r == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    dp_prev = np.zeros_like(x)
    dp = np.ones_like(x)
    for n in range(1, r):
        p_next = ((2 * n + 1) * x * p - n * p_prev) / (n + 1)
        dp_next = dp_prev + (2 * n + 1) * p
        p_prev, p = p, p_next
        dp_prev, dp = dp, dp_next
    return p, dp


def _interior_nodes(r: int) -> np.ndarray:
    # Roots of P_r' via Newton, started from Chebyshev-Gauss-Lobatto points.
    if r < 2:
        return np.empty(0)
    x = -np.cos(np.pi * np.arange(1, r) / r)
    for _ in range(_NEWTON_MAXITER):
        p, dp = legendre_and_derivative(r, x)
        # Legendre ODE: (1 - x^2) P'' = 2x P' - r(r+1) P
        ddp = (2.0 * x * dp - r * (r + 1) * p) / (1.0 - x * x)
        dx = dp / ddp
        x = x - dx
        if np.max(np.abs(dx)) < _NEWTON_TOL:
            break
    else:
        raise RuntimeError(f"Gauss-Lobatto Newton iteration did not converge for r={r}")
    # symmetrize to kill the last-bit asymmetry of the iteration
    x = 0.5 * (x - x[::-1])
    return x


def barycentric_weights(nodes: np.ndarray) -> np.ndarray:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / np.prod(diff, axis=1)


@dataclass(frozen=True)
class ReferenceElement:
    degree: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray
    bary: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.degree + 1

    def basis_matrix(self, x) -> np.ndarray:
        """Values of all Lagrange basis functions at the points ``x``.

        Returns an array of shape ``(len(x), r+1)``; rows sum to one.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        diff = x[:, None] - self.nodes[None, :]
        exact = diff == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = self.bary[None, :] / diff
            out = terms / terms.sum(axis=1, keepdims=True)
        hit = exact.any(axis=1)
        out[hit] = exact[hit].astype(float)
        return out


def build_reference_element(r: int) -> ReferenceElement:
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= MAX_DEGREE:
        raise ValueError(f"degree must be an integer in [1, {MAX_DEGREE}], got {r!r}")
    r = int(r)
    nodes = np.concatenate(([-1.0], _interior_nodes(r), [1.0]))
    p, _ = legendre_and_derivative(r, nodes)
    weights = 2.0 / (r * (r + 1) * p * p)
    weights = 0.5 * (weights + weights[::-1])

    bary = barycentric_weights(nodes)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (bary[None, :] / bary[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))

    for arr in (nodes, weights, D, bary):
        arr.setflags(write=False)
    return ReferenceElement(degree=r, nodes=nodes, weights=weights, diff_matrix=D, bary=bary)


def lagrange_eval(elem: ReferenceElement, j: int, x: float) -> float:
    """Value of the j-th nodal Lagrange basis polynomial at ``x``."""
    if not 0 <= j <= elem.degree:
        raise IndexError(f"basis index {j} out of range for degree {elem.degree}")
    return float(elem.basis_matrix([x])[0, j])


def quadrature(elem: ReferenceElement, func) -> float:
    return float(np.dot(elem.weights, func(elem.nodes)))
