"""Uniform 1D / tensor-product 2D lumped-mass finite element spaces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .gauss_lobatto import ReferenceElement, build_reference_element


class BC(str, Enum):
    NEUMANN = "neumann"
    PERIODIC = "periodic"


@dataclass(frozen=True)
class Grid:
    dim: int
    a: float
    b: float
    num_cells: int
    elem: ReferenceElement
    bc: BC
    # per-axis coordinates and lumped weights
    axis_nodes: np.ndarray = field(repr=False)
    axis_weights: np.ndarray = field(repr=False)

    @property
    def degree(self) -> int:
        return self.elem.degree

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.num_cells

    @property
    def n_axis(self) -> int:
        return self.axis_nodes.size

    @property
    def num_nodes(self) -> int:
        return self.n_axis ** self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_axis,) * self.dim

    @cached_property
    def global_weights(self) -> np.ndarray:
        if self.dim == 1:
            return self.axis_weights
        return np.outer(self.axis_weights, self.axis_weights).ravel()

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (num_nodes, dim), C-order for dim=2."""
        if self.dim == 1:
            return self.axis_nodes[:, None]
        X1, X2 = np.meshgrid(self.axis_nodes, self.axis_nodes, indexing="ij")
        return np.column_stack([X1.ravel(), X2.ravel()])

    def cell_dofs(self) -> np.ndarray:
        """Global (axis) index of each local node, shape (M, r+1)."""
        r = self.degree
        idx = np.arange(self.num_cells)[:, None] * r + np.arange(r + 1)[None, :]
        if self.bc is BC.PERIODIC:
            idx = idx % self.n_axis
        return idx


def build_grid(dim: int, domain: tuple[float, float], M: int, r: int, bc="neumann") -> Grid:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if M < 2:
        raise ValueError(f"need at least 2 cells per axis, got M={M}")
    a, b = map(float, domain)
    if not b > a:
        raise ValueError(f"empty domain [{a}, {b}]")
    bc = BC(bc)
    elem = build_reference_element(r)
    h = (b - a) / M

    nodes = np.empty(M * r + 1)
    weights = np.zeros(M * r + 1)
    for i in range(M):
        left = a + i * h
        sl = slice(i * r, i * r + r + 1)
        nodes[sl] = left + 0.5 * h * (elem.nodes + 1.0)
        weights[sl] += 0.5 * h * elem.weights
    nodes[-1] = b
    if bc is BC.PERIODIC:
        weights[0] += weights[-1]
        nodes, weights = nodes[:-1], weights[:-1]
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return Grid(dim=dim, a=a, b=b, num_cells=M, elem=elem, bc=bc,
                axis_nodes=nodes, axis_weights=weights)


def assemble_stiffness_1d(grid: Grid) -> sp.csr_matrix:
    elem, h = grid.elem, grid.h
    D = elem.diff_matrix
    # Gauss-Lobatto is exact for the degree 2r-2 integrand phi_i' phi_j'
    local = (2.0 / h) * (D.T * elem.weights) @ D
    dofs = grid.cell_dofs()
    rows = np.repeat(dofs, elem.num_nodes, axis=1).ravel()
    cols = np.tile(dofs, (1, elem.num_nodes)).ravel()
    vals = np.tile(local.ravel(), grid.num_cells)
    n = grid.n_axis
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


@dataclass(frozen=True)
class DiscreteOperator:
    """Lumped mass diagonal plus (semi-definite) stiffness.

    The generator of the semi-discrete flow is ``L = -c * M^{-1} K`` with
    ``c = diffusion_coeff``, i.e. ``M u' + c K u = M f``.
    """
    grid: Optional[Grid]
    mass_diag: np.ndarray
    stiffness_1d: sp.csr_matrix
    diffusion_coeff: float

    @classmethod
    def from_matrices(cls, mass_diag, stiffness, diffusion_coeff: float = 1.0) -> "DiscreteOperator":
        """Operator without a grid, e.g. small test systems."""
        return cls(grid=None, mass_diag=np.asarray(mass_diag, dtype=float),
                   stiffness_1d=sp.csr_matrix(stiffness), diffusion_coeff=float(diffusion_coeff))

    @property
    def num_nodes(self) -> int:
        return self.mass_diag.size

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        if self.grid is None or self.grid.dim == 1:
            return self.stiffness_1d
        m = sp.diags(self.grid.axis_weights)
        K = self.stiffness_1d
        return (sp.kron(K, m) + sp.kron(m, K)).tocsr()

    def apply_stiffness(self, u: np.ndarray) -> np.ndarray:
        if self.grid is None or self.grid.dim == 1:
            return self.stiffness_1d @ u
        # Kronecker-sum identity, avoids materialising the 2D matrix
        n = self.grid.n_axis
        U = u.reshape(n, n)
        m = self.grid.axis_weights
        K = self.stiffness_1d
        return ((K @ U) * m[None, :] + m[:, None] * (K @ U.T).T).ravel()

    def apply_generator(self, u: np.ndarray) -> np.ndarray:
        return -self.diffusion_coeff * self.apply_stiffness(u) / self.mass_diag

    @cached_property
    def generator(self) -> sp.csr_matrix:
        """Sparse ``L = -c M^{-1} K``."""
        return (sp.diags(-self.diffusion_coeff / self.mass_diag) @ self.stiffness).tocsr()


def assemble_operators(grid: Grid, diffusion_coeff: float = 1.0) -> DiscreteOperator:
    if diffusion_coeff < 0:
        raise ValueError("diffusion coefficient must be non-negative")
    return DiscreteOperator(grid=grid, mass_diag=grid.global_weights,
                            stiffness_1d=assemble_stiffness_1d(grid),
                            diffusion_coeff=float(diffusion_coeff))


def _check_size(grid: Grid, *vecs):
    for v in vecs:
        if np.shape(v) != (grid.num_nodes,):
            raise ValueError(f"expected nodal vector of length {grid.num_nodes}, got shape {np.shape(v)}")


def discrete_inner(grid: Grid, u, v) -> float:
    _check_size(grid, u, v)
    return float(np.sum(grid.global_weights * u * v))


def discrete_norm(grid: Grid, u) -> float:
    return np.sqrt(discrete_inner(grid, u, u))


def interpolate(grid: Grid, f) -> np.ndarray:
    """Nodal values of ``f``; ``f`` takes one coordinate array per axis."""
    X = grid.coords
    vals = np.asarray(f(*X.T), dtype=float)
    return np.broadcast_to(vals, (grid.num_nodes,)).copy()


def _locate(grid: Grid, x: np.ndarray):
    """Cell index and reference coordinate of 1D points."""
    s = (x - grid.a) / grid.h
    cell = np.clip(np.floor(s).astype(int), 0, grid.num_cells - 1)
    xi = 2.0 * (s - cell) - 1.0
    return cell, np.clip(xi, -1.0, 1.0)


def evaluate(grid: Grid, u: np.ndarray, x) -> np.ndarray:
    """Evaluate the finite element function with nodal values ``u`` at 1D points."""
    if grid.dim != 1:
        raise NotImplementedError("point evaluation is only provided in 1D")
    _check_size(grid, u)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(x)
    cell, xi = _locate(grid, x)
    dofs = grid.cell_dofs()
    for c in np.unique(cell):
        sel = cell == c
        out[sel] = grid.elem.basis_matrix(xi[sel]) @ u[dofs[c]]
    return out


def continuous_l2_norm(grid: Grid, u: np.ndarray) -> float:
    """L2 norm of the piecewise polynomial with nodal values ``u`` (1D).

    Uses (r+2)-point Gauss-Legendre per cell, which is exact for degree 2r.
    """
    if grid.dim != 1:
        raise NotImplementedError("continuous norm is only provided in 1D")
    _check_size(grid, u)
    xg, wg = np.polynomial.legendre.leggauss(grid.degree + 2)
    B = grid.elem.basis_matrix(xg)
    vals = u[grid.cell_dofs()] @ B.T
    return float(np.sqrt(0.5 * grid.h * np.sum(vals ** 2 * wg[None, :])))


def l2_distance(grid: Grid, u: np.ndarray, fine: Grid, v: np.ndarray) -> float:
    """L2 norm of the difference of two finite element functions on nested 1D grids.

    Integrates cell by cell on ``fine`` with Gauss-Legendre points, exact when
    every cell of ``grid`` is a union of cells of ``fine``.
    """
    if grid.dim != 1 or fine.dim != 1:
        raise NotImplementedError("l2_distance is only provided in 1D")
    _check_size(fine, v)
    q = max(grid.degree, fine.degree) + 1
    xg, wg = np.polynomial.legendre.leggauss(q)
    left = fine.a + fine.h * np.arange(fine.num_cells)
    pts = (left[:, None] + 0.5 * fine.h * (xg[None, :] + 1.0)).ravel()
    vals_fine = (v[fine.cell_dofs()] @ fine.elem.basis_matrix(xg).T).ravel()
    diff = evaluate(grid, u, pts) - vals_fine
    return float(np.sqrt(0.5 * fine.h * np.sum(diff.reshape(-1, q) ** 2 * wg[None, :])))


def write_nodal_csv(path, grid: Grid, u: np.ndarray) -> None:
    _check_size(grid, u)
    header = ["x", "value"] if grid.dim == 1 else ["x1", "x2", "value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xs, val in zip(grid.coords, u):
            w.writerow([f"{c:.9e}" for c in xs] + [f"{val:.9e}"])


def read_nodal_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1]
