"""Linear triangular finite elements on the square [0, L]^2.

The mesh is a structured grid of ``n_per_side**2`` nodes where every grid
square is cut by its lower-left to upper-right diagonal. Parameter fields
(transmissivity, storativity) are piecewise constant per triangle, so all
element integrals below are exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError

# P1 consistent mass on a reference triangle, scaled by area
_MASS_PATTERN = (np.ones((3, 3)) + np.eye(3)) / 12.0


@dataclass(frozen=True)
class Mesh2D:
    """Structured triangulation of the square [0, L]^2.

    Nodes are numbered row by row, ``index = i + j * n_per_side`` for the
    node at ``(i * h, j * h)``. Elements are numbered per grid square,
    two per square, lower triangle first.
    """

    n_per_side: int
    L: float
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    dirichlet_nodes: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return self.L / (self.n_per_side - 1)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.dirichlet_nodes] = False
        return np.flatnonzero(mask)

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @property
    def areas(self) -> np.ndarray:
        return element_geometry(self)[1]

    def locate(self, point):
        """Return ``(element, barycentric weights)`` for a point in the domain.

        Points on shared edges are assigned deterministically to the
        element with the smaller grid-square index.
        """
        x, y = (float(c) for c in point)
        tol = 1e-12 * self.L
        if not (-tol <= x <= self.L + tol and -tol <= y <= self.L + tol):
            raise InvalidArgumentError(
                f"point ({x}, {y}) lies outside [0, {self.L}]^2"
            )
        n = self.n_per_side
        h = self.h
        xi_g = min(max(x / h, 0.0), n - 1.0)
        eta_g = min(max(y / h, 0.0), n - 1.0)
        i = min(int(np.floor(xi_g)), n - 2)
        j = min(int(np.floor(eta_g)), n - 2)
        xi = xi_g - i
        eta = eta_g - j
        square = j * (n - 1) + i
        if xi >= eta:
            # lower triangle: (i,j), (i+1,j), (i+1,j+1)
            return 2 * square, np.array([1.0 - xi, xi - eta, eta])
        # upper triangle: (i,j), (i+1,j+1), (i,j+1)
        return 2 * square + 1, np.array([1.0 - eta, xi, eta - xi])


def build_mesh(n_per_side: int, L: float) -> Mesh2D:
    """Triangulate [0, L]^2 with ``n_per_side`` nodes along each side."""
    if int(n_per_side) != n_per_side or n_per_side < 2:
        raise InvalidArgumentError(f"n_per_side must be an integer >= 2, got {n_per_side}")
    if not L > 0:
        raise InvalidArgumentError(f"L must be positive, got {L}")
    n = int(n_per_side)
    coords = np.linspace(0.0, float(L), n)
    X, Y = np.meshgrid(coords, coords)  # row j holds y = coords[j]
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    i = i.ravel()
    j = j.ravel()
    ll = i + j * n
    lr = ll + 1
    ul = ll + n
    ur = ul + 1
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    elements = np.empty((2 * (n - 1) ** 2, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper

    on_edge = (
        np.isclose(nodes[:, 0], 0.0)
        | np.isclose(nodes[:, 0], L)
        | np.isclose(nodes[:, 1], 0.0)
        | np.isclose(nodes[:, 1], L)
    )
    dirichlet = np.flatnonzero(on_edge)
    for arr in (nodes, elements, dirichlet):
        arr.setflags(write=False)
    return Mesh2D(n, float(L), nodes, elements, dirichlet)


def element_geometry(mesh: Mesh2D):
    """Return P1 basis gradients ``(E, 3, 2)`` and signed areas ``(E,)``."""
    p = mesh.nodes[mesh.elements]
    x0, y0 = p[:, 0, 0], p[:, 0, 1]
    x1, y1 = p[:, 1, 0], p[:, 1, 1]
    x2, y2 = p[:, 2, 0], p[:, 2, 1]
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    grads = np.empty((mesh.n_elements, 3, 2))
    grads[:, 0, 0] = y1 - y2
    grads[:, 0, 1] = x2 - x1
    grads[:, 1, 0] = y2 - y0
    grads[:, 1, 1] = x0 - x2
    grads[:, 2, 0] = y0 - y1
    grads[:, 2, 1] = x1 - x0
    grads /= det[:, None, None]
    return grads, 0.5 * det


def local_stiffness(mesh: Mesh2D) -> np.ndarray:
    """Unit-coefficient element stiffness matrices, shape ``(E, 3, 3)``."""
    grads, area = element_geometry(mesh)
    return area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)


def local_mass(mesh: Mesh2D) -> np.ndarray:
    """Unit-coefficient consistent element mass matrices, shape ``(E, 3, 3)``."""
    area = element_geometry(mesh)[1]
    return area[:, None, None] * _MASS_PATTERN[None, :, :]


def _scatter(mesh: Mesh2D, local: np.ndarray) -> sp.csc_matrix:
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return A.tocsc()


@dataclass(frozen=True)
class AssembledOperators:
    """Stiffness/mass pencil of one parameter field.

    ``K`` and ``M`` act on the free (interior) degrees of freedom only;
    ``K_full`` and ``M_full`` keep every node and are used for checks
    that need the operator before Dirichlet elimination.
    """

    mesh: Mesh2D
    kappa: np.ndarray = field(repr=False)
    storativity: np.ndarray = field(repr=False)
    K: sp.csc_matrix = field(repr=False)
    M: sp.csc_matrix = field(repr=False)
    K_full: sp.csc_matrix = field(repr=False)
    M_full: sp.csc_matrix = field(repr=False)
    free_dofs: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.free_dofs.size

    def restrict(self, full_vector):
        return np.asarray(full_vector)[self.free_dofs]

    def extend(self, free_vector):
        """Insert zero Dirichlet values; works on vectors and column stacks."""
        free_vector = np.asarray(free_vector)
        out = np.zeros((self.mesh.n_nodes,) + free_vector.shape[1:], dtype=free_vector.dtype)
        out[self.free_dofs] = free_vector
        return out


def _per_element(values, mesh, name):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(mesh.n_elements, float(arr))
    if arr.shape != (mesh.n_elements,):
        raise InvalidArgumentError(
            f"{name} needs one value per element ({mesh.n_elements}), got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidArgumentError(f"{name} must be finite and strictly positive")
    return arr


def assemble(mesh: Mesh2D, kappa, storativity) -> AssembledOperators:
    """Assemble K and M for per-element transmissivity and storativity.

    Scalars are broadcast to every element. Dirichlet nodes (the whole
    boundary) are removed symmetrically from both matrices.
    """
    kappa = _per_element(kappa, mesh, "kappa")
    storativity = _per_element(storativity, mesh, "storativity")
    K_full = _scatter(mesh, kappa[:, None, None] * local_stiffness(mesh))
    M_full = _scatter(mesh, storativity[:, None, None] * local_mass(mesh))
    free = mesh.free_nodes
    K = K_full[free][:, free].tocsc()
    M = M_full[free][:, free].tocsc()
    kappa.setflags(write=False)
    storativity.setflags(write=False)
    return AssembledOperators(mesh, kappa, storativity, K, M, K_full, M_full, free)


def point_source(mesh: Mesh2D, x_s) -> np.ndarray:
    """Full-length vector of P1 basis values at ``x_s``.

    This is both the load vector of a unit point source and the
    point-evaluation functional of a receiver.
    """
    element, weights = mesh.locate(x_s)
    vec = np.zeros(mesh.n_nodes)
    np.add.at(vec, mesh.elements[element], weights)
    vec[np.abs(vec) < 1e-15] = 0.0
    return vec


def write_mesh_csv(mesh: Mesh2D, directory) -> tuple[Path, Path]:
    """Write ``nodes.csv`` and ``elements.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dirichlet = set(int(k) for k in mesh.dirichlet_nodes)
    node_path = directory / "nodes.csv"
    with node_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "dirichlet"])
        for k, (x, y) in enumerate(mesh.nodes):
            w.writerow([k, f"{x:.17g}", f"{y:.17g}", int(k in dirichlet)])
    elem_path = directory / "elements.csv"
    with elem_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["element", "n0", "n1", "n2"])
        for k, (a, b, c) in enumerate(mesh.elements):
            w.writerow([k, a, b, c])
    return node_path, elem_path
