"""Plane-stress bilinear quadrilateral elasticity on adaptive quadtree meshes.

Every mesh DOF stays in the linear system. Hanging-node DOFs are handled by
projection with the interpolation operator, and their rows/columns are
replaced by unit rows. Dirichlet DOFs are eliminated symmetrically.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import AdaptiveMesh, Topology


class ConfigurationError(ValueError):
    """Invalid material, load or boundary specification."""


@dataclass(frozen=True)
class MaterialSpec:
    E0: float = 1.0
    nu: float = 0.3
    p: float = 3.0
    rho_min: float = 1e-3

    def __post_init__(self):
        if not self.E0 > 0:
            raise ConfigurationError(f"E0 must be positive, got {self.E0}")
        if not 0 <= self.nu < 0.5:
            raise ConfigurationError(f"nu must be in [0, 0.5), got {self.nu}")
        if not self.p >= 1:
            raise ConfigurationError(f"p must be >= 1, got {self.p}")
        if not 0 < self.rho_min < 1:
            raise ConfigurationError(f"rho_min must be in (0, 1), got {self.rho_min}")


@dataclass(frozen=True)
class Selector:
    """Geometric node selector: a line ``x = c`` / ``y = c`` or a point.

    Coordinates left as None are unconstrained. Matching uses half the finest
    element size as tolerance so selections survive remeshing.
    """

    x: float | None = None
    y: float | None = None

    def __post_init__(self):
        if self.x is None and self.y is None:
            raise ConfigurationError("selector needs at least one of x, y")

    @property
    def is_point(self) -> bool:
        return self.x is not None and self.y is not None

    def select(self, node_xy: np.ndarray, tol: float) -> np.ndarray:
        if self.is_point:
            d = np.hypot(node_xy[:, 0] - self.x, node_xy[:, 1] - self.y)
            k = int(np.argmin(d))
            return np.array([k]) if d[k] <= tol else np.array([], dtype=int)
        mask = np.ones(len(node_xy), dtype=bool)
        if self.x is not None:
            mask &= np.abs(node_xy[:, 0] - self.x) <= tol
        if self.y is not None:
            mask &= np.abs(node_xy[:, 1] - self.y) <= tol
        return np.nonzero(mask)[0]


_COMPONENTS = {"x": (0,), "y": (1,), "both": (0, 1)}


@dataclass(frozen=True)
class FixedBC:
    where: Selector
    component: str = "both"
    value: float = 0.0


@dataclass(frozen=True)
class PointLoad:
    where: Selector
    component: str
    magnitude: float


@dataclass(frozen=True)
class BoundarySpec:
    fixed: tuple[FixedBC, ...]
    loads: tuple[PointLoad, ...]

    def __post_init__(self):
        if not self.fixed:
            raise ConfigurationError("at least one fixed boundary is required")
        for item in (*self.fixed, *self.loads):
            if item.component not in _COMPONENTS:
                raise ConfigurationError(f"unknown component {item.component!r}")
        for ld in self.loads:
            if ld.component == "both":
                raise ConfigurationError("a point load acts on a single component")

    def resolve(self, topo: Topology) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(fixed_dofs, fixed_values, f)`` on the given mesh."""
        tol = 0.5 * float(topo.sizes.min())
        vals: dict[int, float] = {}
        for bc in self.fixed:
            nodes = bc.where.select(topo.node_xy, tol)
            if nodes.size == 0:
                raise ConfigurationError(f"fixed selector {bc.where} matches no node")
            for c in _COMPONENTS[bc.component]:
                for n in nodes:
                    vals[2 * int(n) + c] = bc.value
        f = np.zeros(2 * topo.n_nodes)
        for ld in self.loads:
            nodes = ld.where.select(topo.node_xy, tol)
            if nodes.size == 0:
                raise ConfigurationError(f"load selector {ld.where} matches no node")
            c = _COMPONENTS[ld.component][0]
            f[2 * nodes + c] += ld.magnitude / nodes.size
        dofs = np.array(sorted(vals), dtype=np.int64)
        return dofs, np.array([vals[d] for d in dofs]), f


@lru_cache(maxsize=32)
def _unit_q4(nu: float) -> np.ndarray:
    """Unit-modulus plane-stress Q4 stiffness of a square, 2x2 Gauss rule."""
    D = np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]) / (1.0 - nu**2)
    # natural coordinates of the corners, counter-clockwise from lower-left
    xi_n = np.array([-1.0, 1.0, 1.0, -1.0])
    eta_n = np.array([-1.0, -1.0, 1.0, 1.0])
    g = 1.0 / np.sqrt(3.0)
    ke = np.zeros((8, 8))
    # side length s: dN/dx = (2/s) dN/dxi and det J = s^2/4, so s cancels
    for xi in (-g, g):
        for eta in (-g, g):
            dn_dxi = 0.25 * xi_n * (1 + eta * eta_n)
            dn_deta = 0.25 * eta_n * (1 + xi * xi_n)
            B = np.zeros((3, 8))
            B[0, 0::2] = 2 * dn_dxi
            B[1, 1::2] = 2 * dn_deta
            B[2, 0::2] = 2 * dn_deta
            B[2, 1::2] = 2 * dn_dxi
            ke += B.T @ D @ B * 0.25
    ke = 0.5 * (ke + ke.T)
    ke.setflags(write=False)
    return ke


def element_stiffness_q4(E: float, nu: float, size: float = 1.0) -> np.ndarray:
    """8x8 stiffness of a square plane-stress bilinear element.

    DOFs are ordered ``(u0, v0, u1, v1, ...)`` over the corners counter-clockwise
    from the lower-left. The result does not depend on ``size``.
    """
    if not E > 0:
        raise ValueError(f"modulus must be positive, got {E}")
    return E * _unit_q4(float(nu))


def simp_modulus(rho, p: float, E0: float, rho_min: float = 0.0):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < rho_min) or np.any(rho > 1.0) or np.any(rho <= 0.0):
        raise ValueError("density outside [rho_min, 1]")
    out = rho**p * E0
    return float(out) if out.ndim == 0 else out


def element_dofs(conn: np.ndarray) -> np.ndarray:
    edof = np.empty((len(conn), 8), dtype=np.int64)
    edof[:, 0::2] = 2 * conn
    edof[:, 1::2] = 2 * conn + 1
    return edof


@dataclass
class SparseSymSystem:
    """Stiffness system over all mesh DOFs with constraint metadata.

    ``P`` maps a full DOF vector to the values of the constrained (hanging)
    DOFs, row ``k`` belonging to DOF ``constrained[k]``. After
    :func:`apply_constraints` the matrix and rhs hold the projected,
    Dirichlet-eliminated operator and ``reduced`` is set.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    load: np.ndarray
    constrained: np.ndarray
    P: sp.csr_matrix
    fixed: np.ndarray
    fixed_values: np.ndarray
    reduced: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def ndof(self) -> int:
        return len(self.rhs)

    @property
    def n_free(self) -> int:
        return self.ndof - len(self.constrained) - len(self.fixed)


def interpolation_operator(topo: Topology) -> tuple[np.ndarray, sp.csr_matrix]:
    """Constrained DOFs and the operator giving their values from parents.

    Chained constraints are resolved so that every column refers to an
    unconstrained DOF.
    """
    parents = {h.node: h for h in topo.hanging}
    weights: dict[int, dict[int, float]] = {}

    def resolve(node):
        if node not in parents:
            return {node: 1.0}
        if node in weights:
            return weights[node]
        w: dict[int, float] = {}
        h = parents[node]
        for p, a in zip(h.parents, h.weights):
            for q, b in resolve(p).items():
                w[q] = w.get(q, 0.0) + a * b
        weights[node] = w
        return w

    rows, cols, vals, cdofs = [], [], [], []
    nodes = sorted(parents)
    for k, node in enumerate(nodes):
        for comp in (0, 1):
            r = 2 * k + comp
            cdofs.append(2 * node + comp)
            for q, w in resolve(node).items():
                rows.append(r)
                cols.append(2 * q + comp)
                vals.append(w)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(2 * len(nodes), 2 * topo.n_nodes))
    return np.array(cdofs, dtype=np.int64), P


def assemble(
    mesh: AdaptiveMesh,
    rho: np.ndarray,
    mat: MaterialSpec,
    bc: BoundarySpec,
    p: float | None = None,
) -> SparseSymSystem:
    """Global stiffness ``sum_e rho_e^p E0 k0`` with loads and constraint metadata."""
    topo = mesh.topology()
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (topo.n_elem,):
        raise ValueError(f"density has shape {rho.shape}, mesh has {topo.n_elem} active elements")
    pen = mat.p if p is None else p
    ke = element_stiffness_q4(1.0, mat.nu)
    edof = element_dofs(topo.conn)
    E = mat.E0 * rho**pen
    ndof = 2 * topo.n_nodes
    vals = (E[:, None, None] * ke[None]).ravel()
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((vals, (rows, cols)), shape=(ndof, ndof)).tocsr()
    K.sum_duplicates()
    fixed, fixed_values, f = bc.resolve(topo)
    cdofs, P = interpolation_operator(topo)
    return SparseSymSystem(K, f.copy(), f, cdofs, P, fixed, fixed_values, meta={"mesh_version": mesh.version})


def projection_matrix(sys: SparseSymSystem) -> sp.csr_matrix:
    """``T = [I 0; P 0]`` in the full DOF ordering."""
    n = sys.ndof
    keep = np.ones(n)
    keep[sys.constrained] = 0.0
    T = sp.diags(keep).tocsr()
    if len(sys.constrained):
        rows = sys.constrained[sys.P.tocoo().row]
        Pc = sys.P.tocoo()
        T = T + sp.csr_matrix((Pc.data, (rows, Pc.col)), shape=(n, n))
    return T.tocsr()


def apply_constraints(sys: SparseSymSystem) -> SparseSymSystem:
    """Project out hanging DOFs, then eliminate Dirichlet DOFs symmetrically."""
    if sys.reduced:
        return sys
    n = sys.ndof
    T = projection_matrix(sys)
    cmask = np.zeros(n)
    cmask[sys.constrained] = 1.0
    A = (T.T @ sys.matrix @ T + sp.diags(cmask)).tocsr()
    b = T.T @ sys.load
    if len(sys.fixed):
        u0 = np.zeros(n)
        u0[sys.fixed] = sys.fixed_values
        b = b - A @ u0
        fmask = np.zeros(n)
        fmask[sys.fixed] = 1.0
        keep = sp.diags(1.0 - fmask)
        A = (keep @ A @ keep + sp.diags(fmask)).tocsr()
        b[sys.fixed] = sys.fixed_values
    A.eliminate_zeros()
    A.sort_indices()
    return replace(sys, matrix=A, rhs=b, reduced=True)


def recover_full(sys: SparseSymSystem, u_hat: np.ndarray) -> np.ndarray:
    """Overwrite hanging DOFs with their interpolants."""
    u = np.array(u_hat, dtype=float, copy=True)
    if len(sys.constrained):
        u[sys.constrained] = sys.P @ u
    return u


def compliance(f: np.ndarray, u: np.ndarray) -> float:
    return float(np.dot(f, u))


def element_energies(topo: Topology, u: np.ndarray, nu: float) -> np.ndarray:
    """``u_e^T k0 u_e`` per active element with unit modulus."""
    ue = u[element_dofs(topo.conn)]
    return np.einsum("ei,ij,ej->e", ue, _unit_q4(float(nu)), ue)


def to_matrix_market(sys: SparseSymSystem, path) -> None:
    import scipy.io

    scipy.io.mmwrite(str(path), sys.matrix, symmetry="symmetric")
