"""SIMP sensitivities, volume-weighted sensitivity filter and OC update."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .fem import MaterialSpec, element_energies
from .mesh import AdaptiveMesh, Topology

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OCParams:
    move: float = 0.2
    eta: float = 0.5
    bisection_tol: float = 1e-6
    lambda_bracket: tuple[float, float] = (1e-9, 1e9)

    def __post_init__(self):
        if not 0 <= self.move <= 1:
            raise ValueError(f"move limit must be in [0, 1], got {self.move}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")


@dataclass(frozen=True)
class ContinuationSchedule:
    p_start: float = 1.0
    p_end: float = 3.0
    p_step: float = 0.5
    steps_per_stage: int = 30

    def __post_init__(self):
        if self.p_start > self.p_end:
            raise ValueError("p_start must not exceed p_end")
        if self.p_step <= 0 and self.p_start < self.p_end:
            raise ValueError("p_step must be positive")

    def next_p(self, p: float) -> float:
        return min(self.p_end, p + self.p_step)


def sensitivities(topo: Topology, rho: np.ndarray, u: np.ndarray, mat: MaterialSpec, p: float | None = None) -> np.ndarray:
    """Compliance gradient ``-p rho^(p-1) E0 u_e^T k0 u_e`` per active element."""
    pen = mat.p if p is None else p
    energy = element_energies(topo, u, mat.nu)
    return -pen * rho ** (pen - 1.0) * mat.E0 * energy


def filter_matrix(topo: Topology, rmin: float) -> sp.csr_matrix:
    """Sparse ``H_de = max(rmin - dist(d, e), 0)`` over element centers."""
    n = topo.n_elem
    if rmin <= 0:
        return sp.csr_matrix((n, n))
    tree = cKDTree(topo.centers)
    D = tree.sparse_distance_matrix(tree, rmin, output_type="coo_matrix")
    off = D.row != D.col
    H = sp.coo_matrix((rmin - D.data[off], (D.row[off], D.col[off])), shape=(n, n)).tocsr()
    H = H + sp.diags(np.full(n, rmin))
    H.eliminate_zeros()
    return H.tocsr()


class SensitivityFilter:
    """Volume-weighted sensitivity filter bound to one mesh state."""

    def __init__(self, topo: Topology, rmin: float):
        self.rmin = rmin
        self.volumes = topo.volumes
        self.H = filter_matrix(topo, rmin)
        self.HV = (self.H @ sp.diags(self.volumes)).tocsr()
        self.row_weight = np.asarray(self.HV.sum(axis=1)).ravel()
        self.inactive = self.H.nnz <= topo.n_elem

    def __call__(self, rho: np.ndarray, dc: np.ndarray) -> np.ndarray:
        if self.inactive:
            return np.array(dc, dtype=float, copy=True)
        return (self.HV @ (rho * dc)) / (rho * self.row_weight)


def filter_sensitivities(mesh: AdaptiveMesh, rho: np.ndarray, dc: np.ndarray, rmin: float) -> np.ndarray:
    flt = SensitivityFilter(mesh.topology(), rmin)
    if flt.inactive:
        log.warning("sensitivity filter inactive: no element has a neighbour within rmin=%g", rmin)
    return flt(rho, dc)


class VolumeInfeasible(RuntimeError):
    pass


def oc_update(
    rho: np.ndarray,
    dc: np.ndarray,
    volumes: np.ndarray,
    max_volume: float,
    params: OCParams = OCParams(),
    rho_min: float = 1e-3,
) -> np.ndarray:
    """Optimality-criteria step with bisection on the volume multiplier.

    ``max_volume`` is the absolute admissible material volume. The multiplier
    is bracketed in log space; the bracket widens geometrically before giving up.
    """
    rho = np.asarray(rho, dtype=float)
    lo_b = np.maximum(rho_min, rho - params.move)
    hi_b = np.minimum(1.0, rho + params.move)
    ratio = np.maximum(-np.asarray(dc, dtype=float), 0.0) / volumes

    def update(lam):
        return np.clip(rho * (ratio / lam) ** params.eta, lo_b, hi_b)

    def vol(lam):
        return float(update(lam) @ volumes)

    lo, hi = params.lambda_bracket
    scale = float(np.max(ratio)) if np.any(ratio > 0) else 1.0
    lo, hi = lo * scale, hi * scale
    if float(hi_b @ volumes) <= max_volume:
        # constraint inactive even at the upper move bounds
        return hi_b
    floor = float(lo_b @ volumes)
    if floor > max_volume * (1 + 1e-9):
        raise VolumeInfeasible(f"lower-bound volume {floor:g} exceeds the admissible {max_volume:g}")
    if floor >= max_volume:
        return lo_b
    for _ in range(40):
        if vol(lo) > max_volume:
            break
        lo *= 1e-3
    for _ in range(40):
        if vol(hi) <= max_volume:
            break
        hi *= 1e3
    else:
        raise VolumeInfeasible(
            f"no multiplier satisfies the volume bound; lower-bound volume {float(lo_b @ volumes):g} > {max_volume:g}"
        )
    # keep the upper end feasible; stop on volume tolerance or a collapsed bracket
    llo, lhi = np.log(lo), np.log(hi)
    while lhi - llo > 1e-13:
        mid = 0.5 * (llo + lhi)
        v = vol(np.exp(mid))
        if v > max_volume:
            llo = mid
        else:
            lhi = mid
            if max_volume - v <= 1e-3 * params.bisection_tol * max_volume:
                break
    return update(np.exp(lhi))


def max_change(rho_old: np.ndarray, rho_new: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(rho_new) - np.asarray(rho_old)))) if len(rho_old) else 0.0


def check_convergence(history, tol: float = 0.01) -> tuple[bool, float]:
    """Converged iff the last two density fields differ by strictly less than ``tol``.

    ``history`` is a sequence of density arrays on the same mesh.
    """
    if len(history) < 2:
        raise ValueError("need at least two density fields")
    change = max_change(history[-2], history[-1])
    return change < tol, change


def initial_density(volumes: np.ndarray, volume_fraction: float) -> np.ndarray:
    return np.full(len(volumes), volume_fraction)
