"""Outer optimization loop with dynamic mesh adaptation.

Each step assembles and solves the equilibrium system, filters the SIMP
sensitivities, applies an OC update and then decides whether to advance the
penalization and whether to adapt the mesh. Three adaptation modes exist:

``none``
    classical SIMP on the initial mesh.
``dynamic``
    refinement and derefinement everywhere, triggered every few steps.
``refine_only_static``
    converge on a mesh, refine the material region of the finest level once,
    never touch coarser levels again, repeat. This is the refine-only baseline.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import AdaptationPolicy, ProblemConfig
from .fem import apply_constraints, assemble, compliance
from .linsolve import solve_equilibrium
from .mesh import LATTICE_BITS, AdaptiveMesh, MarkSet, apply_marks, create_uniform, enforce_compatibility
from .topopt import SensitivityFilter, initial_density, max_change, oc_update, sensitivities

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    p: float
    compliance: float
    volume: float
    max_change: float
    n_elem: int
    n_unknowns: int
    lmax: int
    solver_iters: int
    solver_relres: float
    adapted: bool
    wall_time: float = 0.0


@dataclass
class AdaptationSummary:
    step: int
    lmax: int
    n_elem_before: int
    n_elem: int
    n_unknowns: int
    n_refined: int
    n_derefined: int


@dataclass
class DesignState:
    mesh: AdaptiveMesh | None = None
    rho: np.ndarray | None = None
    u: np.ndarray | None = None
    compliance: float = float("nan")
    step: int = 0
    steps_since_adapt: int = 0
    p: float = 1.0
    last_change: float = float("inf")
    last_compliance_change: float = float("inf")
    history: list[StepRecord] = field(default_factory=list)

    def rho_by_id(self) -> dict[int, float]:
        ids = self.mesh.topology().ids
        return dict(zip(ids.tolist(), self.rho.tolist()))

    def material_volume(self) -> float:
        return float(self.rho @ self.mesh.topology().volumes)


@dataclass
class RunReport:
    state: DesignState
    log: list[StepRecord]
    adaptations: list[AdaptationSummary]
    converged: bool
    mode: str

    @property
    def total_solver_iterations(self) -> int:
        return sum(r.solver_iters for r in self.log)

    @property
    def total_unknowns(self) -> int:
        return sum(r.n_unknowns for r in self.log)

    def summary_table(self) -> str:
        lines = [f"{'opt. step':>9} {'lmax':>5} {'#elem':>8} {'#unknowns':>10}"]
        for a in self.adaptations:
            lines.append(f"{a.step:>9} {a.lmax:>5} {a.n_elem:>8} {a.n_unknowns:>10}")
        last = self.log[-1]
        lines.append(f"{last.step:>9} {last.lmax:>5} {last.n_elem:>8} {last.n_unknowns:>10}")
        return "\n".join(lines)


def should_adapt(state: DesignState, policy: AdaptationPolicy) -> bool:
    """Adapt on a small change after enough steps, or after too many steps."""
    if policy.trigger == "compliance":
        small = state.last_compliance_change < policy.compliance_tol
    else:
        small = state.last_change < policy.change_tol
    return (small and state.steps_since_adapt >= policy.min_steps_between) or (
        state.steps_since_adapt >= policy.max_steps_between
    )


def mark_elements(
    mesh: AdaptiveMesh,
    rho: np.ndarray,
    policy: AdaptationPolicy,
    refine_levels: set[int] | None = None,
) -> MarkSet:
    """Refine solid elements and their ``r_amr`` neighbourhood; derefine isolated void.

    In ``refine_only_static`` mode nothing is derefined and only elements on
    ``refine_levels`` (default: the current finest level) may be refined.
    """
    if policy.mode == "none":
        raise ValueError("mark_elements called with adaptation disabled")
    topo = mesh.topology()
    solid = rho >= policy.rho_s
    near = solid.copy()
    if policy.r_amr > 0 and solid.any():
        tree = cKDTree(topo.centers[solid])
        counts = tree.query_ball_point(topo.centers, policy.r_amr, return_length=True)
        near |= counts > 0
    can_refine = topo.levels < policy.max_total_levels
    if policy.mode == "refine_only_static":
        levels = {mesh.max_level} if refine_levels is None else refine_levels
        can_refine &= np.isin(topo.levels, list(levels))
        refine = near & can_refine
        return MarkSet(set(topo.ids[refine].tolist()), set())
    refine = near & can_refine
    derefine = ~near & (topo.levels >= 1)
    return MarkSet(set(topo.ids[refine].tolist()), set(topo.ids[derefine].tolist()))


def _interpolate_new_nodes(mesh, old_values: dict, refined: dict[int, list[int]]) -> None:
    """Add bilinear interpolants of the parent element for nodes created by refinement."""
    for eid in refined:
        el = mesh.elements[eid]
        s = 1 << (LATTICE_BITS - el.level)
        x0, y0 = el.i * s, el.j * s
        corners = [(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)]
        vals = [old_values.get(c) for c in corners]
        if any(v is None for v in vals):
            continue
        h = s // 2
        mids = {
            (x0 + h, y0): (vals[0] + vals[1]) / 2,
            (x0 + s, y0 + h): (vals[1] + vals[2]) / 2,
            (x0 + h, y0 + s): (vals[3] + vals[2]) / 2,
            (x0, y0 + h): (vals[0] + vals[3]) / 2,
            (x0 + h, y0 + h): (vals[0] + vals[1] + vals[2] + vals[3]) / 4,
        }
        for k, v in mids.items():
            old_values.setdefault(k, v)


def adapt_mesh(state: DesignState, marks: MarkSet) -> tuple[DesignState, AdaptationSummary]:
    """Apply compatibility-checked marks and transfer density and displacement.

    Children inherit the parent density; a derefined parent receives the
    volume-weighted mean of its children, so total material is conserved.
    """
    mesh = state.mesh
    old_topo = mesh.topology()
    n_before = old_topo.n_elem
    old_rho = state.rho_by_id()
    groups = {}
    for e in marks.derefine:
        p = mesh.elements[e].parent
        groups.setdefault(p, list(mesh.elements[p].children))
    old_u = None
    if state.u is not None:
        keys = map(tuple, old_topo.node_keys.tolist())
        old_u = dict(zip(keys, state.u.reshape(-1, 2)))

    refined, derefined = apply_marks(mesh, marks)

    topo = mesh.topology()
    child_of = {c: p for p, kids in refined.items() for c in kids}
    rho = np.empty(topo.n_elem)
    for k, eid in enumerate(topo.ids.tolist()):
        if eid in old_rho:
            rho[k] = old_rho[eid]
        elif eid in child_of:
            rho[k] = old_rho[child_of[eid]]
        else:
            kids = groups[eid]
            # equal-area children: the volume-weighted mean is the plain mean
            rho[k] = sum(old_rho[c] for c in kids) / 4.0

    u = None
    if old_u is not None:
        _interpolate_new_nodes(mesh, old_u, refined)
        u = np.zeros((topo.n_nodes, 2))
        for k, key in enumerate(map(tuple, topo.node_keys.tolist())):
            v = old_u.get(key)
            if v is not None:
                u[k] = v
        u = u.ravel()

    new = DesignState(
        mesh=mesh,
        rho=rho,
        u=u,
        compliance=state.compliance,
        step=state.step,
        steps_since_adapt=0,
        p=state.p,
        last_change=state.last_change,
        last_compliance_change=state.last_compliance_change,
        history=state.history,
    )
    summary = AdaptationSummary(
        step=state.step,
        lmax=mesh.max_level,
        n_elem_before=n_before,
        n_elem=topo.n_elem,
        n_unknowns=2 * topo.n_nodes,
        n_refined=len(refined),
        n_derefined=len(derefined),
    )
    return new, summary


def run(
    cfg: ProblemConfig,
    mesh: AdaptiveMesh | None = None,
    rho: np.ndarray | None = None,
    p: float | None = None,
    max_steps: int | None = None,
    callback=None,
) -> RunReport:
    """Optimize ``cfg``; optionally restart from a given mesh, density and penalization."""
    policy = cfg.policy
    cont = cfg.continuation
    mat = cfg.material
    if mesh is None:
        mesh = create_uniform(cfg.nx, cfg.ny, (cfg.width, cfg.height))
    topo = mesh.topology()
    if rho is None:
        rho = initial_density(topo.volumes, cfg.volume_fraction)
    max_volume = cfg.volume_fraction * cfg.width * cfg.height
    state = DesignState(mesh=mesh, rho=np.array(rho, dtype=float), p=cont.p_start if p is None else p)
    max_steps = cfg.max_steps if max_steps is None else max_steps

    adaptations: list[AdaptationSummary] = []
    records: list[StepRecord] = []
    flt = None
    flt_version = -1
    stage_steps = 0
    level_steps = 0
    converged_run = False

    for step in range(1, max_steps + 1):
        t0 = time.perf_counter()
        topo = mesh.topology()
        if flt_version != mesh.version:
            flt = SensitivityFilter(topo, cfg.rmin)
            flt_version = mesh.version
        sys = apply_constraints(assemble(mesh, state.rho, mat, cfg.boundary, p=state.p))
        u, stats = solve_equilibrium(sys, warm=state.u, tol=cfg.solver_tol, maxit=cfg.solver_maxit)
        c = compliance(sys.load, u)
        dc = sensitivities(topo, state.rho, u, mat, p=state.p)
        dcf = flt(state.rho, dc)
        rho_new = oc_update(state.rho, dcf, topo.volumes, max_volume, cfg.oc, mat.rho_min)
        change = max_change(state.rho, rho_new)

        prev_c = state.compliance
        state.last_compliance_change = abs(c - prev_c) / abs(c) if np.isfinite(prev_c) and c else float("inf")
        state.rho, state.u, state.compliance = rho_new, u, c
        state.step = step
        state.steps_since_adapt += 1
        state.last_change = change
        p_used = state.p
        converged = change < cfg.convergence_tol
        at_end = state.p >= cont.p_end

        stage_steps += 1
        if not at_end and (converged or stage_steps >= cont.steps_per_stage):
            state.p = cont.next_p(state.p)
            stage_steps = 0

        adapted = False
        stop = False
        if policy.mode == "dynamic":
            if should_adapt(state, policy):
                marks = enforce_compatibility(mesh, mark_elements(mesh, state.rho, policy))
                if marks:
                    state, summary = adapt_mesh(state, marks)
                    adaptations.append(summary)
                    adapted = True
                    log.info("step %d: adapted mesh %d -> %d elements (lmax %d)", step,
                             summary.n_elem_before, summary.n_elem, summary.lmax)
                else:
                    state.steps_since_adapt = 0
                if converged and at_end and not adapted:
                    stop = converged_run = True
        elif policy.mode == "refine_only_static":
            level_steps += 1
            if (converged and at_end) or level_steps >= cfg.max_steps_per_level:
                if mesh.max_level < policy.max_total_levels:
                    marks = enforce_compatibility(mesh, mark_elements(mesh, state.rho, policy))
                    if marks:
                        state, summary = adapt_mesh(state, marks)
                        adaptations.append(summary)
                        adapted = True
                    level_steps = 0
                else:
                    stop = True
                    converged_run = converged and at_end
        else:
            if converged and at_end:
                stop = converged_run = True

        rec = StepRecord(
            step=step,
            p=p_used,
            compliance=c,
            volume=float(rho_new @ topo.volumes) / (cfg.width * cfg.height),
            max_change=change,
            n_elem=topo.n_elem,
            n_unknowns=2 * topo.n_nodes,
            lmax=int(topo.levels.max()),
            solver_iters=stats.iterations,
            solver_relres=stats.final_relres,
            adapted=adapted,
            wall_time=time.perf_counter() - t0,
        )
        records.append(rec)
        state.history.append(rec)
        log.debug("step %d p=%.2f c=%.6g change=%.4f elems=%d iters=%d", step, p_used, c, change,
                  rec.n_elem, stats.iterations)
        if callback is not None:
            callback(state, rec)
        if stop:
            break

    if not converged_run:
        log.warning("run stopped at step cap %d without convergence", max_steps)
    return RunReport(state, records, adaptations, converged_run, policy.mode)
