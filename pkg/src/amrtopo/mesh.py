"""Hierarchical quadtree mesh with refinement, derefinement and 2:1 balance.

Elements are squares addressed by ``(level, i, j)``: a level-``l`` element
covers ``[i*h_l, (i+1)*h_l] x [j*h_l, (j+1)*h_l]`` with ``h_l = h_0 / 2**l``.
Node identity uses exact integer coordinates on a dyadic lattice of spacing
``h_0 / 2**LATTICE_BITS``, so nodes shared by neighbouring elements merge
without any floating-point tolerance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

LATTICE_BITS = 24

# side offsets: left, right, bottom, top
_SIDES = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MeshError(ValueError):
    """Invalid mesh configuration or mesh operation."""


class IncompatibleMeshError(RuntimeError):
    """A mesh invariant (level-one incompatibility) was violated."""


@dataclass(slots=True, eq=False)
class Element:
    id: int
    level: int
    i: int
    j: int
    origin: tuple[float, float]
    size: float
    parent: int | None = None
    children: list[int] | None = None
    active: bool = True

    @property
    def cell(self) -> tuple[int, int, int]:
        return (self.level, self.i, self.j)

    @property
    def center(self) -> tuple[float, float]:
        return (self.origin[0] + 0.5 * self.size, self.origin[1] + 0.5 * self.size)


@dataclass(frozen=True)
class HangingConstraint:
    """A mid-edge node slaved to the two endpoints of a coarse edge."""

    node: int
    parents: tuple[int, int]
    weights: tuple[float, float] = (0.5, 0.5)


@dataclass
class MarkSet:
    refine: set[int] = field(default_factory=set)
    derefine: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.refine = set(self.refine)
        self.derefine = set(self.derefine)
        both = self.refine & self.derefine
        if both:
            raise MeshError(f"elements marked for both refinement and derefinement: {sorted(both)[:5]}")

    def __bool__(self):
        return bool(self.refine or self.derefine)


@dataclass
class Topology:
    """Array view of the active elements and nodes of one mesh state.

    Rows of ``conn`` list node indices counter-clockwise from the lower-left
    corner. ``node_keys`` are the integer lattice coordinates of the nodes.
    """

    ids: np.ndarray
    levels: np.ndarray
    origins: np.ndarray
    sizes: np.ndarray
    conn: np.ndarray
    node_keys: np.ndarray
    node_xy: np.ndarray
    hanging: list[HangingConstraint]

    @property
    def n_elem(self) -> int:
        return len(self.ids)

    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    @property
    def centers(self) -> np.ndarray:
        return self.origins + 0.5 * self.sizes[:, None]

    @property
    def volumes(self) -> np.ndarray:
        return self.sizes**2

    def index_of(self) -> dict[int, int]:
        return {int(e): k for k, e in enumerate(self.ids)}


class AdaptiveMesh:
    """Quadtree of square elements over a rectangular domain."""

    def __init__(self, nx: int, ny: int, width: float, height: float):
        if nx < 1 or ny < 1:
            raise MeshError(f"grid counts must be >= 1, got ({nx}, {ny})")
        if width <= 0 or height <= 0:
            raise MeshError(f"domain extents must be positive, got ({width}, {height})")
        h0 = width / nx
        if not np.isclose(h0, height / ny, rtol=1e-12, atol=0.0):
            raise MeshError(
                f"elements must be square: width/nx = {h0:g} but height/ny = {height / ny:g}"
            )
        self.initial_grid = (nx, ny)
        self.domain = (float(width), float(height))
        self.initial_size = h0
        self.elements: dict[int, Element] = {}
        self._cells: dict[tuple[int, int, int], int] = {}
        self._next_id = 0
        self._version = 0
        self._topology: Topology | None = None
        self._tree: cKDTree | None = None
        for j in range(ny):
            for i in range(nx):
                self._new_element(0, i, j, parent=None)

    # -- construction helpers -------------------------------------------------

    def _new_element(self, level: int, i: int, j: int, parent: int | None) -> Element:
        size = self.initial_size / 2**level
        el = Element(self._next_id, level, i, j, (i * size, j * size), size, parent=parent)
        self.elements[el.id] = el
        self._cells[el.cell] = el.id
        self._next_id += 1
        return el

    def _touch(self):
        self._version += 1
        self._topology = None
        self._tree = None

    @property
    def version(self) -> int:
        return self._version

    # -- basic queries --------------------------------------------------------

    def active_ids(self) -> list[int]:
        return sorted(e.id for e in self.elements.values() if e.active)

    def active_elements(self) -> list[Element]:
        return [self.elements[k] for k in self.active_ids()]

    @property
    def n_active(self) -> int:
        return sum(1 for e in self.elements.values() if e.active)

    @property
    def max_level(self) -> int:
        return max(e.level for e in self.elements.values() if e.active)

    def element_at(self, level: int, i: int, j: int) -> Element | None:
        k = self._cells.get((level, i, j))
        return None if k is None else self.elements[k]

    def _in_bounds(self, level: int, i: int, j: int) -> bool:
        nx, ny = self.initial_grid
        return 0 <= i < nx << level and 0 <= j < ny << level

    def leaf_covering(self, level: int, i: int, j: int) -> Element | None:
        """Active element covering cell ``(level, i, j)``.

        Returns None when the cell is subdivided further or lies outside.
        """
        if not self._in_bounds(level, i, j):
            return None
        for k in range(level, -1, -1):
            sh = level - k
            el = self.element_at(k, i >> sh, j >> sh)
            if el is not None:
                return el if el.active else None
        return None

    def _leaves_on_side(self, el: Element, side: tuple[int, int]) -> list[Element]:
        """Active descendants of ``el`` touching the given side of it."""
        if el.active:
            return [el]
        di, dj = side
        out = []
        for cid in el.children:
            c = self.elements[cid]
            ci, cj = c.i & 1, c.j & 1
            if (di == -1 and ci == 0) or (di == 1 and ci == 1) or (dj == -1 and cj == 0) or (dj == 1 and cj == 1):
                out.extend(self._leaves_on_side(c, side))
        return out

    def edge_neighbors(self, eid: int) -> list[int]:
        """Active elements sharing (part of) an edge with element ``eid``."""
        el = self.elements[eid]
        out = []
        for di, dj in _SIDES:
            li, lj = el.i + di, el.j + dj
            if not self._in_bounds(el.level, li, lj):
                continue
            cover = self.leaf_covering(el.level, li, lj)
            if cover is not None:
                out.append(cover.id)
            else:
                same = self.element_at(el.level, li, lj)
                out.extend(c.id for c in self._leaves_on_side(same, (-di, -dj)))
        return out

    def neighbors_within_radius(self, eid: int, r: float) -> list[int]:
        """Active elements other than ``eid`` whose centers lie within ``r``."""
        if r <= 0:
            return []
        topo = self.topology()
        el = self.elements[eid]
        if not el.active:
            raise MeshError(f"element {eid} is not active")
        hits = self._kdtree().query_ball_point(el.center, r)
        return sorted(int(topo.ids[k]) for k in hits if topo.ids[k] != eid)

    def _kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.topology().centers)
        return self._tree

    def is_compatible(self) -> bool:
        """True if every pair of edge-adjacent active elements differs by at most one level."""
        for el in self.elements.values():
            if not el.active:
                continue
            for n in self.edge_neighbors(el.id):
                if abs(self.elements[n].level - el.level) > 1:
                    return False
        return True

    def active_area(self) -> float:
        return float(sum(e.size**2 for e in self.elements.values() if e.active))

    # -- mutation -------------------------------------------------------------

    def refine_element(self, eid: int) -> list[int]:
        el = self.elements[eid]
        if not el.active:
            raise MeshError(f"cannot refine inactive element {eid}")
        if el.level + 1 > LATTICE_BITS:
            raise MeshError("refinement depth exceeds node lattice resolution")
        kids = []
        for dj in (0, 1):
            for di in (0, 1):
                kids.append(self._new_element(el.level + 1, 2 * el.i + di, 2 * el.j + dj, parent=eid).id)
        el.children = kids
        el.active = False
        self._touch()
        return kids

    def derefine_children(self, parent_id: int) -> None:
        parent = self.elements[parent_id]
        if not parent.children:
            raise MeshError(f"element {parent_id} has no children to remove")
        kids = [self.elements[c] for c in parent.children]
        if any(not k.active for k in kids):
            raise MeshError(f"children of {parent_id} are not all leaves; derefine one level at a time")
        for k in kids:
            del self._cells[k.cell]
            del self.elements[k.id]
        parent.children = None
        parent.active = True
        self._touch()

    # -- array views ----------------------------------------------------------

    def topology(self) -> Topology:
        if self._topology is None:
            self._topology = self._build_topology()
        return self._topology

    def _build_topology(self) -> Topology:
        els = self.active_elements()
        ids = np.array([e.id for e in els], dtype=np.int64)
        levels = np.array([e.level for e in els], dtype=np.int64)
        ij = np.array([(e.i, e.j) for e in els], dtype=np.int64).reshape(-1, 2)
        shift = LATTICE_BITS - levels
        span = np.left_shift(np.int64(1), shift)
        x0 = np.left_shift(ij[:, 0], shift)
        y0 = np.left_shift(ij[:, 1], shift)
        cx = np.stack([x0, x0 + span, x0 + span, x0], axis=1)
        cy = np.stack([y0, y0, y0 + span, y0 + span], axis=1)
        stride = self._key_stride()
        # x-major so that node numbering runs along the shorter side first
        combined = cx * stride + cy
        keys, inverse = np.unique(combined.ravel(), return_inverse=True)
        conn = inverse.reshape(-1, 4)
        node_keys = np.stack([keys // stride, keys % stride], axis=1)
        unit = self.initial_size / 2**LATTICE_BITS
        node_xy = node_keys.astype(float) * unit
        origins = np.array([e.origin for e in els], dtype=float).reshape(-1, 2)
        sizes = np.array([e.size for e in els], dtype=float)
        hanging = self._find_hanging(keys, cx, cy, span, stride)
        return Topology(ids, levels, origins, sizes, conn, node_keys, node_xy, hanging)

    def _key_stride(self) -> int:
        return (self.initial_grid[1] << LATTICE_BITS) + 1

    def node_index(self, keys: np.ndarray) -> np.ndarray:
        """Map integer lattice keys ``(n, 2)`` to node indices; -1 where absent."""
        topo = self.topology()
        stride = self._key_stride()
        table = topo.node_keys[:, 0] * stride + topo.node_keys[:, 1]
        q = np.asarray(keys, dtype=np.int64)
        q = q[:, 0] * stride + q[:, 1]
        pos = np.searchsorted(table, q)
        pos = np.minimum(pos, len(table) - 1)
        return np.where(table[pos] == q, pos, -1)

    def _find_hanging(self, keys, cx, cy, span, stride) -> list[HangingConstraint]:
        # edges as (start corner, end corner): bottom, right, top, left
        edges = ((0, 1), (1, 2), (3, 2), (0, 3))
        out: dict[int, HangingConstraint] = {}

        def lookup(q):
            pos = np.searchsorted(keys, q)
            pos = np.minimum(pos, len(keys) - 1)
            return np.where(keys[pos] == q, pos, -1)

        for a, b in edges:
            mx = (cx[:, a] + cx[:, b]) // 2
            my = (cy[:, a] + cy[:, b]) // 2
            mid = lookup(mx * stride + my)
            hit = np.nonzero(mid >= 0)[0]
            if hit.size == 0:
                continue
            # level-two check: quarter points of a hanging edge must not be nodes
            qx = (3 * cx[hit, a] + cx[hit, b]) // 4
            qy = (3 * cy[hit, a] + cy[hit, b]) // 4
            deep = span[hit] >= 4
            if np.any(lookup(qx * stride + qy)[deep] >= 0):
                raise IncompatibleMeshError("level-two incompatibility detected while building constraints")
            pa = lookup(cx[hit, a] * stride + cy[hit, a])
            pb = lookup(cx[hit, b] * stride + cy[hit, b])
            for node, p1, p2 in zip(mid[hit], pa, pb):
                out[int(node)] = HangingConstraint(int(node), (int(p1), int(p2)))
        return [out[k] for k in sorted(out)]

    def hanging_constraints(self) -> list[HangingConstraint]:
        return list(self.topology().hanging)

    # -- serialization --------------------------------------------------------

    def dump(self, rho: np.ndarray | None = None) -> str:
        """Snapshot: one active element per line, ``id level x y size density``."""
        topo = self.topology()
        if rho is None:
            rho = np.zeros(topo.n_elem)
        nx, ny = self.initial_grid
        lines = [f"# nx={nx} ny={ny} width={self.domain[0]!r} height={self.domain[1]!r}"]
        for k in range(topo.n_elem):
            x, y = topo.origins[k].tolist()
            lines.append(f"{topo.ids[k]} {topo.levels[k]} {x!r} {y!r} {float(topo.sizes[k])!r} {float(rho[k])!r}")
        return "\n".join(lines) + "\n"


def create_uniform(nx: int, ny: int, domain: tuple[float, float]) -> AdaptiveMesh:
    return AdaptiveMesh(nx, ny, domain[0], domain[1])


def apply_marks(mesh: AdaptiveMesh, marks: MarkSet) -> tuple[dict[int, list[int]], list[int]]:
    """Apply compatibility-checked marks: derefinements first, then refinements.

    Returns ``(refined, derefined)`` where ``refined`` maps each refined element
    to its children and ``derefined`` lists the parents made active again.
    """
    parents = sorted({mesh.elements[e].parent for e in marks.derefine})
    for p in parents:
        mesh.derefine_children(p)
    refined = {e: mesh.refine_element(e) for e in sorted(marks.refine)}
    return refined, parents


def _sibling_groups(mesh: AdaptiveMesh, ids) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for e in ids:
        p = mesh.elements[e].parent
        if p is not None:
            groups.setdefault(p, []).append(e)
    return groups


def enforce_compatibility(mesh: AdaptiveMesh, marks: MarkSet) -> MarkSet:
    """Adjust marks so that applying them leaves only level-one incompatibility.

    Sweep one drops derefinement of incomplete sibling groups. The fixed-point
    loop then unmarks derefinements that would create a level-two jump and
    adds coarse neighbours of new fine elements to the refine set.
    """
    refine = set(marks.refine)
    for e in refine | marks.derefine:
        if not mesh.elements[e].active:
            raise MeshError(f"marked element {e} is not active")

    # sweep 1: sibling rule
    groups = {}
    for p, kids in _sibling_groups(mesh, marks.derefine - refine).items():
        siblings = mesh.elements[p].children
        if len(kids) == 4 and all(mesh.elements[s].active for s in siblings):
            groups[p] = list(siblings)

    while True:
        violations = _level_jumps(mesh, refine, groups)
        if not violations:
            break
        for kind, key in violations:
            if kind == "parent":
                groups.pop(key, None)
            else:
                refine.add(key)
        # a refined element cannot belong to a derefined group
        for p in [p for p, kids in groups.items() if any(k in refine for k in kids)]:
            del groups[p]

    derefine = {k for kids in groups.values() for k in kids}
    return MarkSet(refine, derefine)


def _level_jumps(mesh: AdaptiveMesh, refine: set[int], groups: dict[int, list[int]]):
    """Coarse leaves that would sit next to a leaf two or more levels finer.

    Returns ``("parent", id)`` for a would-be derefined parent and
    ``("element", id)`` for an unchanged active element.
    """
    removed = set(refine)
    for kids in groups.values():
        removed.update(kids)
    final: dict[tuple[int, int, int], tuple[str, int]] = {}
    for el in mesh.elements.values():
        if el.active and el.id not in removed:
            final[el.cell] = ("element", el.id)
    for p in groups:
        final[mesh.elements[p].cell] = ("parent", p)
    fine_leaves = []
    for e in refine:
        el = mesh.elements[e]
        for dj in (0, 1):
            for di in (0, 1):
                cell = (el.level + 1, 2 * el.i + di, 2 * el.j + dj)
                final[cell] = ("child", e)
                fine_leaves.append(cell)
    # only leaves adjacent to a change can be part of a new jump
    candidates = set(fine_leaves)
    for p in groups:
        for k in mesh.elements[p].children:
            for n in mesh.edge_neighbors(k):
                if n not in removed:
                    candidates.add(mesh.elements[n].cell)
    nx, ny = mesh.initial_grid
    out = set()
    for level, i, j in candidates:
        for di, dj in _SIDES:
            li, lj = i + di, j + dj
            if not (0 <= li < nx << level and 0 <= lj < ny << level):
                continue
            for k in range(level, -1, -1):
                sh = level - k
                hit = final.get((k, li >> sh, lj >> sh))
                if hit is not None:
                    if level - k >= 2 and hit[0] != "child":
                        out.add(hit)
                    break
    return sorted(out)
