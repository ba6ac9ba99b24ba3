"""
Hanging nodes on a locally refined mesh
=======================================

Refine one element of a 2x2 grid and look at the constraints the quadtree
produces, then check that the projected system gives a displacement field
that is continuous across the coarse/fine edges.
"""
import numpy as np

from amrtopo.fem import BoundarySpec, FixedBC, MaterialSpec, PointLoad, Selector
from amrtopo.fem import apply_constraints, assemble, compliance, recover_full
from amrtopo.linsolve import solve_equilibrium
from amrtopo.mesh import create_uniform

mesh = create_uniform(2, 2, (2.0, 2.0))
mesh.refine_element(3)  # upper-right element
topo = mesh.topology()
print(f"{topo.n_elem} active elements, {topo.n_nodes} nodes")

# each hanging node sits halfway along a coarse edge
for h in mesh.hanging_constraints():
    a, b = h.parents
    print("node", topo.node_xy[h.node], "= mean of", topo.node_xy[a], topo.node_xy[b])

bc = BoundarySpec(
    fixed=(FixedBC(Selector(x=0.0)),),
    loads=(PointLoad(Selector(x=2.0, y=2.0), "y", -1.0),),
)
rho = np.ones(topo.n_elem)
sys = apply_constraints(assemble(mesh, rho, MaterialSpec(), bc))
u, stats = solve_equilibrium(sys)
print(f"MINRES: {stats.iterations} iterations, relres {stats.final_relres:.1e}")

# the direct solve of the projected system agrees with the iterative one
u_direct = recover_full(sys, np.linalg.solve(sys.matrix.toarray(), sys.rhs))
print("max |u - u_direct| =", np.abs(u - u_direct).max())
print("compliance", compliance(sys.load, u))
