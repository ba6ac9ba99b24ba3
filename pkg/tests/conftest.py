import numpy as np
import pytest

from amrtopo.mesh import MarkSet, apply_marks, create_uniform, enforce_compatibility


def random_adapted_mesh(rng, nx=4, ny=2, passes=4, max_level=3, p_refine=0.3, p_deref=0.5):
    """Mesh produced by random compatible refine/derefine passes."""
    mesh = create_uniform(nx, ny, (float(nx), float(ny)))
    for _ in range(passes):
        topo = mesh.topology()
        ids = topo.ids
        r = rng.random(len(ids))
        refine = {int(e) for e, lev, x in zip(ids, topo.levels, r) if x < p_refine and lev < max_level}
        deref = {int(e) for e, lev, x in zip(ids, topo.levels, r) if x > 1 - p_deref and lev >= 1}
        marks = enforce_compatibility(mesh, MarkSet(refine, deref - refine))
        apply_marks(mesh, marks)
    return mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
