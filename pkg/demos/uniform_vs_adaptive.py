"""
Uniform, dynamic and refine-only designs
========================================

Optimize the same cantilever three ways and compare the final designs on
the finest grid with the relative L1 difference. The refine-only run freezes
what the coarse mesh decided, which is what the difference exposes.
Expect about ten minutes on one core.
"""
from pathlib import Path

from amrtopo.config import load_config
from amrtopo.driver import run
from amrtopo.io import design_difference, rasterize

root = Path(__file__).resolve().parents[1]
base = load_config(root / "configs" / "cantilever_test1.toml")
levels = base.max_total_levels


def with_mode(cfg, mode):
    pol = cfg.policy.__class__(**{**cfg.policy.__dict__, "mode": mode})
    return cfg.replace(policy=pol)


uniform = base.replace(nx=base.nx * 2**levels, ny=base.ny * 2**levels, max_total_levels=0)
uniform = with_mode(uniform, "none")
reports = {
    "uniform": run(uniform),
    "dynamic": run(with_mode(base, "dynamic")),
    "refine_only_static": run(with_mode(base, "refine_only_static")),
}

ref = rasterize(reports["uniform"].state.mesh, reports["uniform"].state.rho, 0)
for name, rep in reports.items():
    r = rasterize(rep.state.mesh, rep.state.rho, 0 if name == "uniform" else levels)
    print(
        f"{name:>20}: D = {design_difference(ref, r):.4f}, steps {len(rep.log)}, "
        f"solver iterations {rep.total_solver_iterations}, compliance {rep.log[-1].compliance:.3f}"
    )
