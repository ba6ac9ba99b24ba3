"""
Cantilever on a dynamically adapted mesh
========================================

Run the shipped 2:1 cantilever with dynamic refinement and derefinement and
write the usual output files. The mesh starts at 32x16 and may refine twice,
so the finest elements match a 128x64 uniform grid.
"""
import logging
import sys
from pathlib import Path

from amrtopo.config import load_config
from amrtopo.driver import run
from amrtopo.io import write_outputs

logging.basicConfig(level=logging.INFO, format="%(message)s")

root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "cantilever_test1.toml")
max_steps = int(sys.argv[1]) if len(sys.argv) > 1 else None

report = run(cfg, max_steps=max_steps)
print(report.summary_table())

last = report.log[-1]
print(f"converged={report.converged} after {last.step} steps, compliance {last.compliance:.4f}")
print(f"{last.n_elem} active elements versus {cfg.nx * cfg.ny * 4**cfg.max_total_levels} on the uniform grid")

paths = write_outputs(report, root / "out" / "adaptive_cantilever", lmax=cfg.max_total_levels)
print("density image:", paths["pgm"])
