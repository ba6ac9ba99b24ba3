"""Rasterization, design difference and run output files."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import AdaptiveMesh

LOG_HEADER = (
    "step,p,compliance,volume,max_change,n_elem,n_unknowns,lmax,solver_iters,solver_relres,adapted"
)
ADAPT_HEADER = "step,lmax,n_elem_before,n_elem,n_unknowns,n_refined,n_derefined"


@dataclass
class DensityRaster:
    """Densities on the finest uniform grid; row 0 is the bottom row (y = 0)."""

    values: np.ndarray
    cell_size: float

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def material(self) -> float:
        return float(self.values.sum() * self.cell_area)


def _rasterize_cells(nx, ny, h0, lmax, levels, origins, rho) -> DensityRaster:
    n = 1 << lmax
    cell = h0 / n
    out = np.full((ny * n, nx * n), np.nan)
    for lev, (x, y), r in zip(levels, origins, rho):
        if lev > lmax:
            raise ValueError(f"element at level {lev} is finer than lmax={lmax}")
        span = 1 << (lmax - lev)
        ci = int(round(x / cell))
        cj = int(round(y / cell))
        out[cj : cj + span, ci : ci + span] = r
    if np.isnan(out).any():
        raise ValueError("active elements do not cover the raster")
    return DensityRaster(out, cell)


def rasterize(mesh: AdaptiveMesh, rho: np.ndarray, lmax: int | None = None) -> DensityRaster:
    """Replicate each element density over the finest-level cells it covers."""
    topo = mesh.topology()
    lmax = mesh.max_level if lmax is None else lmax
    nx, ny = mesh.initial_grid
    return _rasterize_cells(nx, ny, mesh.initial_size, lmax, topo.levels, topo.origins, rho)


def design_difference(r1: DensityRaster, r2: DensityRaster) -> float:
    """Relative L1 difference normalised by the material of ``r1`` (the reference)."""
    if r1.shape != r2.shape:
        raise ValueError(f"raster shapes differ: {r1.shape} vs {r2.shape}")
    if not np.isclose(r1.cell_size, r2.cell_size, rtol=1e-12):
        raise ValueError("raster cell sizes differ")
    return float(np.abs(r1.values - r2.values).sum() / r1.values.sum())


# -- files -----------------------------------------------------------------


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def raster_to_pgm(r: DensityRaster) -> bytes:
    """Binary PGM (P5, maxval 255), linear grey = round(255 * rho), top row first."""
    img = np.clip(np.rint(255 * r.values[::-1]), 0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    pix = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pix


def raster_to_csv(r: DensityRaster) -> str:
    buf = io.StringIO()
    buf.write(f"# cell_size={r.cell_size!r}\n")
    for row in r.values:
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def raster_from_csv(text: str) -> DensityRaster:
    cell = 1.0
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "cell_size=" in line:
                cell = float(line.split("cell_size=")[1])
            continue
        if line.strip():
            rows.append([float(v) for v in line.split(",")])
    return DensityRaster(np.array(rows), cell)


def load_raster(path) -> DensityRaster:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return DensityRaster(read_pgm(path)[::-1].astype(float) / 255.0, 1.0)
    return raster_from_csv(path.read_text())


def rasterize_dump(text: str, lmax: int) -> DensityRaster:
    """Rasterize a mesh snapshot (``id level x y size density`` per line)."""
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        _, lev, x, y, size, rho = line.split()
        rows.append((int(lev), float(x), float(y), float(size), float(rho)))
    if not rows:
        raise ValueError("empty mesh dump")
    levels = np.array([r[0] for r in rows])
    origins = np.array([(r[1], r[2]) for r in rows])
    h0 = rows[0][3] * 2 ** rows[0][0]
    width = max(r[1] + r[3] for r in rows)
    height = max(r[2] + r[3] for r in rows)
    nx, ny = int(round(width / h0)), int(round(height / h0))
    return _rasterize_cells(nx, ny, h0, lmax, levels, origins, np.array([r[4] for r in rows]))


def write_outputs(report, outdir, lmax: int | None = None) -> dict[str, Path]:
    """Write raster (PGM + CSV), mesh snapshot, convergence log and adaptation table."""
    outdir = Path(outdir)
    state = report.state
    raster = rasterize(state.mesh, state.rho, lmax)
    paths = {
        "pgm": outdir / "density.pgm",
        "raster_csv": outdir / "density.csv",
        "mesh": outdir / "mesh.txt",
        "log": outdir / "convergence.csv",
        "adaptations": outdir / "adaptations.csv",
    }
    _atomic_write(paths["pgm"], raster_to_pgm(raster))
    _atomic_write(paths["raster_csv"], raster_to_csv(raster).encode())
    _atomic_write(paths["mesh"], state.mesh.dump(state.rho).encode())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER.split(","))
    for r in report.log:
        w.writerow([r.step, r.p, repr(r.compliance), repr(r.volume), repr(r.max_change), r.n_elem,
                    r.n_unknowns, r.lmax, r.solver_iters, repr(r.solver_relres), int(r.adapted)])
    _atomic_write(paths["log"], buf.getvalue().encode())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ADAPT_HEADER.split(","))
    for a in report.adaptations:
        w.writerow([a.step, a.lmax, a.n_elem_before, a.n_elem, a.n_unknowns, a.n_refined, a.n_derefined])
    _atomic_write(paths["adaptations"], buf.getvalue().encode())
    return paths
