"""Command line entry points: ``run``, ``diff`` and ``rasterize``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .driver import run
from .fem import ConfigurationError
from .io import _atomic_write, design_difference, load_raster, raster_to_csv, raster_to_pgm, rasterize_dump, write_outputs

log = logging.getLogger("amrtopo")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg = cfg.replace(output_dir=args.output_dir)
    report = run(cfg, max_steps=args.max_steps)
    paths = write_outputs(report, cfg.output_dir, lmax=cfg.max_total_levels)
    print(report.summary_table())
    last = report.log[-1]
    print(f"mode={report.mode} steps={last.step} converged={report.converged} "
          f"compliance={last.compliance:.6g} volume={last.volume:.6g}")
    print(f"outputs written to {Path(cfg.output_dir).resolve()} ({', '.join(p.name for p in paths.values())})")
    return 0


def _cmd_diff(args) -> int:
    a = load_raster(args.reference)
    b = load_raster(args.other)
    print(f"{design_difference(a, b):.6g}")
    return 0


def _cmd_rasterize(args) -> int:
    raster = rasterize_dump(Path(args.mesh_dump).read_text(), args.lmax)
    out = Path(args.output_dir or ".")
    stem = Path(args.mesh_dump).stem
    _atomic_write(out / f"{stem}.pgm", raster_to_pgm(raster))
    _atomic_write(out / f"{stem}.csv", raster_to_csv(raster).encode())
    print(f"{raster.shape[1]}x{raster.shape[0]} raster written to {out.resolve()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amrtopo", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize the problem described by a TOML config")
    p.add_argument("config")
    p.add_argument("--max-steps", type=int, default=None, help="override run.max_steps")
    p.add_argument("--output-dir", default=None, help="override output.dir")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("diff", help="relative L1 design difference of two rasters (.csv or .pgm)")
    p.add_argument("reference", help="reference design (normalizes the difference)")
    p.add_argument("other")
    p.set_defaults(func=_cmd_diff)

    p = sub.add_parser("rasterize", help="rasterize a mesh dump to the finest grid")
    p.add_argument("mesh_dump")
    p.add_argument("--lmax", type=int, required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_rasterize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
