import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amrtopo.config import load_config, parse_config
from amrtopo.driver import run
from amrtopo.fem import ConfigurationError
from amrtopo.io import (
    LOG_HEADER,
    DensityRaster,
    design_difference,
    load_raster,
    raster_from_csv,
    raster_to_csv,
    raster_to_pgm,
    rasterize,
    rasterize_dump,
    read_pgm,
    write_outputs,
)
from amrtopo.mesh import create_uniform

from .conftest import random_adapted_mesh

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """
[domain]
width = 2.0
height = 1.0
nx = 8
ny = 4

[problem]
volume_fraction = 0.4

[[loads]]
x = 2.0
y = 0.5
component = "y"
magnitude = -1.0

[[fixed]]
x = 0.0
"""


class TestConfig:
    def test_minimal_defaults(self, caplog):
        with caplog.at_level(logging.INFO):
            cfg = parse_config(MINIMAL)
        assert cfg.mode == "dynamic"
        assert cfg.material.E0 == 1.0 and cfg.material.nu == 0.3 and cfg.material.rho_min == 1e-3
        assert cfg.policy.min_steps_between == 5 and cfg.policy.max_steps_between == 10
        assert cfg.policy.change_tol == 0.01 and cfg.policy.rho_s == 0.5
        assert cfg.oc.move == 0.2 and cfg.oc.eta == 0.5
        assert cfg.continuation.p_start == 1.0 and cfg.continuation.p_end == 3.0
        assert cfg.rmin == cfg.policy.r_amr == pytest.approx(2.5 * 0.25)
        assert "config default: material.E0=1.0" in caplog.text

    def test_volume_fraction_range(self):
        with pytest.raises(ConfigurationError, match="problem.volume_fraction"):
            parse_config(MINIMAL.replace("volume_fraction = 0.4", "volume_fraction = 1.5"))

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="domain.depth"):
            parse_config(MINIMAL.replace("nx = 8", "nx = 8\ndepth = 3"))

    def test_unknown_section(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            parse_config(MINIMAL + "\n[bogus]\na = 1\n")

    def test_missing_required(self):
        with pytest.raises(ConfigurationError, match="domain.ny"):
            parse_config(MINIMAL.replace("ny = 4", ""))

    def test_missing_load_component(self):
        with pytest.raises(ConfigurationError, match=r"loads\[0\].component"):
            parse_config(MINIMAL.replace('component = "y"', ""))

    def test_bad_mode(self):
        with pytest.raises(ConfigurationError, match="amr.mode"):
            parse_config(MINIMAL + '\n[amr]\nmode = "sometimes"\n')

    def test_non_square_elements(self):
        with pytest.raises(ConfigurationError, match="square"):
            parse_config(MINIMAL.replace("ny = 4", "ny = 3"))

    def test_malformed(self):
        with pytest.raises(ConfigurationError):
            parse_config("[domain\nwidth=")

    def test_shipped_test1_config(self):
        cfg = load_config(CONFIGS / "cantilever_test1.toml")
        assert (cfg.width, cfg.height) == (2.0, 1.0)
        assert cfg.volume_fraction == 0.5
        assert cfg.nx * 2**cfg.max_total_levels == 128
        assert all(f.where.x == 0.0 and f.where.y is None and f.component == "both" for f in cfg.boundary.fixed)
        (load,) = cfg.boundary.loads
        assert load.where.x == 2.0 and load.component == "y" and load.magnitude < 0


class TestRasterize:
    def test_uniform_identity(self):
        mesh = create_uniform(4, 2, (4.0, 2.0))
        rho = np.arange(8) / 8.0
        r = rasterize(mesh, rho, 0)
        np.testing.assert_array_equal(r.values.ravel(), rho)

    def test_one_element_four_cells(self):
        mesh = create_uniform(1, 1, (1.0, 1.0))
        r = rasterize(mesh, np.array([0.7]), 1)
        np.testing.assert_array_equal(r.values, np.full((2, 2), 0.7))
        assert r.cell_size == 0.5

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_conservation(self, seed):
        rng = np.random.default_rng(seed)
        mesh = random_adapted_mesh(rng, passes=3)
        topo = mesh.topology()
        rho = rng.uniform(1e-3, 1, topo.n_elem)
        r = rasterize(mesh, rho, 3)
        assert r.material() == pytest.approx(float(rho @ topo.volumes), rel=1e-12)
        assert r.shape == (2 * 8, 4 * 8)

    def test_too_coarse_lmax(self, rng):
        mesh = create_uniform(1, 1, (1.0, 1.0))
        mesh.refine_element(0)
        with pytest.raises(ValueError):
            rasterize(mesh, np.ones(4), 0)

    def test_dump_round_trip(self, rng):
        mesh = random_adapted_mesh(rng, passes=3)
        rho = rng.uniform(1e-3, 1, mesh.n_active)
        a = rasterize(mesh, rho, 3)
        b = rasterize_dump(mesh.dump(rho), 3)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.cell_size == b.cell_size


class TestDesignDifference:
    def test_identical(self, rng):
        r = DensityRaster(rng.random((4, 8)), 0.5)
        assert design_difference(r, r) == 0.0

    def test_double(self, rng):
        v = rng.random((4, 8))
        assert design_difference(DensityRaster(v, 1.0), DensityRaster(2 * v, 1.0)) == pytest.approx(1.0, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            design_difference(DensityRaster(np.ones((2, 2)), 1.0), DensityRaster(np.ones((2, 3)), 1.0))

    def test_not_symmetric_and_triangle(self, rng):
        a, b, c = (DensityRaster(rng.random((3, 5)), 1.0) for _ in range(3))
        assert design_difference(a, b) != design_difference(b, a)
        # scaled L1 in the second argument, reference fixed
        assert design_difference(a, c) <= design_difference(a, b) + (np.abs(b.values - c.values).sum() / a.values.sum()) + 1e-15

    def test_hand_computed(self):
        r1 = DensityRaster(np.array([[1.0, 0.0], [0.5, 0.5]]), 1.0)
        r2 = DensityRaster(np.array([[0.5, 0.0], [0.5, 1.0]]), 1.0)
        assert design_difference(r1, r2) == pytest.approx(1.0 / 2.0)


class TestFiles:
    def test_pgm_pixels(self, tmp_path):
        mesh = create_uniform(2, 1, (2.0, 1.0))
        r = rasterize(mesh, np.array([0.0, 1.0]), 0)
        path = tmp_path / "d.pgm"
        path.write_bytes(raster_to_pgm(r))
        pix = read_pgm(path)
        assert pix.tolist() == [[0, 255]]
        assert raster_to_pgm(r).startswith(b"P5\n2 1\n255\n")

    def test_pgm_top_row_first(self):
        r = DensityRaster(np.array([[0.0], [1.0]]), 1.0)
        assert raster_to_pgm(r).endswith(bytes([255, 0]))

    def test_csv_round_trip_bit_exact(self, rng):
        r = DensityRaster(rng.random((5, 7)), 0.0625)
        back = raster_from_csv(raster_to_csv(r))
        assert np.array_equal(back.values, r.values)
        assert back.cell_size == r.cell_size

    def test_write_outputs(self, tmp_path):
        text = MINIMAL.replace("ny = 4", "ny = 4\nmax_total_levels = 1")
        cfg = parse_config(text + '\n[amr]\nmode = "dynamic"\n[run]\nmax_steps = 40\n')
        report = run(cfg)
        paths = write_outputs(report, tmp_path / "out")
        lines = paths["log"].read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) - 1 == len(report.log)
        lmax = [int(l.split(",")[1]) for l in paths["adaptations"].read_text().splitlines()[1:]]
        assert lmax == sorted(lmax)
        r = load_raster(paths["raster_csv"])
        assert r.material() == pytest.approx(report.state.material_volume(), rel=1e-12)
        assert read_pgm(paths["pgm"]).shape == r.shape
        assert not list((tmp_path / "out").glob(".*"))
