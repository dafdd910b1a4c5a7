import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvcache import fields as fl
from bvcache import geometry as geo
from bvcache.kernels import KernelSpec
from bvcache.pointwise import PDEProblem
from bvcache.problems import (REGISTRY, GridField, analytic_problem, dense_bie_quadrature,
                              fd_reference, radial_source_integral, rmse, source_integral,
                              stencil_residual)

UNIT_SQUARE = geo.polygon_scene([(0, 0), (1, 0), (1, 1), (0, 1)])


def grid(values, valid=None, shape=None):
    values = np.asarray(values, dtype=float)
    shape = shape or (values.size, 1)
    valid = np.ones(values.size, dtype=bool) if valid is None else valid
    return GridField((0.0, 0.0), 1.0, shape, values, valid)


# ---------------------------------------------------------------- registry

def test_registry_examples():
    assert analytic_problem("disk-linear").u([(0.3, 0.4)])[0] == pytest.approx(0.3)
    assert analytic_problem("disk-poisson").u([(0.0, 0.0)])[0] == pytest.approx(-0.25)
    ap = analytic_problem("annulus-log")
    # inner circle, outward normal of the domain points toward the origin
    assert ap.dudn([(1.0, 0.0)], [(-1.0, 0.0)])[0] == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        analytic_problem("nope")


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_exact_solutions_satisfy_pde(name):
    ap = analytic_problem(name)
    pts, _ = geo.sample_region_interior(geo.Region(ap.scene), 100, np.random.default_rng(0))
    assert stencil_residual(ap, pts).max() <= 1e-3


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_exact_solutions_match_boundary_data(name):
    ap = analytic_problem(name)
    s = geo.sample_boundary(ap.scene, 500, np.random.default_rng(1))
    dmask = ap.scene.labels[s.segment] == geo.Label.DIRICHLET
    np.testing.assert_allclose(ap.problem.dirichlet(s.points[dmask]), ap.u(s.points[dmask]), atol=1e-12)
    if (~dmask).any():
        h = ap.problem.neumann(s.points[~dmask])
        np.testing.assert_allclose(h, ap.dudn(s.points[~dmask], s.normals[~dmask]), atol=1e-12)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_exact_gradients_match_finite_differences(name):
    ap = analytic_problem(name)
    pts, _ = geo.sample_region_interior(geo.Region(ap.scene), 50, np.random.default_rng(2))
    h = 1e-6
    fd = np.column_stack([(ap.u(pts + [h, 0]) - ap.u(pts - [h, 0])) / (2 * h),
                          (ap.u(pts + [0, h]) - ap.u(pts - [0, h])) / (2 * h)])
    np.testing.assert_allclose(ap.grad(pts), fd, atol=1e-7)


# ---------------------------------------------------------------- grids and rmse

def test_rmse_examples():
    a = grid([0.0, 0.0])
    assert rmse(a, a) == 0.0
    assert rmse(a, grid([3.0, 4.0])) == pytest.approx(math.sqrt(12.5))
    masked = grid([0.0, 0.0], valid=np.array([True, False]))
    assert rmse(masked, grid([3.0, 7.0])) == pytest.approx(3.0)


def test_rmse_errors():
    with pytest.raises(ValueError):
        rmse(grid([0.0, 0.0]), grid([0.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        rmse(grid([0.0], valid=np.array([False])), grid([1.0]))


def test_grid_spacing_validation():
    with pytest.raises(ValueError):
        GridField((0, 0), 0.0, (2, 2), np.zeros(4), np.ones(4, bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 3.0),
       st.lists(st.floats(-1e6, 1e6), min_size=36, max_size=36))
def test_grid_csv_round_trip(tmp_path_factory, nx, ny, h, vals):
    n = nx * ny
    values = np.array(vals[:n])
    valid = np.arange(n) % 3 != 1
    g = GridField((-0.3, 0.7), h, (nx, ny), values, valid)
    path = tmp_path_factory.mktemp("g") / "g.csv"
    g.write_csv(path)
    back = GridField.read_csv(path)
    assert back.shape == g.shape
    np.testing.assert_array_equal(back.valid, g.valid)
    np.testing.assert_array_equal(back.values[g.valid], g.values[g.valid])
    assert np.all(np.isnan(back.values[~g.valid]))
    np.testing.assert_allclose(back.points(), g.points(), rtol=1e-12, atol=1e-12)


def test_grid_csv_format(tmp_path):
    g = GridField((0.0, 0.0), 0.5, (2, 1), [0.1, 2.0], [True, False])
    g.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == "x,y,value,valid\n0,0,0.10000000000000001,1\n0.5,0,nan,0\n"


# ---------------------------------------------------------------- finite differences

def test_fd_linear_is_exact():
    g = fd_reference(UNIT_SQUARE, PDEProblem(dirichlet=fl.Linear(a=1.0)), 0.05)
    np.testing.assert_allclose(g.values.ravel(), g.points()[:, 0], atol=1e-9)


def test_fd_screened_constant():
    prob = PDEProblem(spec=KernelSpec(sigma=1.0), source=fl.Constant(-1.0), dirichlet=fl.Constant(1.0))
    g = fd_reference(UNIT_SQUARE, prob, 0.05)
    np.testing.assert_allclose(g.values, 1.0, atol=1e-9)


def test_fd_second_order():
    prob = PDEProblem(source=fl.Constant(1.0))
    grids = [fd_reference(UNIT_SQUARE, prob, h) for h in (1 / 8, 1 / 16, 1 / 32)]
    coarse = [g.values[::2 ** k, ::2 ** k] for k, g in enumerate(grids)]
    d1 = np.abs(coarse[0] - coarse[1]).max()
    d2 = np.abs(coarse[1] - coarse[2]).max()
    assert 3.0 < d1 / d2 < 5.0


def test_fd_brackets_disk_poisson_on_inscribed_rectangle():
    ap = analytic_problem("disk-poisson")
    box = geo.polygon_scene([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)])
    h = 0.05
    g = fd_reference(box, ap.problem, h)
    assert np.abs(g.values.ravel() - ap.u(g.points())).max() <= 2 * h * h


def test_fd_rejects_non_rectangles():
    with pytest.raises(ValueError):
        fd_reference(analytic_problem("disk-linear").scene, PDEProblem(), 0.1)
    with pytest.raises(ValueError):
        fd_reference(analytic_problem("square-mixed-linear").scene, PDEProblem(), 0.1)
    with pytest.raises(ValueError):
        fd_reference(UNIT_SQUARE, PDEProblem(), 0.3)


# ---------------------------------------------------------------- quadrature

CIRCLE = geo.polygon_scene(geo.circle_points(4096))


def test_bie_constant_harmonic():
    one = lambda p: np.ones(len(p))
    zero = lambda p, n: np.zeros(len(p))
    assert dense_bie_quadrature(CIRCLE, one, zero, (0.0, 0.0)) == pytest.approx(1.0, abs=1e-6)
    assert dense_bie_quadrature(CIRCLE, one, zero, (2.0, 0.0)) == pytest.approx(0.0, abs=1e-6)


def test_bie_disk_poisson_boundary_term_vanishes_at_center():
    ap = analytic_problem("disk-poisson", resolution=4096)
    val = dense_bie_quadrature(ap.scene, ap.u, ap.dudn, (0.0, 0.0))
    # the polygon sits inside the unit circle by at most 3e-7
    assert val == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("x", [(0.0, 0.0), (0.3, -0.5), (-0.7, 0.2)])
def test_bie_reproduces_disk_poisson(x):
    ap = analytic_problem("disk-poisson", resolution=4096)
    total = (dense_bie_quadrature(ap.scene, ap.u, ap.dudn, x)
             + radial_source_integral(x, 1.0, ap.problem.source))
    assert total == pytest.approx(ap.u([x])[0], abs=1e-5)


def test_source_integral_matches_radial_rule():
    ap = analytic_problem("disk-poisson", resolution=4096)
    for x in [(0.0, 0.0), (0.4, 0.3)]:
        a = source_integral(ap.scene, ap.problem.source, x, n_theta=2048, n_r=64)
        b = radial_source_integral(x, 1.0, ap.problem.source)
        assert a == pytest.approx(b, abs=1e-5)


def test_bie_screened_constant():
    ap = analytic_problem("screened-constant", resolution=4096)
    x = (0.2, 0.1)
    total = (dense_bie_quadrature(ap.scene, ap.u, ap.dudn, x, ap.problem.spec)
             + source_integral(ap.scene, ap.problem.source, x, ap.problem.spec, n_theta=1024, n_r=64))
    assert total == pytest.approx(1.0, abs=1e-4)


def test_bie_annulus_log():
    ap = analytic_problem("annulus-log", resolution=4096)
    for x in [(1.5, 0.0), (0.0, -2.2)]:
        assert dense_bie_quadrature(ap.scene, ap.u, ap.dudn, x) == pytest.approx(ap.u([x])[0], abs=1e-5)
