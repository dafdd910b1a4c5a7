import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from bvcache import kernels as K
from bvcache.kernels import BallKernel, KernelSpec
from oracles import derivative_errors, k_quadrature, radial_mass, random_pair

SPECS = [KernelSpec(2, 0.0), KernelSpec(3, 0.0), KernelSpec(2, 1.7), KernelSpec(3, 0.6)]


# ---------------------------------------------------------------- greens_free

def test_poisson_2d_unit_distance_is_zero():
    assert K.greens_free(KernelSpec(2), (0, 0), (1, 0)) == 0.0


def test_poisson_3d_value():
    # fundamental solution of the Laplacian: negative in 3D
    assert K.greens_free(KernelSpec(3), (0, 0, 0), (0.5, 0, 0)) == pytest.approx(-1 / (2 * np.pi), rel=1e-14)


def test_screened_3d_value():
    val = K.greens_free(KernelSpec(3, 1.0), (0, 0, 0), (1, 0, 0))
    assert val == pytest.approx(-math.exp(-1) / (4 * np.pi), rel=1e-14)


def test_singularity_is_signalled():
    with pytest.raises(K.KernelSingularity):
        K.greens_free(KernelSpec(2), (0.3, 0.3), (0.3, 0.3))


@pytest.mark.parametrize("spec", SPECS)
def test_symmetry(spec):
    rng = np.random.default_rng(1)
    x = rng.uniform(-3, 3, (1000, spec.dim))
    y = rng.uniform(-3, 3, (1000, spec.dim))
    a = K.greens_free(spec, x, y)
    b = K.greens_free(spec, y, x)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


# ---------------------------------------------------------------- derivatives

def test_gradient_example_2d():
    g = K.greens_free_gradient(KernelSpec(2), (0, 0), (1, 0))
    np.testing.assert_allclose(g, (-1 / (2 * np.pi), 0), atol=1e-15)


def test_poisson_kernel_examples():
    assert K.poisson_kernel_free(KernelSpec(2), (0, 0), (1, 0), (1, 0)) == pytest.approx(1 / (2 * np.pi))
    assert K.poisson_kernel_free(KernelSpec(2), (0, 0), (1, 0), (0, 1)) == 0.0


def test_kernel_gradient_examples():
    g = K.poisson_kernel_gradient(KernelSpec(3), (0, 0, 0), (1, 0, 0), (1, 0, 0))
    np.testing.assert_allclose(g, (1 / (2 * np.pi), 0, 0), rtol=1e-14)
    # normal orthogonal to y - x: only the -n/(2πr²) term remains
    g2 = K.poisson_kernel_gradient(KernelSpec(2), (0, 0), (2, 0), (0, 1))
    np.testing.assert_allclose(g2, (0, -1 / (2 * np.pi * 4)), atol=1e-16)


@pytest.mark.parametrize("spec", SPECS)
def test_derivatives_match_finite_differences(spec):
    worst = derivative_errors(spec, 1000, 7 + spec.dim)
    assert max(worst.values()) <= 1e-6, worst


@pytest.mark.parametrize("spec", SPECS)
def test_laplacian_matches_equation(spec):
    # 5-point (or 7-point) stencil of G equals sigma G away from the pole
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y, _, r = random_pair(rng, spec.dim, 0.3, 3.0)
        h = 1e-4 * r
        g0 = K.greens_free(spec, x, y)
        lap = 0.0
        for i in range(spec.dim):
            e = np.zeros(spec.dim)
            e[i] = h
            lap += K.greens_free(spec, x + e, y) + K.greens_free(spec, x - e, y) - 2 * g0
        lap /= h * h
        if spec.sigma == 0.0:
            assert abs(lap) <= 1e-3
        else:
            assert lap == pytest.approx(spec.sigma * g0, rel=1e-3)


@pytest.mark.parametrize("dim", [2, 3])
def test_sigma_to_zero_limit(dim):
    rng = np.random.default_rng(11)
    p, s = KernelSpec(dim, 0.0), KernelSpec(dim, 1e-12)
    for _ in range(100):
        x, y, n, _ = random_pair(rng, dim, 0.1, 10.0)
        x2, y2, _, _ = random_pair(rng, dim, 0.1, 10.0)
        if dim == 3:
            # e^{-√σ r} deviates from 1 by √σ r = 1e-6 r, so compare at r <= 1
            y = x + (y - x) / max(1.0, np.linalg.norm(y - x))
            assert K.greens_free(s, x, y) == pytest.approx(K.greens_free(p, x, y), rel=1e-6)
        else:
            # 2D screened kernels differ from log r / 2π by an r-independent constant
            ds = K.greens_free(s, x, y) - K.greens_free(s, x2, y2)
            dp = K.greens_free(p, x, y) - K.greens_free(p, x2, y2)
            assert ds == pytest.approx(dp, rel=1e-6, abs=1e-9)
        np.testing.assert_allclose(K.greens_free_gradient(s, x, y), K.greens_free_gradient(p, x, y), rtol=1e-6)
        assert K.poisson_kernel_free(s, x, y, n) == pytest.approx(K.poisson_kernel_free(p, x, y, n), rel=1e-6)
        np.testing.assert_allclose(K.poisson_kernel_gradient(s, x, y, n),
                                   K.poisson_kernel_gradient(p, x, y, n), rtol=1e-6, atol=1e-12)


def test_screening_factor_is_one_at_zero_sigma():
    spec = KernelSpec(2, 0.0)
    np.testing.assert_array_equal(K._q(spec, np.array([0.1, 1.0, 5.0])), 1.0)


# ---------------------------------------------------------------- Bessel

def test_bessel_reference_values():
    assert K.bessel_k(0, 1.0) == pytest.approx(0.4210244382, abs=5e-11)
    assert K.bessel_k(1, 1.0) == pytest.approx(0.6019072302, abs=5e-11)


@pytest.mark.parametrize("t", [1e-6, 1e-3, 0.1, 0.5, 1.0, 2.0, 5.0, 17.0, 40.0, 120.0, 500.0])
@pytest.mark.parametrize("order", [0, 1])
def test_bessel_matches_quadrature(order, t):
    ref = k_quadrature(order, t)
    assert K.bessel_k(order, t) == pytest.approx(ref, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 700.0))
def test_bessel_matches_scipy(t):
    assert K.bessel_k(0, t) == pytest.approx(special.k0(t), rel=1e-9)
    assert K.bessel_k(1, t) == pytest.approx(special.k1(t), rel=1e-9)


def test_bessel_derivative_identity():
    h = 1e-5
    d = (K.bessel_k(0, 2 + h) - K.bessel_k(0, 2 - h)) / (2 * h)
    assert d == pytest.approx(-K.bessel_k(1, 2.0), abs=1e-7)


def test_bessel_underflow_and_domain():
    assert K.bessel_k(0, 800.0) == 0.0
    with pytest.raises(ValueError):
        K.bessel_k(0, 0.0)


# ---------------------------------------------------------------- clamping

def test_clamp():
    assert K.clamp_kernel(0.1, 1.0) == 0.1
    assert K.clamp_kernel(5.0, 1.0) == 1.0
    assert K.clamp_kernel(-5.0, 1.0) == -1.0


@given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e3))
def test_clamp_idempotent(v, c):
    once = K.clamp_kernel(v, c)
    assert K.clamp_kernel(once, c) == once
    assert -c <= once <= c


# ---------------------------------------------------------------- ball kernels


@pytest.mark.parametrize("dim,sigma,R", [(2, 0, 1.0), (3, 0, 1.0), (2, 0, 0.37), (2, 3.0, 0.8),
                                         (3, 2.0, 1.3), (2, 50.0, 0.5)])
def test_ball_mass_matches_radial_quadrature(dim, sigma, R):
    ball = BallKernel((0.0,) * dim, R, KernelSpec(dim, sigma))
    assert K.ball_greens_mass(ball) == pytest.approx(radial_mass(ball), rel=1e-9)


def test_ball_mass_values():
    assert K.ball_greens_mass(BallKernel((0, 0), 1.0)) == 0.25
    assert K.ball_greens_mass(BallKernel((0, 0, 0), 1.0, KernelSpec(3))) == pytest.approx(1 / 6)


def test_ball_green_vanishes_on_sphere():
    assert K.ball_greens(BallKernel((0, 0), 1.0), (1.0, 0.0)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        K.ball_greens(BallKernel((0, 0), 1.0), (1.5, 0.0))


@pytest.mark.parametrize("dim,sigma", [(2, 0.0), (3, 0.0), (2, 2.0), (3, 2.0)])
def test_ball_poisson_kernel_is_normal_derivative(dim, sigma):
    R = 0.7
    ball = BallKernel((0.0,) * dim, R, KernelSpec(dim, sigma))
    h = 1e-6
    y = np.zeros(dim)
    y[0] = R - h
    # G^B vanishes on the sphere, so a one-sided difference gives -∂G/∂n
    dn = -K.ball_greens(ball, y) / h
    assert -dn == pytest.approx(K.ball_poisson_kernel(ball), rel=1e-5)
    if sigma == 0.0:
        shell = 2 * np.pi * R if dim == 2 else 4 * np.pi * R * R
        assert K.ball_poisson_kernel(ball) == pytest.approx(1 / shell)


def test_sample_ball_greens_mass_estimate():
    ball = BallKernel((0.2, -0.1), 1.0)
    rng = np.random.default_rng(5)
    y, pdf = K.sample_ball_greens(ball, rng, 100_000)
    w = 1.0 / pdf  # f = 1
    est = np.mean(w * K.ball_greens(ball, y))
    assert est == pytest.approx(0.25, rel=1e-9)
    # the estimator f(y) * mass with f = 1 is exact
    assert K.ball_greens_mass(ball) * np.mean(np.ones(len(y))) == 0.25


def test_sample_ball_greens_radial_distribution():
    R = 1.0
    ball = BallKernel((0.0, 0.0), R)
    y, _ = K.sample_ball_greens(ball, np.random.default_rng(9), 100_000)
    r = np.linalg.norm(y, axis=1)
    # CDF(r) = ∫_0^r log(R/s) s ds / (R²/4) = (r²/R²)(1 + 2 log(R/r))
    cdf = lambda s: (s / R) ** 2 * (1 + 2 * np.log(R / np.maximum(s, 1e-300)))
    assert stats.kstest(r, cdf).pvalue > 1e-3


def test_sample_ball_greens_3d_radial_distribution():
    ball = BallKernel((0.0, 0.0, 0.0), 1.0, KernelSpec(3))
    y, _ = K.sample_ball_greens(ball, np.random.default_rng(10), 100_000)
    r = np.linalg.norm(y, axis=1)
    assert stats.kstest(r, stats.beta(2, 2).cdf).pvalue > 1e-3


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("sigma", [1e-14, 1e-10, 1e-6, 0.5, 1.0, 9.0])
def test_ball_mass_small_sigma_is_stable(dim, sigma):
    ball = BallKernel((0.0,) * dim, 0.8, KernelSpec(dim, sigma))
    assert K.ball_greens_mass(ball) == pytest.approx(radial_mass(ball), rel=1e-9)
