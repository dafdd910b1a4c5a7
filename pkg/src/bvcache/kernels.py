"""Green's functions, their derivatives, and ball kernels.

Sign convention: the free-space kernels are fundamental solutions of
``Δu - σu = δ``, so in 2D ``G = log(r) / 2π`` and every derivative below is the
exact derivative of the corresponding ``G``. With this convention the boundary
integral identity ``u(x) = ∮ (∂G/∂n u - G ∂u/∂n) + ∫ G f`` holds in both
dimensions and for both equations.

Ball kernels ``G^B`` are the (positive) Green's functions of ``-Δ + σ`` on a
ball centered at the query point, vanishing on the sphere.
"""
from dataclasses import dataclass
import math

import numpy as np
from numba import njit

EULER_GAMMA = 0.5772156649015329
SINGULAR_REL = 1e-12


class KernelSingularity(ValueError):
    """Raised when a free-space kernel is evaluated at (numerically) r = 0."""


@dataclass(frozen=True)
class KernelSpec:
    dim: int = 2
    sigma: float = 0.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be non-negative")

    @property
    def kind(self):
        return "poisson" if self.sigma == 0.0 else "screened"


# ---------------------------------------------------------------------------
# modified Bessel functions, orders 0 and 1

@njit(cache=True)
def bessel_i01(t):
    """(I0(t), I1(t)) for t >= 0."""
    if t < 30.0:
        q = 0.25 * t * t
        a0 = 1.0
        a1 = 0.5 * t
        s0 = a0
        s1 = a1
        k = 1
        while True:
            a0 *= q / (k * k)
            a1 *= q / (k * (k + 1))
            s0 += a0
            s1 += a1
            if a0 < 1e-17 * s0 and a1 < 1e-17 * s1:
                break
            k += 1
        return s0, s1
    # large-argument expansion; terms shrink until k ~ 2t, far past 1e-17
    pre = math.exp(t) / math.sqrt(2.0 * math.pi * t)
    s0 = 1.0
    s1 = 1.0
    a0 = 1.0
    a1 = 1.0
    for k in range(1, 40):
        odd = (2 * k - 1) ** 2
        a0 *= -(0.0 - odd) / (k * 8.0 * t)
        a1 *= -(4.0 - odd) / (k * 8.0 * t)
        s0 += a0
        s1 += a1
        if abs(a0) < 1e-17 * abs(s0) and abs(a1) < 1e-17 * abs(s1):
            break
    return pre * s0, pre * s1


@njit(cache=True)
def bessel_k01(t):
    """(K0(t), K1(t)) for t > 0; both underflow to 0 for large t."""
    if t <= 2.0:
        q = 0.25 * t * t
        lg = math.log(0.5 * t) + EULER_GAMMA
        i0, i1 = bessel_i01(t)
        # K0 = -(log(t/2) + γ) I0 + Σ_{k>=1} H_k q^k / (k!)^2
        # K1 = 1/t + (log(t/2) + γ) I1 - (t/4) Σ_{k>=0} (H_k + H_{k+1}) q^k / (k!(k+1)!)
        h = 0.0
        a0 = 1.0
        a1 = 1.0
        s0 = 0.0
        s1 = 1.0  # k = 0 term: H_0 + H_1 = 1
        k = 1
        while True:
            h += 1.0 / k
            a0 *= q / (k * k)
            a1 *= q / (k * (k + 1))
            d0 = h * a0
            d1 = (2.0 * h + 1.0 / (k + 1)) * a1
            s0 += d0
            s1 += d1
            if d0 < 1e-17 * abs(s0) and d1 < 1e-17 * s1:
                break
            k += 1
        return -lg * i0 + s0, 1.0 / t + lg * i1 - 0.25 * t * s1
    if t > 745.0:
        return 0.0, 0.0
    # Steed's continued fraction (Temme) for K_0, K_1 at t > 2
    b = 2.0 * (1.0 + t)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, 100000):
        a -= 2.0 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < 1e-17:
            break
    h = a1 * h
    k0 = math.sqrt(math.pi / (2.0 * t)) * math.exp(-t) / s
    k1 = k0 * (t + 0.5 - h) / t
    return k0, k1


@njit(cache=True)
def _bessel_k_array(order, t):
    out = np.empty(t.size)
    flat = t.ravel()
    for i in range(flat.size):
        k0, k1 = bessel_k01(flat[i])
        out[i] = k0 if order == 0 else k1
    return out.reshape(t.shape)



@njit(cache=True)
def ball_mass_factor(dim, t):
    """1 - 1/I0(t) in 2D, 1 - t/sinh(t) in 3D; series near 0 to avoid cancellation."""
    if t >= 1.0:
        if dim == 2:
            i0, _ = bessel_i01(t)
            return 1.0 - 1.0 / i0
        return 1.0 - t / math.sinh(t)
    q = t * t
    if dim == 2:
        # I0(t) - 1 = sum_k (t²/4)^k / (k!)²
        a = 0.25 * q
        excess = a
        k = 1
        while a > 1e-17 * excess:
            k += 1
            a *= 0.25 * q / (k * k)
            excess += a
        return excess / (1.0 + excess)
    # sinh(t) - t = sum_k t^(2k+1) / (2k+1)!
    a = q * t / 6.0
    excess = a
    k = 1
    while a > 1e-17 * excess:
        k += 1
        a *= q / ((2 * k) * (2 * k + 1))
        excess += a
    return excess / (t + excess)

@njit(cache=True)
def _bessel_i_array(order, t):
    out = np.empty(t.size)
    flat = t.ravel()
    for i in range(flat.size):
        i0, i1 = bessel_i01(flat[i])
        out[i] = i0 if order == 0 else i1
    return out.reshape(t.shape)


def bessel_k(order, t):
    """Modified Bessel function of the second kind, order 0 or 1."""
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("bessel_k requires t > 0")
    out = _bessel_k_array(order, np.ascontiguousarray(arr))
    return float(out.item()) if np.ndim(t) == 0 else out


def bessel_i(order, t):
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~(arr >= 0)):
        raise ValueError("bessel_i requires t >= 0")
    out = _bessel_i_array(order, np.ascontiguousarray(arr))
    return float(out.item()) if np.ndim(t) == 0 else out


# ---------------------------------------------------------------------------
# free-space kernels (vectorized over leading axes)

def _geometry(spec, x, y, scale=1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != spec.dim or y.shape[-1] != spec.dim:
        raise ValueError(f"points must be {spec.dim}D")
    d = y - x
    r = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(r < SINGULAR_REL * scale):
        raise KernelSingularity("kernel singularity: x and y coincide")
    return d, r


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def _q(spec, r):
    """Screening factor Q^σ(r); identically 1 for the Poisson equation."""
    if spec.sigma == 0.0:
        return np.ones_like(r)
    t = r * math.sqrt(spec.sigma)
    if spec.dim == 2:
        return t * bessel_k(1, t)
    return np.exp(-t) * (t + 1.0)


def _dq(spec, r):
    """dQ^σ/dr."""
    if spec.sigma == 0.0:
        return np.zeros_like(r)
    rs = math.sqrt(spec.sigma)
    t = r * rs
    if spec.dim == 2:
        return -t * bessel_k(0, t) * rs
    return -t * np.exp(-t) * rs


def greens_free(spec, x, y, scale=1.0):
    _, r = _geometry(spec, x, y, scale)
    if spec.sigma == 0.0:
        g = np.log(r) / (2 * np.pi) if spec.dim == 2 else -1.0 / (4 * np.pi * r)
    else:
        t = r * math.sqrt(spec.sigma)
        if spec.dim == 2:
            g = -bessel_k(0, t) / (2 * np.pi)
        else:
            g = -np.exp(-t) / (4 * np.pi * r)
    return _scalar(g)


def _poisson_gradient(spec, d, r):
    # ∂G/∂x for the Poisson equation, d = y - x
    c = 2 * np.pi * r**2 if spec.dim == 2 else 4 * np.pi * r**3
    return -d / np.asarray(c)[..., None]


def greens_free_gradient(spec, x, y, scale=1.0):
    """∂G/∂x."""
    d, r = _geometry(spec, x, y, scale)
    return _poisson_gradient(spec, d, r) * np.asarray(_q(spec, r))[..., None]


def poisson_kernel_free(spec, x, y, n_y, scale=1.0):
    """∂G/∂n_y."""
    d, r = _geometry(spec, x, y, scale)
    c = 2 * np.pi * r**2 if spec.dim == 2 else 4 * np.pi * r**3
    return _scalar(np.sum(np.asarray(n_y) * d, axis=-1) / c * _q(spec, r))


def poisson_kernel_gradient(spec, x, y, n_y, scale=1.0):
    """∂²G/∂x∂n_y."""
    d, r = _geometry(spec, x, y, scale)
    n = np.broadcast_to(np.asarray(n_y, dtype=np.float64), d.shape)
    nd = np.sum(n * d, axis=-1)
    if spec.dim == 2:
        c = 2 * np.pi
        base = (2 * nd / (c * r**4))[..., None] * d - n / (c * r**2)[..., None]
        p0 = nd / (c * r**2)
    else:
        c = 4 * np.pi
        base = (3 * nd / (c * r**5))[..., None] * d - n / (c * r**3)[..., None]
        p0 = nd / (c * r**3)
    if spec.sigma == 0.0:
        return base
    # product rule on Q(r) * P0, with ∂r/∂x = -d / r
    grad_q = (-_dq(spec, r) / r)[..., None] * d
    return np.asarray(_q(spec, r))[..., None] * base + np.asarray(p0)[..., None] * grad_q


def clamp_kernel(value, c):
    if not c > 0:
        raise ValueError("clamp bound must be positive")
    return np.clip(value, -c, c) if np.ndim(value) else max(-c, min(c, value))


# ---------------------------------------------------------------------------
# ball kernels

@dataclass(frozen=True)
class BallKernel:
    center: tuple
    radius: float
    spec: KernelSpec = KernelSpec()

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        if len(self.center) != self.spec.dim:
            raise ValueError("center dimension mismatch")


def _ball_r(ball, y):
    d = np.asarray(y, dtype=np.float64) - np.asarray(ball.center, dtype=np.float64)
    r = np.sqrt(np.sum(d * d, axis=-1))
    if np.any(r > ball.radius * (1 + 1e-12)):
        raise ValueError("point outside ball")
    if np.any(r == 0):
        raise KernelSingularity("ball kernel evaluated at its center")
    return d, np.minimum(r, ball.radius)


def ball_greens(ball, y):
    _, r = _ball_r(ball, y)
    R, s = ball.radius, ball.spec.sigma
    if ball.spec.dim == 2:
        if s == 0.0:
            g = np.log(R / r) / (2 * np.pi)
        else:
            rs = math.sqrt(s)
            g = (bessel_k(0, r * rs)
                 - bessel_k(0, R * rs) * bessel_i(0, r * rs) / bessel_i(0, R * rs)) / (2 * np.pi)
    else:
        if s == 0.0:
            g = (1.0 / r - 1.0 / R) / (4 * np.pi)
        else:
            rs = math.sqrt(s)
            g = np.sinh(rs * (R - r)) / (4 * np.pi * r * np.sinh(rs * R))
    return _scalar(g)


def ball_greens_mass(ball):
    """∫_B G^B(x, y) dy."""
    R, s = ball.radius, ball.spec.sigma
    if s == 0.0:
        return R * R / (4.0 if ball.spec.dim == 2 else 6.0)
    return ball_mass_factor(ball.spec.dim, R * math.sqrt(s)) / s


def ball_greens_gradient(ball, y):
    """∂G^B/∂x at the center x, with the ball held fixed (Poisson only)."""
    d, r = _ball_r(ball, y)
    R = ball.radius
    if ball.spec.sigma != 0.0:
        raise NotImplementedError("screened ball gradient is only provided inside walks")
    if ball.spec.dim == 2:
        return d * ((1 / r**2 - 1 / R**2) / (2 * np.pi))[..., None]
    return d * ((1 / r**3 - 1 / R**3) / (4 * np.pi))[..., None]


def ball_poisson_kernel(ball):
    """-∂G^B/∂n on the sphere (uniform by symmetry)."""
    R, s = ball.radius, ball.spec.sigma
    area = 2 * np.pi * R if ball.spec.dim == 2 else 4 * np.pi * R * R
    if s == 0.0:
        return 1.0 / area
    t = R * math.sqrt(s)
    total = 1.0 / bessel_i(0, t) if ball.spec.dim == 2 else t / math.sinh(t)
    return total / area


def sample_ball_greens(ball, rng, size=None):
    """Draw y with density G^B(x, y) / mass (Poisson balls). Returns (y, pdf)."""
    if ball.spec.sigma != 0.0:
        raise NotImplementedError("importance sampling is provided for Poisson balls")
    n = 1 if size is None else int(size)
    R, dim = ball.radius, ball.spec.dim
    if dim == 2:
        # r^2 / R^2 is distributed as a product of two uniforms
        r = R * np.sqrt(rng.random(n) * rng.random(n))
        a = 2 * np.pi * rng.random(n)
        dirs = np.column_stack([np.cos(a), np.sin(a)])
    else:
        # r / R ~ Beta(2, 2): the median of three uniforms
        r = R * np.median(rng.random((n, 3)), axis=1)
        v = rng.normal(size=(n, 3))
        dirs = v / np.linalg.norm(v, axis=1)[:, None]
    r = np.maximum(r, 1e-300)
    y = np.asarray(ball.center, dtype=np.float64) + r[:, None] * dirs
    pdf = np.asarray(ball_greens(ball, y)) / ball_greens_mass(ball)
    if size is None:
        return y[0], float(pdf[0])
    return y, pdf
