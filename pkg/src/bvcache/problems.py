"""Analytic test problems and deterministic oracles.

Every registry problem uses its exact solution as Dirichlet data, so the
polygonized disks and annuli remain exact test cases.
"""
from dataclasses import dataclass
import math
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import fields as fl
from . import geometry as geo
from .cache import ExactData
from .kernels import KernelSpec, bessel_k, greens_free
from .pointwise import PDEProblem

DISK_RESOLUTION = 256


@dataclass(frozen=True, eq=False)
class AnalyticProblem:
    name: str
    scene: geo.Scene
    problem: PDEProblem
    u: object        # points -> values
    grad: object     # points -> (n, 2)

    def dudn(self, points, normals):
        return np.einsum("ij,ij->i", self.grad(points), np.asarray(normals, dtype=np.float64))

    def exact_data(self):
        return ExactData(u=self.u, grad=self.grad)


def _disk(n):
    return geo.polygon_scene(geo.circle_points(n), "D")


def _zero_grad(points):
    return np.zeros((len(np.atleast_2d(points)), 2))


def _disk_linear(n):
    f = fl.Linear(a=1.0)
    return AnalyticProblem("disk-linear", _disk(n), PDEProblem(dirichlet=f), f, f.gradient)


def _disk_poisson(n):
    u = fl.Radial(a=0.25, c=-0.25)
    return AnalyticProblem("disk-poisson", _disk(n),
                           PDEProblem(source=fl.Constant(1.0), dirichlet=u), u, u.gradient)


def _square_mixed_linear(n):
    scene = geo.polygon_scene([[0, 0], [1, 0], [1, 1], [0, 1]], ["N", "D", "N", "D"])
    u = fl.Linear(a=1.0)
    return AnalyticProblem("square-mixed-linear", scene,
                           PDEProblem(dirichlet=u, neumann=fl.Constant(0.0)), u, u.gradient)


def _screened_constant(n, sigma=2.0):
    u = fl.Constant(1.0)
    return AnalyticProblem("screened-constant", _disk(n),
                           PDEProblem(spec=KernelSpec(sigma=sigma), source=fl.Constant(-sigma),
                                      dirichlet=u), u, _zero_grad)


def _annulus_log(n):
    outer = geo.polygon_scene(geo.circle_points(n, radius=math.e), "D")
    inner = geo.polygon_scene(geo.circle_points(n)[::-1], "D")
    u = fl.Radial(b=1.0)
    return AnalyticProblem("annulus-log", geo.merge_scenes(outer, inner),
                           PDEProblem(dirichlet=u), u, u.gradient)


REGISTRY = {
    "disk-linear": _disk_linear,
    "disk-poisson": _disk_poisson,
    "square-mixed-linear": _square_mixed_linear,
    "screened-constant": _screened_constant,
    "annulus-log": _annulus_log,
}


def analytic_problem(name, resolution=DISK_RESOLUTION):
    try:
        return REGISTRY[name](resolution)
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(REGISTRY)}") from None


def stencil_residual(ap, points, h=1e-3):
    """|Δu - σu - f| at points, by a 5-point stencil on the exact solution."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    lap = (ap.u(p + ex) + ap.u(p - ex) + ap.u(p + ey) + ap.u(p - ey) - 4 * ap.u(p)) / h**2
    f = np.zeros(len(p)) if ap.problem.source is None else ap.problem.source(p)
    return np.abs(lap - ap.problem.sigma * ap.u(p) - f)


# ---------------------------------------------------------------------------
# grids

@dataclass
class GridField:
    """Values on a rectangular node grid, row-major with x varying fastest."""
    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple             # (nx, ny)
    values: np.ndarray       # (ny, nx)
    valid: np.ndarray        # (ny, nx) bool

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (2,)).copy()
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")
        if min(self.shape) < 1:
            raise ValueError("grid dimensions must be >= 1")
        nx, ny = self.shape
        self.values = np.asarray(self.values, dtype=np.float64).reshape(ny, nx)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(ny, nx)

    @staticmethod
    def node_points(origin, spacing, shape):
        nx, ny = shape
        sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (2,))
        xs = origin[0] + sp[0] * np.arange(nx)
        ys = origin[1] + sp[1] * np.arange(ny)
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    @classmethod
    def from_points(cls, origin, spacing, shape, values, valid):
        return cls(origin, spacing, shape, values, valid)

    def points(self):
        return self.node_points(self.origin, self.spacing, self.shape)

    def write_csv(self, path):
        pts = self.points()
        lines = ["x,y,value,valid"]
        for (x, y), v, ok in zip(pts, self.values.ravel(), self.valid.ravel()):
            val = f"{v:.17g}" if ok else "nan"
            lines.append(f"{x:.17g},{y:.17g},{val},{int(ok)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path):
        rows = np.atleast_1d(np.genfromtxt(path, delimiter=",", names=True, dtype=np.float64))
        x, y = rows["x"], rows["y"]
        xs = np.unique(x)
        ys = np.unique(y)
        nx, ny = len(xs), len(ys)
        if nx * ny != len(rows):
            raise ValueError(f"{path}: rows do not form a rectangular grid")
        sx = (xs[-1] - xs[0]) / (nx - 1) if nx > 1 else 1.0
        sy = (ys[-1] - ys[0]) / (ny - 1) if ny > 1 else 1.0
        valid = rows["valid"] > 0
        values = np.where(valid, rows["value"], np.nan)
        return cls(np.array([xs[0], ys[0]]), np.array([sx, sy]), (nx, ny), values, valid)


def rmse(a, b):
    if a.shape != b.shape or not np.allclose(a.origin, b.origin) or not np.allclose(
            a.spacing, b.spacing):
        raise ValueError("grid mismatch")
    both = a.valid & b.valid
    if not both.any():
        raise ValueError("grids share no valid nodes")
    d = a.values[both] - b.values[both]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# oracles

def _rectangle(scene):
    lo, hi = scene.bounds
    tol = 1e-12 * scene.diagonal
    if scene.has(geo.Label.NEUMANN):
        raise ValueError("finite-difference reference needs a purely Dirichlet scene")
    a, b = scene.p0, scene.p1
    horiz = (np.abs(a[:, 1] - b[:, 1]) <= tol) & (
        np.minimum(np.abs(a[:, 1] - lo[1]), np.abs(a[:, 1] - hi[1])) <= tol)
    vert = (np.abs(a[:, 0] - b[:, 0]) <= tol) & (
        np.minimum(np.abs(a[:, 0] - lo[0]), np.abs(a[:, 0] - hi[0])) <= tol)
    perimeter = 2 * float((hi - lo).sum())
    if not np.all(horiz | vert) or abs(scene.total_length - perimeter) > 1e-9 * perimeter:
        raise ValueError("finite-difference reference needs a rectangle-aligned scene")
    return lo, hi


def fd_reference(scene, problem, h, tol=1e-10):
    """5-point finite-difference solve of Δu - σu = f with u = g on the box edges."""
    lo, hi = _rectangle(scene)
    ext = hi - lo
    n = np.rint(ext / h).astype(int)
    if np.any(np.abs(n * h - ext) > 1e-9 * ext) or np.any(n < 2):
        raise ValueError("grid spacing must divide the rectangle sides")
    nx, ny = n + 1
    pts = GridField.node_points(lo, h, (nx, ny))
    ix = np.tile(np.arange(nx), ny)
    iy = np.repeat(np.arange(ny), nx)
    boundary = (ix == 0) | (iy == 0) | (ix == nx - 1) | (iy == ny - 1)
    interior = np.flatnonzero(~boundary)
    u = np.zeros(nx * ny)
    u[boundary] = _boundary_values(scene, problem, pts[boundary])
    f = np.zeros(len(interior)) if problem.source is None else problem.source(pts[interior])
    # unknown index per node
    idx = np.full(nx * ny, -1)
    idx[interior] = np.arange(len(interior))
    rows, cols, data = [], [], []
    rhs = h * h * f
    diag = -4.0 - problem.sigma * h * h
    rows.append(np.arange(len(interior)))
    cols.append(np.arange(len(interior)))
    data.append(np.full(len(interior), diag))
    for step in (1, -1, nx, -nx):
        nb = interior + step
        inner = idx[nb] >= 0
        rows.append(np.flatnonzero(inner))
        cols.append(idx[nb[inner]])
        data.append(np.ones(int(inner.sum())))
        rhs = rhs - np.where(inner, 0.0, u[nb])
    A = sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(interior),) * 2)
    sol = spsolve(A.tocsc(), rhs)
    res = np.abs(A @ sol - rhs).max() / (h * h) if len(sol) else 0.0
    scale = max(1.0, float(np.abs(rhs).max()) / (h * h) if len(rhs) else 1.0)
    if res > tol * scale:
        raise RuntimeError(f"finite-difference residual {res:.3g} above tolerance")
    u[interior] = sol
    return GridField(lo, h, (nx, ny), u, np.ones(nx * ny, dtype=bool))


def _boundary_values(scene, problem, pts):
    _, _, _, seg = geo.closest_points(scene, pts, "dirichlet")
    fld = problem.dirichlet
    if fld is None:
        return np.zeros(len(pts))
    if getattr(fld, "uses_segments", False):
        return fld(pts, seg)
    return np.asarray(fld(pts), dtype=np.float64)


def quadrature_nodes(boundary, n_nodes=1 << 16):
    """Composite midpoint nodes on a segment boundary: (points, normals, weights)."""
    lens = boundary.lengths
    per = np.maximum(1, np.rint(n_nodes * lens / lens.sum()).astype(int))
    seg = np.repeat(np.arange(boundary.n_segments), per)
    k = np.arange(len(seg)) - np.repeat(np.cumsum(per) - per, per)
    t = (k + 0.5) / per[seg]
    pts = boundary.p0[seg] + t[:, None] * (boundary.p1[seg] - boundary.p0[seg])
    return pts, boundary.normals[seg], lens[seg] / per[seg]


def dense_bie_quadrature(boundary, u, dudn, x, spec=KernelSpec(), n_nodes=1 << 16,
                         clamp=math.inf):
    """Boundary term ∮ (∂G/∂n u - G ∂u/∂n) at x by midpoint quadrature.

    ``u(points)`` and ``dudn(points, normals)`` give the boundary data; a
    finite ``clamp`` saturates the double-layer kernel as in clamped splatting.
    """
    pts, nrm, w = quadrature_nodes(boundary, n_nodes)
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    uv = np.asarray(u(pts), dtype=np.float64)
    dv = np.asarray(dudn(pts, nrm), dtype=np.float64)
    out = np.empty(len(x))
    for i, xi in enumerate(x):
        d = pts - xi
        r = np.sqrt(np.einsum("ij,ij->i", d, d))
        nd = np.einsum("ij,ij->i", nrm, d)
        if spec.sigma == 0.0:
            G = np.log(r) / (2 * math.pi)
            P = nd / (2 * math.pi * r * r)
        else:
            a = math.sqrt(spec.sigma)
            G = -bessel_k(0, a * r) / (2 * math.pi)
            P = nd * a * bessel_k(1, a * r) / (2 * math.pi * r)
        P = np.clip(P, -clamp, clamp)
        out[i] = np.sum(w * (P * uv - G * dv))
    return out if len(out) > 1 else float(out[0])


def radial_source_integral(x, radius, source, n_r=2048, n_theta=2048):
    """∫_{|y|<radius} G(x, y) f(y) dy by tensor Gauss-Legendre quadrature."""
    gr, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (gr + 1.0)
    wr = 0.5 * radius * wr
    th = 2 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
    R, T = np.meshgrid(r, th, indexing="ij")
    y = np.column_stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()])
    w = (wr[:, None] * R * (2 * math.pi / n_theta)).ravel()
    g = greens_free(KernelSpec(), np.asarray(x, dtype=np.float64), y)
    return float(np.sum(w * g * source(y)))


def source_integral(scene, source, x, spec=KernelSpec(), n_theta=1024, n_r=48):
    """∫_Ω G(x, y) f(y) dy in polar coordinates about x.

    Each direction is split into its inside intervals by ray casting; every
    interval gets a Gauss-Legendre rule in r, so the log singularity at x is
    absorbed by the r dr measure.
    """
    x = np.asarray(x, dtype=np.float64).reshape(2)
    gr, wr = np.polynomial.legendre.leggauss(n_r)
    ys, ws = [], []
    dth = 2 * math.pi / n_theta
    for k in range(n_theta):
        th = (k + 0.5) * dth
        d = np.array([math.cos(th), math.sin(th)])
        hits = geo.intersect_ray(scene, x, d)
        ts = [0.0] + [h.t for h in hits]
        for a, b in zip(ts[0::2], ts[1::2]):
            r = 0.5 * (b - a) * (gr + 1.0) + a
            ys.append(x + r[:, None] * d)
            ws.append(0.5 * (b - a) * wr * r * dth)
    y = np.vstack(ys)
    w = np.concatenate(ws)
    g = greens_free(spec, x, y)
    return float(np.sum(w * g * np.asarray(source(y), dtype=np.float64)))
