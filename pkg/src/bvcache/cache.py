"""Boundary value caching: cache construction, splatting and clamping correction.

A round draws a boundary cache on ∂R (the boundary of the region being
solved) with Monte Carlo estimates of u and ∂u/∂n at each sample, plus an
optional source cache inside R, and splats both into every evaluation point
through the free-space boundary integral representation. Rounds are
independent and their sums are combined in round-index order, so the result
does not depend on the order in which rounds were run.
"""
from dataclasses import dataclass, field, replace
import math
import time

import numpy as np
from numba import njit, prange
import shapely
from shapely.geometry import LineString, MultiLineString, Polygon
from shapely.geometry.polygon import orient

from . import bvh as _bvh
from . import geometry as geo
from . import pointwise as pw
from .kernels import bessel_k01
from .rng import next_uniform, seed_sequence, stream_key

TWO_PI = 2.0 * math.pi
SKIP_REL = 1e-12
HIT_CAP = 64
OFFSET_QUAD_SEGS = 8

KNOWN = 0        # ∂R segment on the Neumann boundary: ∂u/∂n = h is known
ESTIMATED = 1    # offset Dirichlet boundary or user loop: u and ∂u/∂n estimated

TAG_NEUMANN_U = 11
TAG_OFFSET = 12
TAG_FALLBACK = 13
TAG_CORRECTION = 14
TAG_CORRECTION_WALK = 15
TAG_SOURCE_CORRECTION = 16

CORRECTION_MODES = ("off", "clamp-only", "clamp+correct")


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class CacheConfig:
    n_boundary: int = 1024
    n_source: int = 1024
    n_walks_neumann: int = 64
    n_walks_dirichlet: int = None     # None: 10x n_walks_neumann
    offset: float = None              # l; None: 5 epsilon
    clamp: float = None               # c; None: 10 / diagonal; inf disables
    correction: str = "off"
    correction_walks: int = 16
    correction_rays: int = 8
    walk: pw.WalkConfig = field(default_factory=pw.WalkConfig)
    stratified: bool = True
    voronoi: bool = False
    neumann_start: str = "nudge"      # or "boundary"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_boundary", "n_source", "n_walks_neumann", "correction_walks",
                     "correction_rays"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_walks_dirichlet is not None and self.n_walks_dirichlet < 1:
            raise ValueError("n_walks_dirichlet must be >= 1")
        if self.correction not in CORRECTION_MODES:
            raise ValueError(f"correction must be one of {CORRECTION_MODES}")
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError("clamp bound must be positive")
        if self.neumann_start not in ("nudge", "boundary"):
            raise ValueError("neumann_start must be 'nudge' or 'boundary'")

    def resolved(self, scene):
        walk = self.walk.resolved(scene)
        l = self.offset if self.offset is not None else 5.0 * walk.epsilon
        if not l > walk.epsilon:
            raise ValueError(f"offset l={l:g} must exceed epsilon={walk.epsilon:g}")
        return replace(
            self, walk=walk, offset=l,
            n_walks_dirichlet=(self.n_walks_dirichlet if self.n_walks_dirichlet
                               is not None else 10 * self.n_walks_neumann),
            clamp=self.clamp if self.clamp is not None else 10.0 / scene.diagonal)

    @property
    def clamp_bound(self):
        """Effective clamp bound for splatting (inf when clamping is off)."""
        if self.correction == "off" or self.clamp is None:
            return math.inf
        return self.clamp


# ---------------------------------------------------------------------------
# solve region

@dataclass(frozen=True)
class RegionRequest:
    kind: str = "whole"        # "whole" or "subdomain"
    loop: geo.Scene = None     # closed loop for subdomain solves

    def __post_init__(self):
        if self.kind not in ("whole", "subdomain"):
            raise ValueError("region kind must be 'whole' or 'subdomain'")
        if self.kind == "subdomain" and self.loop is None:
            raise ValueError("subdomain region needs a loop")


@dataclass(frozen=True, eq=False)
class SolveRegion:
    scene: geo.Scene           # the problem geometry
    boundary: geo.Scene        # ∂R as oriented loops (outward normals)
    kind: np.ndarray           # per ∂R segment: KNOWN or ESTIMATED
    source_segment: np.ndarray  # per ∂R segment: scene segment it lies on, or -1
    offset: float
    mode: str

    @property
    def region(self):
        return geo.Region(self.boundary)

    @property
    def area(self):
        return self.region.area

    def in_domain(self, points):
        """Points inside the problem domain Ω (whole mode) or inside R (subdomain)."""
        if self.mode == "subdomain":
            return geo.inside(self.boundary, points)
        return geo.inside(self.scene, points)

    def needs_fallback(self, points):
        """Points that are evaluated pointwise instead of by splatting."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.mode == "subdomain":
            return np.zeros(len(pts), dtype=bool)
        d, *_ = geo.closest_points(self.scene, pts, "dirichlet")
        return d < self.offset

    def max_distance(self, points):
        """Distance from each point to the farthest point of ∂R."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        v = self.boundary.vertices
        out = np.empty(len(pts))
        for a in range(0, len(pts), 4096):
            d = pts[a:a + 4096, None, :] - v[None]
            out[a:a + 4096] = np.sqrt((d ** 2).sum(-1)).max(axis=1)
        return out


def _loop_polygons(scene):
    polys = []
    for segs in scene.loops():
        ring = scene.p0[segs]
        polys.append(Polygon(ring))
    return polys


def _self_intersections(scene):
    """Pairs of non-adjacent segments that cross or touch."""
    lines = shapely.linestrings(np.stack([scene.p0, scene.p1], axis=1))
    tree = shapely.STRtree(lines)
    a, b = tree.query(lines, predicate="intersects")
    keep = a < b
    a, b = a[keep], b[keep]
    segs = scene.segments
    shared = np.array([len(set(segs[i]) & set(segs[j])) > 0 for i, j in zip(a, b)],
                      dtype=bool) if len(a) else np.zeros(0, dtype=bool)
    bad = []
    for i, j, sh in zip(a, b, shared):
        if not sh:
            bad.append((int(i), int(j)))
        elif shapely.overlaps(lines[i], lines[j]) or shapely.equals(lines[i], lines[j]):
            bad.append((int(i), int(j)))
    return bad


def _domain_polygon(scene):
    if not scene.is_closed:
        raise geo.GeometryError("scene must be closed to define a solve region")
    bad = _self_intersections(scene)
    if bad:
        listing = ", ".join(f"{i}/{j}" for i, j in bad[:20])
        raise geo.GeometryError(f"boundary self-intersects at segments {listing}")
    shape = None
    for p in _loop_polygons(scene):
        shape = p if shape is None else shape.symmetric_difference(p)
    return shape


def _rings_to_scene(shape):
    """Oriented loops of a (multi)polygon as a scene, outward normals."""
    polys = list(shape.geoms) if hasattr(shape, "geoms") else [shape]
    verts, segs = [], []
    for poly in polys:
        if poly.is_empty or poly.geom_type != "Polygon":
            continue
        poly = orient(poly, sign=1.0)
        for ring in [poly.exterior, *poly.interiors]:
            pts = np.asarray(ring.coords)[:-1]
            # drop repeated vertices left by the boolean operations
            keep = np.ones(len(pts), dtype=bool)
            keep[1:] = np.any(np.abs(np.diff(pts, axis=0)) > 0, axis=1)
            pts = pts[keep]
            if len(pts) >= 2 and np.all(pts[0] == pts[-1]):
                pts = pts[:-1]
            if len(pts) < 3:
                continue
            base = sum(len(v) for v in verts)
            n = len(pts)
            verts.append(pts)
            segs.append(np.column_stack([np.arange(n) + base,
                                         (np.arange(n) + 1) % n + base]))
    if not verts:
        raise geo.GeometryError("solve region is empty; reduce the offset l")
    v = np.vstack(verts)
    s = np.vstack(segs)
    return geo.build_scene(v, s, np.zeros(len(s), dtype=np.int64))


def build_solve_region(scene, request=None, offset=None):
    """∂R for a whole-domain or subdomain solve.

    Whole domain: R is Ω minus the l-neighbourhood of the Dirichlet boundary,
    so ∂R consists of Neumann pieces (known data) and the inward offset of the
    Dirichlet boundary. Subdomain: ∂R is the user loop, all of it estimated.
    """
    request = request or RegionRequest()
    if request.kind == "subdomain":
        loop = request.loop
        poly = _domain_polygon(loop)
        bnd = _rings_to_scene(poly)
        if scene.is_closed:
            ok = geo.inside(scene, bnd.vertices)
            if not np.all(ok):
                raise geo.GeometryError("subdomain loop leaves the domain")
        n = bnd.n_segments
        return SolveRegion(scene=scene, boundary=bnd,
                           kind=np.full(n, ESTIMATED, dtype=np.int64),
                           source_segment=np.full(n, -1, dtype=np.int64),
                           offset=0.0 if offset is None else float(offset),
                           mode="subdomain")
    if offset is None or not offset > 0:
        raise ValueError("whole-domain regions need a positive offset l")
    domain = _domain_polygon(scene)
    dseg = np.flatnonzero(scene.labels == geo.Label.DIRICHLET)
    if len(dseg):
        lines = MultiLineString([LineString([scene.p0[s], scene.p1[s]]) for s in dseg])
        band = lines.buffer(offset, quad_segs=OFFSET_QUAD_SEGS)
        shape = domain.difference(band)
    else:
        shape = domain
    bnd = _rings_to_scene(shape)
    # classify ∂R segments by their midpoints
    mid = 0.5 * (bnd.p0 + bnd.p1)
    kind = np.full(bnd.n_segments, ESTIMATED, dtype=np.int64)
    src = np.full(bnd.n_segments, -1, dtype=np.int64)
    if scene.has(geo.Label.NEUMANN):
        dn, _, _, sn = geo.closest_points(scene, mid, "neumann")
        on_n = dn <= 1e-9 * scene.diagonal
        kind[on_n] = KNOWN
        src[on_n] = sn[on_n]
    return SolveRegion(scene=scene, boundary=bnd, kind=kind, source_segment=src,
                       offset=float(offset), mode="whole")


# ---------------------------------------------------------------------------
# caches

@dataclass
class BoundaryCache:
    points: np.ndarray
    normals: np.ndarray
    pdf: np.ndarray
    u: np.ndarray
    dudn: np.ndarray
    segment: np.ndarray
    known: np.ndarray
    voronoi: np.ndarray = None
    dropped: int = 0
    stats: pw.WalkStats = field(default_factory=pw.WalkStats)

    def __len__(self):
        return len(self.points)

    @property
    def weights(self):
        """Per-sample splat weight; sums are divided by the sample count."""
        if self.voronoi is not None:
            return self.voronoi * len(self.points)
        return 1.0 / self.pdf


@dataclass
class SourceCache:
    points: np.ndarray
    pdf: np.ndarray
    f: np.ndarray

    def __len__(self):
        return len(self.points)

    @property
    def weights(self):
        return 1.0 / self.pdf


@dataclass(frozen=True)
class ExactData:
    """Analytic boundary data injected in place of walk estimates."""
    u: object       # points -> values
    grad: object    # points -> (n, 2)


def _round_ids(round_index, n):
    return (np.int64(round_index) << np.int64(24)) + np.arange(n, dtype=np.int64)


def generate_boundary_cache(scene, problem, region, cfg, round_index=0, exact=None):
    """N samples on ∂R with estimates of u and ∂u/∂n."""
    cfg = cfg.resolved(scene)
    rng = seed_sequence(cfg.seed, round_index, 1)
    bnd = region.boundary
    n = cfg.n_boundary
    bp = geo.sample_boundary(bnd, n, rng, stratified=cfg.stratified)
    ids = _round_ids(round_index, n)
    u = np.full(n, np.nan)
    dudn = np.full(n, np.nan)
    known = region.kind[bp.segment] == KNOWN
    stats = pw.WalkStats()
    dropped = 0

    pts, nrm, segs = bp.points.copy(), bp.normals.copy(), bp.segment.copy()
    arc, loop = bp.arc.copy(), bp.loop.copy()
    if exact is not None:
        u = np.asarray(exact.u(pts), dtype=np.float64).copy()
        dudn = np.einsum("ij,ij->i", np.asarray(exact.grad(pts)), nrm)
        if known.any():
            dudn[known] = pw.evaluate_field(problem.neumann, pts[known],
                                            region.source_segment[segs[known]])
    else:
        for attempt in range(4):
            todo = ~np.isfinite(u) | ~np.isfinite(dudn)
            if not todo.any():
                break
            if attempt:
                # resample failed points on fresh locations
                dropped += int(todo.sum())
                rs = geo.sample_boundary(bnd, int(todo.sum()), rng, stratified=False)
                pts[todo], nrm[todo], segs[todo] = rs.points, rs.normals, rs.segment
                arc[todo], loop[todo] = rs.arc, rs.loop
                known = region.kind[segs] == KNOWN
            idx_k = np.flatnonzero(todo & known)
            idx_e = np.flatnonzero(todo & ~known)
            tag = 1000 * attempt
            if len(idx_k):
                dudn[idx_k] = pw.evaluate_field(problem.neumann, pts[idx_k],
                                                region.source_segment[segs[idx_k]])
                wcfg = replace(cfg.walk, n_walks=cfg.n_walks_neumann,
                               stream=TAG_NEUMANN_U + tag)
                if cfg.neumann_start == "nudge":
                    start = pts[idx_k] - 0.5 * cfg.walk.epsilon * nrm[idx_k]
                    m, _, st = pw.solve_points(scene, problem, start, wcfg,
                                               ids=ids[idx_k])
                else:
                    m, _, st = pw.solve_points(scene, problem, pts[idx_k], wcfg,
                                               normals=nrm[idx_k], ids=ids[idx_k])
                u[idx_k] = m
                stats.add(st)
            if len(idx_e):
                wcfg = replace(cfg.walk, n_walks=cfg.n_walks_dirichlet,
                               stream=TAG_OFFSET + tag)
                um, _, gm, _, st = pw.gradient_points(scene, problem, pts[idx_e], wcfg,
                                                      ids=ids[idx_e])
                u[idx_e] = um
                dudn[idx_e] = np.einsum("ij,ij->i", gm, nrm[idx_e])
                stats.add(st)
        bad = ~np.isfinite(u) | ~np.isfinite(dudn)
        if bad.any():
            raise RuntimeError(f"{int(bad.sum())} boundary samples failed repeatedly")
    vor = None
    if cfg.voronoi:
        vor = geo.voronoi_weights_for(
            bnd, geo.BoundaryPoints(pts, nrm, bp.pdf, segs, arc, loop))
    return BoundaryCache(points=pts, normals=nrm, pdf=bp.pdf, u=u, dudn=dudn,
                         segment=segs, known=known, voronoi=vor, dropped=dropped,
                         stats=stats)


def generate_source_cache(problem, region, cfg, round_index=0):
    """M uniform samples in R with the source evaluated there, or None if f ≡ 0."""
    if problem.source is None:
        return None
    rng = seed_sequence(cfg.seed, round_index, 2)
    pts, pdf = geo.sample_region_interior(region.region, cfg.n_source, rng,
                                          stratified=cfg.stratified)
    return SourceCache(points=pts, pdf=pdf, f=pw.evaluate_field(problem.source, pts))


# ---------------------------------------------------------------------------
# evaluation points

@dataclass
class RoundRecord:
    """One round's sums; combined across rounds in round-index order."""
    sum_b: np.ndarray
    n_b: np.ndarray
    sum_s: np.ndarray
    n_s: np.ndarray
    sum_c: np.ndarray
    n_c: np.ndarray
    grad_b: np.ndarray = None
    grad_s: np.ndarray = None
    fb_sum: np.ndarray = None
    fb_n: np.ndarray = None
    skipped: np.ndarray = None


@dataclass
class EvaluationPoints:
    """Struct-of-arrays evaluation points with per-round running sums."""
    points: np.ndarray
    valid: np.ndarray
    fallback: np.ndarray
    unreliable_gradient: np.ndarray
    has_source: bool = False
    rounds: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @classmethod
    def create(cls, points, region, has_source=False):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
        valid = region.in_domain(pts)
        fallback = valid & region.needs_fallback(pts)
        d, *_ = geo.closest_points(region.boundary, pts)
        l = region.offset if region.offset > 0 else 0.0
        unreliable = valid & ~fallback & (d < max(l, 1e-12))
        return cls(points=pts, valid=valid, fallback=fallback,
                   unreliable_gradient=unreliable | fallback, has_source=has_source)

    @property
    def splat_mask(self):
        return self.valid & ~self.fallback

    def _total(self, name):
        recs = [self.rounds[k] for k in sorted(self.rounds)]
        vals = [getattr(r, name) for r in recs if getattr(r, name) is not None]
        if not vals:
            return None
        out = vals[0].copy()
        for v in vals[1:]:
            out = out + v
        return out

    @property
    def boundary_count(self):
        t = self._total("n_b")
        return np.zeros(len(self), dtype=np.int64) if t is None else t

    @property
    def source_count(self):
        t = self._total("n_s")
        return np.zeros(len(self), dtype=np.int64) if t is None else t

    @property
    def skipped(self):
        t = self._total("skipped")
        return np.zeros(len(self), dtype=np.int64) if t is None else t

    def _ratio(self, s, n):
        with np.errstate(invalid="ignore", divide="ignore"):
            if s.ndim == 2:
                return np.where(n[:, None] > 0, s / np.maximum(n, 1)[:, None], 0.0)
            return np.where(n > 0, s / np.maximum(n, 1), 0.0)

    def get_solution(self):
        out = np.full(len(self), np.nan)
        if not self.rounds:
            return out
        nb = self._total("n_b")
        val = self._ratio(self._total("sum_b"), nb)
        ok = nb > 0
        if self.has_source:
            ns = self._total("n_s")
            val = val + self._ratio(self._total("sum_s"), ns)
            ok &= ns > 0
        val = val + self._ratio(self._total("sum_c"), self._total("n_c"))
        sel = self.splat_mask & ok
        out[sel] = val[sel]
        fbn = self._total("fb_n")
        if fbn is not None:
            fb = self.fallback & (fbn > 0)
            out[fb] = (self._total("fb_sum") / np.maximum(fbn, 1))[fb]
        return out

    def get_gradient(self):
        out = np.full((len(self), 2), np.nan)
        gb = self._total("grad_b")
        if gb is None:
            return out
        nb = self._total("n_b")
        val = self._ratio(gb, nb)
        ok = nb > 0
        if self.has_source:
            ns = self._total("n_s")
            val = val + self._ratio(self._total("grad_s"), ns)
            ok &= ns > 0
        sel = self.splat_mask & ok
        out[sel] = val[sel]
        return out

    def _single_rounds(self):
        for k in sorted(self.rounds):
            yield EvaluationPoints(self.points, self.valid, self.fallback,
                                   self.unreliable_gradient, self.has_source,
                                   {k: self.rounds[k]})

    def round_estimates(self):
        """Per-round solution estimates, shape (rounds, points)."""
        return np.array([sub.get_solution() for sub in self._single_rounds()])

    def round_gradients(self):
        """Per-round gradient estimates, shape (rounds, points, 2)."""
        return np.array([sub.get_gradient() for sub in self._single_rounds()])

    def solution_stderr(self):
        est = self.round_estimates()
        if len(est) < 2:
            return np.full(len(self), np.nan)
        return est.std(axis=0, ddof=1) / math.sqrt(len(est))

    def gradient_stderr(self):
        est = self.round_gradients()
        if len(est) < 2:
            return np.full((len(self), 2), np.nan)
        return est.std(axis=0, ddof=1) / math.sqrt(len(est))


# ---------------------------------------------------------------------------
# splat kernels

@njit(cache=True, inline="always")
def _free_kernels(dx, dy, nx, ny, r2, sigma):
    """G, ∂G/∂n and the scalar parts of their x-gradients at d = z - x."""
    r = math.sqrt(r2)
    nd = nx * dx + ny * dy
    if sigma == 0.0:
        G = math.log(r) / TWO_PI
        q = 1.0 / (TWO_PI * r2)
        dGdr = 1.0 / (TWO_PI * r)
        dq = -2.0 / (TWO_PI * r2 * r)
    else:
        a = math.sqrt(sigma)
        k0, k1 = bessel_k01(a * r)
        G = -k0 / TWO_PI
        q = a * k1 / (TWO_PI * r)
        dGdr = a * k1 / TWO_PI
        dq = a / TWO_PI * (-a * r * k0 - 2.0 * k1) / r2
    return G, nd * q, nd, q, dGdr, dq, r


@njit(cache=True, parallel=True)
def _splat_boundary(X, active, Z, Nz, W, U, D, sigma, skip2, clamp_c, ball_R,
                    use_ball, want_grad):
    P = X.shape[0]
    out_u = np.zeros(P)
    out_g = np.zeros((P, 2))
    out_n = np.zeros(P, dtype=np.int64)
    out_skip = np.zeros(P, dtype=np.int64)
    for p in prange(P):
        if not active[p]:
            continue
        xs = X[p, 0]
        ys = X[p, 1]
        su = 0.0
        gx = 0.0
        gy = 0.0
        n = 0
        sk = 0
        logR = math.log(ball_R[p]) / TWO_PI if use_ball else 0.0
        for i in range(Z.shape[0]):
            dx = Z[i, 0] - xs
            dy = Z[i, 1] - ys
            r2 = dx * dx + dy * dy
            if r2 <= skip2:
                sk += 1
                continue
            nx = Nz[i, 0]
            ny = Nz[i, 1]
            G, Pk, nd, q, dGdr, dq, r = _free_kernels(dx, dy, nx, ny, r2, sigma)
            if use_ball:
                G -= logR
            if Pk > clamp_c:
                Pk = clamp_c
            elif Pk < -clamp_c:
                Pk = -clamp_c
            su += W[i] * (Pk * U[i] - G * D[i])
            if want_grad:
                # ∇x G = -(d/r) G'(r); ∇x P = -n q - (n.d)(d/r) q'(r)
                gGx = -dx / r * dGdr
                gGy = -dy / r * dGdr
                gPx = -nx * q - nd * dx / r * dq
                gPy = -ny * q - nd * dy / r * dq
                gx += W[i] * (gPx * U[i] - gGx * D[i])
                gy += W[i] * (gPy * U[i] - gGy * D[i])
            n += 1
        out_u[p] = su
        out_g[p, 0] = gx
        out_g[p, 1] = gy
        out_n[p] = n
        out_skip[p] = sk
    return out_u, out_g, out_n, out_skip


@njit(cache=True, parallel=True)
def _splat_source(X, active, Y, W, F, sigma, skip2, clamp_c, ball_R, use_ball,
                  want_grad):
    P = X.shape[0]
    out_u = np.zeros(P)
    out_g = np.zeros((P, 2))
    out_n = np.zeros(P, dtype=np.int64)
    out_skip = np.zeros(P, dtype=np.int64)
    for p in prange(P):
        if not active[p]:
            continue
        xs = X[p, 0]
        ys = X[p, 1]
        su = 0.0
        gx = 0.0
        gy = 0.0
        n = 0
        sk = 0
        R = ball_R[p]
        for i in range(Y.shape[0]):
            dx = Y[i, 0] - xs
            dy = Y[i, 1] - ys
            r2 = dx * dx + dy * dy
            if r2 <= skip2:
                sk += 1
                continue
            G, _, _, _, dGdr, _, r = _free_kernels(dx, dy, 1.0, 0.0, r2, sigma)
            if use_ball:
                gb = math.log(R / r) / TWO_PI
                if gb < 0.0:
                    gb = 0.0
                if gb > clamp_c:
                    gb = clamp_c
                G = -gb
            su += W[i] * G * F[i]
            if want_grad:
                gx += W[i] * (-dx / r * dGdr) * F[i]
                gy += W[i] * (-dy / r * dGdr) * F[i]
            n += 1
        out_u[p] = su
        out_g[p, 0] = gx
        out_g[p, 1] = gy
        out_n[p] = n
        out_skip[p] = sk
    return out_u, out_g, out_n, out_skip


@njit(cache=True, parallel=True)
def _correction_rays(X, active, ids, n_rays, seed, tag, bnd, sigma, clamp_c):
    """Ray-sampled estimate of the clamped-away part of the double layer.

    For each point and ray returns every hit with a non-zero factor
    sign * Q * max(0, 1 - c / |∂G/∂n|), so that Σ factor * u(hit) estimates
    the missing integral. Also returns the total number of hits per ray.
    """
    (p0, p1, labels, normals, bmin, bmax, left, right, start, count, mask,
     order) = bnd
    P = X.shape[0]
    hit_pts = np.zeros((P, n_rays, HIT_CAP, 2))
    hit_fac = np.zeros((P, n_rays, HIT_CAP))
    hit_seg = np.full((P, n_rays, HIT_CAP), -1, dtype=np.int64)
    n_hits = np.zeros((P, n_rays), dtype=np.int64)
    a = math.sqrt(sigma)
    for p in prange(P):
        if not active[p]:
            continue
        ts = np.empty(HIT_CAP)
        ss = np.empty(HIT_CAP, dtype=np.int64)
        for k in range(n_rays):
            st = stream_key(seed, tag, ids[p], k)
            st, u = next_uniform(st)
            # one jittered direction per angular stratum
            th = TWO_PI * (k + u) / n_rays
            dx = math.cos(th)
            dy = math.sin(th)
            m = _bvh.ray_all(X[p, 0], X[p, 1], dx, dy, 0.0, np.inf, p0, p1, labels,
                             geo.ALL, bmin, bmax, left, right, start, count, mask,
                             order, ts, ss)
            n_hits[p, k] = m
            j = 0
            for h in range(min(m, HIT_CAP)):
                t = ts[h]
                s = ss[h]
                nd = normals[s, 0] * dx + normals[s, 1] * dy
                sign = 1.0 if nd > 0.0 else -1.0
                # |∂G/∂n| at the hit, and the Jacobian from dθ/2π to arc length
                if sigma == 0.0:
                    Q = 1.0
                    Pabs = abs(nd) / (TWO_PI * t)
                else:
                    _, k1 = bessel_k01(a * t)
                    Q = a * t * k1
                    Pabs = abs(nd) * a * k1 / TWO_PI
                if Pabs > clamp_c:
                    hit_pts[p, k, j, 0] = X[p, 0] + t * dx
                    hit_pts[p, k, j, 1] = X[p, 1] + t * dy
                    hit_fac[p, k, j] = sign * Q * (1.0 - clamp_c / Pabs)
                    hit_seg[p, k, j] = s
                    j += 1
    return hit_pts, hit_fac, hit_seg, n_hits


@njit(cache=True, parallel=True)
def _source_correction_samples(X, active, ids, n_samples, seed, tag, ball_R, clamp_c):
    """Samples y ~ G^B(x, .) with weights -mass (1 - min(1, c / G^B))."""
    P = X.shape[0]
    ys = np.zeros((P, n_samples, 2))
    ws = np.zeros((P, n_samples))
    for p in prange(P):
        if not active[p]:
            continue
        R = ball_R[p]
        mass = 0.25 * R * R
        for k in range(n_samples):
            st = stream_key(seed, tag, ids[p], k)
            st, u1 = next_uniform(st)
            st, u2 = next_uniform(st)
            st, u3 = next_uniform(st)
            r = R * math.sqrt(u1 * u2)
            ys[p, k, 0] = X[p, 0] + r * math.cos(TWO_PI * u3)
            ys[p, k, 1] = X[p, 1] + r * math.sin(TWO_PI * u3)
            if r > 0.0:
                gb = math.log(R / r) / TWO_PI
                if gb > clamp_c:
                    ws[p, k] = -mass * (1.0 - clamp_c / gb)
    return ys, ws


# ---------------------------------------------------------------------------
# splatting API

def _skip2(region):
    return (SKIP_REL * region.scene.diagonal) ** 2


def _use_ball(problem, cfg):
    return problem.source is not None and cfg.correction != "off"


def _check_ball(problem, cfg):
    if _use_ball(problem, cfg) and problem.sigma != 0.0:
        raise ValueError("ball-kernel source correction supports the Poisson kernel only")


def splat_solution(bcache, scache, evals, problem, region, cfg, gradient=False):
    """Splat one round's caches; returns the partial RoundRecord."""
    _check_ball(problem, cfg)
    act = evals.splat_mask
    c = cfg.clamp_bound
    use_ball = _use_ball(problem, cfg)
    ball_R = region.max_distance(evals.points) if use_ball else np.ones(len(evals))
    sb, gb, nb, skb = _splat_boundary(
        evals.points, act, bcache.points, bcache.normals, bcache.weights, bcache.u,
        bcache.dudn, float(problem.sigma), _skip2(region), c, ball_R, use_ball, gradient)
    P = len(evals)
    rec = RoundRecord(sum_b=sb, n_b=nb, sum_s=np.zeros(P), n_s=np.zeros(P, dtype=np.int64),
                      sum_c=np.zeros(P), n_c=np.zeros(P, dtype=np.int64),
                      grad_b=gb if gradient else None, skipped=skb)
    if scache is not None:
        ss, gs, ns, sks = _splat_source(
            evals.points, act, scache.points, scache.weights, scache.f,
            float(problem.sigma), _skip2(region), c, ball_R, use_ball, gradient)
        rec.sum_s, rec.n_s = ss, ns
        rec.skipped = skb + sks
        if gradient:
            rec.grad_s = gs
    return rec


def splat_gradient(bcache, scache, evals, problem, region, cfg):
    """Gradient splats (with the solution sums of the same round)."""
    return splat_solution(bcache, scache, evals, problem, region,
                          replace(cfg, correction="off"), gradient=True)


def corrected_boundary_splat(evals, scene, problem, region, cfg, round_index=0,
                             exact=None):
    """Ray-sampled correction for the clamped double-layer kernel.

    Returns (per-point correction sums, per-point sample counts, walk stats).
    """
    cfg = cfg.resolved(scene)
    P = len(evals)
    act = evals.splat_mask
    zero = (np.zeros(P), np.zeros(P, dtype=np.int64), pw.WalkStats())
    if cfg.correction != "clamp+correct":
        return zero
    ids = _round_ids(round_index, P)
    hp, hf, hs, nh = _correction_rays(evals.points, act, ids, cfg.correction_rays,
                                      np.uint64(cfg.seed), TAG_CORRECTION,
                                      _geo4(region.boundary), float(problem.sigma),
                                      float(cfg.clamp_bound))
    if np.any(nh[act] == 0):
        raise geo.GeometryError("a ray from an interior point missed a closed ∂R")
    if np.any(nh > HIT_CAP):
        raise geo.GeometryError(f"more than {HIT_CAP} ray crossings of ∂R")
    need = hf != 0.0
    sums = np.zeros(P)
    stats = pw.WalkStats()
    if need.any():
        pts = hp[need]
        segs = hs[need]
        if exact is not None:
            vals = np.asarray(exact.u(pts), dtype=np.float64)
        else:
            vals, stats = _estimate_on_boundary(scene, problem, region, cfg, pts, segs,
                                                round_index)
        contrib = np.zeros(hf.shape)
        contrib[need] = hf[need] * vals
        sums = contrib.sum(axis=(1, 2)) / cfg.correction_rays
    counts = np.where(act, 1, 0).astype(np.int64)
    return sums, counts, stats


def _geo4(scene):
    return (scene.p0, scene.p1, scene.labels, scene.normals) + scene.bvh_arrays()


def _estimate_on_boundary(scene, problem, region, cfg, pts, segs, round_index):
    """Fresh u estimates at points of ∂R using the correction walk budget."""
    known = region.kind[segs] == KNOWN
    nrm = region.boundary.normals[segs]
    start = pts.copy()
    start[known] -= 0.5 * cfg.walk.epsilon * nrm[known]
    wcfg = replace(cfg.walk, n_walks=cfg.correction_walks, stream=TAG_CORRECTION_WALK)
    ids = (np.int64(round_index) << np.int64(24)) + np.arange(len(pts), dtype=np.int64)
    m, _, st = pw.solve_points(scene, problem, start, wcfg, ids=ids)
    return m, st


def corrected_source_splat(evals, problem, region, cfg, round_index=0):
    """Correction for the clamped ball-kernel source term.

    Returns per-point sums (one averaged estimate per point).
    """
    P = len(evals)
    if not _use_ball(problem, cfg) or cfg.correction != "clamp+correct":
        return np.zeros(P)
    _check_ball(problem, cfg)
    act = evals.splat_mask
    ball_R = region.max_distance(evals.points)
    ids = _round_ids(round_index, P)
    ys, ws = _source_correction_samples(evals.points, act, ids, cfg.correction_rays,
                                        np.uint64(cfg.seed), TAG_SOURCE_CORRECTION,
                                        ball_R, float(cfg.clamp_bound))
    need = ws != 0.0
    out = np.zeros(ws.shape)
    if need.any():
        y = ys[need]
        f = pw.evaluate_field(problem.source, y) * region.region.contains(y)
        out[need] = ws[need] * f
    return out.sum(axis=1) / cfg.correction_rays


# ---------------------------------------------------------------------------
# progressive rounds

@dataclass
class RoundReport:
    round_index: int
    cache_time: float = 0.0
    splat_time: float = 0.0
    correction_time: float = 0.0
    fallback_time: float = 0.0
    n_boundary: int = 0
    n_source: int = 0
    dropped: int = 0
    skipped: int = 0
    walks: int = 0
    truncated: int = 0

    @property
    def total_time(self):
        return self.cache_time + self.splat_time + self.correction_time + self.fallback_time


def fallback_solve(evals, scene, problem, cfg, round_index=0):
    """One round of pointwise walks at fallback points: (sums, counts, stats)."""
    P = len(evals)
    sums = np.zeros(P)
    counts = np.zeros(P, dtype=np.int64)
    idx = np.flatnonzero(evals.fallback)
    if not len(idx):
        return sums, counts, pw.WalkStats()
    wcfg = replace(cfg.walk, stream=TAG_FALLBACK + 1000 * round_index)
    samples, stats = pw.walk_samples(scene, problem, evals.points[idx], wcfg, star=True,
                                     ids=idx.astype(np.int64))
    sums[idx] = samples.sum(axis=1)
    counts[idx] = samples.shape[1]
    return sums, counts, stats


def update_solution(evals, scene, problem, region, cfg, round_index=None, exact=None,
                    gradient=False):
    """One progressive round: fresh caches, splat, correct, fallback walks."""
    cfg = cfg.resolved(scene)
    _check_ball(problem, cfg)
    if round_index is None:
        round_index = max(evals.rounds) + 1 if evals.rounds else 0
    if round_index in evals.rounds:
        raise ValueError(f"round {round_index} already applied")
    evals.has_source = problem.source is not None
    report = RoundReport(round_index=round_index)
    t0 = time.perf_counter()
    any_splat = bool(evals.splat_mask.any())
    if any_splat:
        bcache = generate_boundary_cache(scene, problem, region, cfg, round_index, exact)
        scache = generate_source_cache(problem, region, cfg, round_index)
        report.n_boundary = len(bcache)
        report.n_source = len(scache) if scache is not None else 0
        report.dropped = bcache.dropped
        report.walks += bcache.stats.walks
        report.truncated += bcache.stats.truncated
    t1 = time.perf_counter()
    report.cache_time = t1 - t0
    P = len(evals)
    if any_splat:
        rec = splat_solution(bcache, scache, evals, problem, region, cfg, gradient)
        if gradient and cfg.clamp_bound < math.inf:
            # gradients are splatted unclamped; the solution keeps its clamping
            g = splat_solution(bcache, scache, evals, problem, region,
                               replace(cfg, correction="off"), gradient=True)
            rec.grad_b, rec.grad_s = g.grad_b, g.grad_s
    else:
        rec = RoundRecord(sum_b=np.zeros(P), n_b=np.zeros(P, dtype=np.int64),
                          sum_s=np.zeros(P), n_s=np.zeros(P, dtype=np.int64),
                          sum_c=np.zeros(P), n_c=np.zeros(P, dtype=np.int64),
                          skipped=np.zeros(P, dtype=np.int64))
    t2 = time.perf_counter()
    report.splat_time = t2 - t1
    if any_splat and cfg.correction == "clamp+correct":
        cs, cn, st = corrected_boundary_splat(evals, scene, problem, region, cfg,
                                              round_index, exact)
        cs = cs + corrected_source_splat(evals, problem, region, cfg, round_index)
        rec.sum_c, rec.n_c = cs, cn
        report.walks += st.walks
        report.truncated += st.truncated
    t3 = time.perf_counter()
    report.correction_time = t3 - t2
    fs, fn, st = fallback_solve(evals, scene, problem, cfg, round_index)
    rec.fb_sum, rec.fb_n = fs, fn
    report.walks += st.walks
    report.truncated += st.truncated
    report.fallback_time = time.perf_counter() - t3
    report.skipped = int(rec.skipped.sum()) if rec.skipped is not None else 0
    evals.rounds[round_index] = rec
    return report


class RetainedCaches:
    """Caches kept after splatting, so u and ∇u can be queried anywhere in R
    without further walks."""

    def __init__(self, scene, problem, region, cfg, rounds=1, exact=None, first_round=0):
        self.scene, self.problem, self.region = scene, problem, region
        self.cfg = replace(cfg.resolved(scene), correction="off")
        self.caches = []
        for k in range(first_round, first_round + rounds):
            b = generate_boundary_cache(scene, problem, region, self.cfg, k, exact)
            s = generate_source_cache(problem, region, self.cfg, k)
            self.caches.append((b, s))

    def _evaluate(self, points, gradient):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
        inside = self.region.region.contains(pts) if self.region.mode == "whole" else \
            self.region.in_domain(pts)
        ev = EvaluationPoints(points=pts, valid=inside, fallback=np.zeros(len(pts), dtype=bool),
                              unreliable_gradient=np.zeros(len(pts), dtype=bool),
                              has_source=self.problem.source is not None)
        for k, (b, s) in enumerate(self.caches):
            ev.rounds[k] = splat_solution(b, s, ev, self.problem, self.region, self.cfg,
                                          gradient=gradient)
        return ev

    def solution(self, points):
        return self._evaluate(points, False).get_solution()

    def gradient(self, points):
        return self._evaluate(points, True).get_gradient()
