"""Walk-on-spheres / walk-on-stars pointwise estimators for u and ∇u in 2D.

Walks run in numba over a flat task list (point × walk); each task draws from
its own counter-based stream, so results do not depend on scheduling or on how
points are batched. Boundary and source data stay ordinary vectorized Python
callables: a walk only records *where* it sampled f, g and h and with which
weights, and the fields are evaluated afterwards in bulk. Walks that need
source or Neumann samples are run twice, once to count events and once, from
the same stream, to write them.
"""
from dataclasses import dataclass, replace
import math

import numpy as np
from numba import njit, prange

from . import bvh as _bvh
from . import geometry as geo
from .kernels import KernelSpec, ball_mass_factor, bessel_i01, bessel_k01
from .rng import next_uniform, stream_key

TWO_PI = 2.0 * math.pi
NEUMANN_CLIP_CAP = 256

# stream tags, combined with the user stream id
TAG_SOLVE = 1
TAG_GRADIENT = 2


@dataclass(frozen=True)
class PDEProblem:
    """Δu - σu = f in Ω, u = g on the Dirichlet part, ∂u/∂n = h on the Neumann part.

    Fields are vectorized callables ``field(points) -> values`` over (n, 2)
    arrays; ``None`` means identically zero. A field with a true
    ``uses_segments`` attribute is called as ``field(points, segment_ids)``.
    """
    spec: KernelSpec = KernelSpec()
    source: object = None
    dirichlet: object = None
    neumann: object = None

    @property
    def sigma(self):
        return self.spec.sigma


def evaluate_field(field, points, segments=None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if field is None:
        return np.zeros(len(points))
    if getattr(field, "uses_segments", False):
        out = field(points, segments)
    else:
        out = field(points)
    return np.broadcast_to(np.asarray(out, dtype=np.float64), (len(points),)).copy()


@dataclass(frozen=True)
class WalkConfig:
    n_walks: int = 256
    epsilon: float = None      # None: 1e-3 x scene diagonal
    r_min: float = None        # None: epsilon
    max_steps: int = 10_000
    seed: int = 0
    stream: int = 0
    control_variate: bool = True

    def __post_init__(self):
        if self.n_walks < 1:
            raise ValueError("n_walks must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.r_min is not None and self.epsilon is not None and not (
                0 < self.r_min <= self.epsilon):
            raise ValueError("r_min must lie in (0, epsilon]")

    def resolved(self, scene):
        eps = self.epsilon if self.epsilon is not None else 1e-3 * scene.diagonal
        rmin = self.r_min if self.r_min is not None else eps
        return replace(self, epsilon=eps, r_min=rmin)


@dataclass(frozen=True)
class PointEstimate:
    mean: object          # float or (2,) array
    count: int
    stderr: object
    truncated: int = 0
    mean_steps: float = 0.0


@dataclass
class WalkStats:
    walks: int = 0
    truncated: int = 0
    steps: int = 0

    def add(self, other):
        self.walks += other.walks
        self.truncated += other.truncated
        self.steps += other.steps

    @property
    def truncated_fraction(self):
        return self.truncated / self.walks if self.walks else 0.0


def _geo_tuple(scene):
    return ((scene.p0, scene.p1, scene.labels, scene.normals) + scene.bvh_arrays()
            + scene.silhouette_arrays())


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True, inline="always")
def _ball_mass(R, sigma):
    if sigma == 0.0:
        return 0.25 * R * R
    return ball_mass_factor(2, R * math.sqrt(sigma)) / sigma


@njit(cache=True)
def _ball_green(r, R, sigma):
    """Positive 2D ball Green's function at distance r from the center."""
    if sigma == 0.0:
        return math.log(R / r) / TWO_PI
    rs = math.sqrt(sigma)
    k0r, _ = bessel_k01(r * rs)
    k0R, _ = bessel_k01(R * rs)
    i0r, _ = bessel_i01(r * rs)
    i0R, _ = bessel_i01(R * rs)
    g = (k0r - k0R * i0r / i0R) / TWO_PI
    return g if g > 0.0 else 0.0


@njit(cache=True)
def _screened_step_weight(r, R, sigma):
    """Ratio of the screened to the Poisson ball kernel for a hit at distance r."""
    if sigma == 0.0:
        return 1.0
    rs = math.sqrt(sigma)
    if r >= R:
        i0R, _ = bessel_i01(R * rs)
        return 1.0 / i0R
    _, k1r = bessel_k01(r * rs)
    k0R, _ = bessel_k01(R * rs)
    _, i1r = bessel_i01(r * rs)
    i0R, _ = bessel_i01(R * rs)
    return r * rs * (k1r + k0R * i1r / i0R)


@njit(cache=True)
def _source_weight(rr, R, sigma):
    """Weight of a source sample drawn from the Poisson ball density."""
    mass0 = 0.25 * R * R
    if sigma == 0.0:
        return mass0
    g0 = math.log(R / rr) / TWO_PI
    if g0 <= 0.0:
        return 0.0
    return mass0 * _ball_green(rr, R, sigma) / g0


@njit(cache=True)
def _neumann_in_ball(x, y, R, p0, p1, labels, bmin, bmax, left, right, start,
                     count, mask, order, seg_out, a_out, b_out):
    """Clip Neumann segments to the disk B(x, R).

    Writes (segment, t_start, t_end) triples and returns how many; capacity
    overflow drops the remaining pieces.
    """
    cap = seg_out.shape[0]
    n = 0
    R2 = R * R
    stack = np.empty(_bvh.STACK_SIZE, dtype=np.int64)
    sp = 0
    if mask[0] & geo.NEUMANN:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if _bvh.box_dist2(x, y, bmin, bmax, k) > R2:
            continue
        if count[k] > 0:
            for i in range(start[k], start[k] + count[k]):
                s = order[i]
                if labels[s] != 1:
                    continue
                ax = p0[s, 0] - x
                ay = p0[s, 1] - y
                ex = p1[s, 0] - p0[s, 0]
                ey = p1[s, 1] - p0[s, 1]
                # |a + t e|^2 = R^2
                qa = ex * ex + ey * ey
                qb = ax * ex + ay * ey
                qc = ax * ax + ay * ay - R2
                disc = qb * qb - qa * qc
                if disc <= 0.0:
                    continue
                sq = math.sqrt(disc)
                t0 = (-qb - sq) / qa
                t1 = (-qb + sq) / qa
                if t0 < 0.0:
                    t0 = 0.0
                if t1 > 1.0:
                    t1 = 1.0
                if t1 > t0 and n < cap:
                    seg_out[n] = s
                    a_out[n] = t0
                    b_out[n] = t1
                    n += 1
        else:
            if mask[left[k]] & geo.NEUMANN:
                stack[sp] = left[k]
                sp += 1
            if mask[right[k]] & geo.NEUMANN:
                stack[sp] = right[k]
                sp += 1
    return n


@njit(cache=True)
def _walk(x, y, onb, nbx, nby, state, g, prm, record, src_pts, src_w, off_src,
          neu_pts, neu_w, neu_seg, off_neu):
    """One walk from (x, y). Returns
    (state, term_x, term_y, term_seg, term_w, steps, truncated, n_src, n_neu).
    """
    (p0, p1, labels, normals, bmin, bmax, left, right, start, count, mask,
     order, sv, sn1, sn2, salways, sbmin, sbmax, sleft, sright, sstart,
     scount, smask, sorder) = g
    eps = prm[0]
    rmin = prm[1]
    max_steps = int(prm[2])
    sigma = prm[3]
    star = prm[4] > 0.0
    want_src = prm[5] > 0.0
    want_neu = prm[6] > 0.0
    tmin = prm[7]
    has_neu = star and (mask[0] & geo.NEUMANN) != 0
    w = 1.0
    steps = 0
    n_src = 0
    n_neu = 0
    clip_s = np.empty(NEUMANN_CLIP_CAP, dtype=np.int64)
    clip_a = np.empty(NEUMANN_CLIP_CAP)
    clip_b = np.empty(NEUMANN_CLIP_CAP)
    while True:
        dD, cx, cy, sD = _bvh.closest_segment(x, y, p0, p1, labels, geo.DIRICHLET,
                                              bmin, bmax, left, right, start,
                                              count, mask, order)
        if dD < eps:
            return state, cx, cy, sD, w, steps, False, n_src, n_neu
        if steps >= max_steps:
            return state, cx, cy, sD, w, steps, True, n_src, n_neu
        R = dD
        if has_neu:
            dS = _bvh.closest_silhouette(x, y, sv, sn1, sn2, salways, sbmin,
                                         sbmax, sleft, sright, sstart, scount,
                                         smask, sorder)
            if dS < R:
                R = dS
            if R < rmin:
                R = rmin
        # on the boundary the star region is a half ball: weights double
        fac = 2.0 if onb else 1.0
        if want_src:
            state, u1 = next_uniform(state)
            state, u2 = next_uniform(state)
            state, u3 = next_uniform(state)
            rr = R * math.sqrt(u1 * u2)
            if rr > 0.0:
                c = math.cos(TWO_PI * u3)
                s = math.sin(TWO_PI * u3)
                visible = True
                if onb and c * nbx + s * nby > 0.0:
                    visible = False
                elif has_neu:
                    _, hs = _bvh.ray_first(x, y, c, s, tmin, rr, p0, p1, labels,
                                           geo.NEUMANN, bmin, bmax, left, right,
                                           start, count, mask, order)
                    visible = hs < 0
                if visible:
                    if record:
                        src_pts[off_src + n_src, 0] = x + rr * c
                        src_pts[off_src + n_src, 1] = y + rr * s
                        src_w[off_src + n_src] = -fac * w * _source_weight(rr, R, sigma)
                    n_src += 1
        if want_neu and has_neu:
            m = _neumann_in_ball(x, y, R, p0, p1, labels, bmin, bmax, left, right,
                                 start, count, mask, order, clip_s, clip_a, clip_b)
            if m > 0:
                total = 0.0
                for j in range(m):
                    sg = clip_s[j]
                    ex = p1[sg, 0] - p0[sg, 0]
                    ey = p1[sg, 1] - p0[sg, 1]
                    total += (clip_b[j] - clip_a[j]) * math.sqrt(ex * ex + ey * ey)
                state, u = next_uniform(state)
                target = u * total
                acc = 0.0
                pick = m - 1
                frac = 1.0
                for j in range(m):
                    sg = clip_s[j]
                    ex = p1[sg, 0] - p0[sg, 0]
                    ey = p1[sg, 1] - p0[sg, 1]
                    ln = (clip_b[j] - clip_a[j]) * math.sqrt(ex * ex + ey * ey)
                    if target < acc + ln or j == m - 1:
                        pick = j
                        frac = (target - acc) / ln if ln > 0.0 else 0.0
                        if frac > 1.0:
                            frac = 1.0
                        break
                    acc += ln
                sg = clip_s[pick]
                tt = clip_a[pick] + frac * (clip_b[pick] - clip_a[pick])
                hx = p0[sg, 0] + tt * (p1[sg, 0] - p0[sg, 0])
                hy = p0[sg, 1] + tt * (p1[sg, 1] - p0[sg, 1])
                rh = math.sqrt((hx - x) ** 2 + (hy - y) ** 2)
                if rh > 0.0:
                    if record:
                        neu_pts[off_neu + n_neu, 0] = hx
                        neu_pts[off_neu + n_neu, 1] = hy
                        neu_seg[off_neu + n_neu] = sg
                        neu_w[off_neu + n_neu] = fac * w * _ball_green(rh, R, sigma) * total
                    n_neu += 1
        state, u = next_uniform(state)
        dx = math.cos(TWO_PI * u)
        dy = math.sin(TWO_PI * u)
        if onb and dx * nbx + dy * nby > 0.0:
            dx = -dx
            dy = -dy
        hs = -1
        th = R
        if has_neu:
            th, hs = _bvh.ray_first(x, y, dx, dy, tmin, R, p0, p1, labels,
                                    geo.NEUMANN, bmin, bmax, left, right, start,
                                    count, mask, order)
        if hs >= 0:
            x += th * dx
            y += th * dy
            onb = True
            nbx = normals[hs, 0]
            nby = normals[hs, 1]
            r = th
        else:
            x += R * dx
            y += R * dy
            onb = False
            r = R
        if sigma > 0.0:
            w *= _screened_step_weight(r, R, sigma)
        steps += 1


@njit(cache=True, parallel=True)
def _solve_kernel(starts, onb, nrm, ids, n_walks, seed, tag, g, prm, record,
                  off_src, off_neu, src_pts, src_w, neu_pts, neu_w, neu_seg):
    n_tasks = starts.shape[0] * n_walks
    term = np.empty((n_tasks, 2))
    term_seg = np.empty(n_tasks, dtype=np.int64)
    term_w = np.empty(n_tasks)
    steps = np.empty(n_tasks, dtype=np.int64)
    trunc = np.empty(n_tasks, dtype=np.bool_)
    n_src = np.empty(n_tasks, dtype=np.int64)
    n_neu = np.empty(n_tasks, dtype=np.int64)
    for i in prange(n_tasks):
        p = i // n_walks
        st = stream_key(seed, tag, ids[p], i - p * n_walks)
        res = _walk(starts[p, 0], starts[p, 1], onb[p], nrm[p, 0], nrm[p, 1], st,
                    g, prm, record, src_pts, src_w, off_src[i], neu_pts, neu_w,
                    neu_seg, off_neu[i])
        term[i, 0] = res[1]
        term[i, 1] = res[2]
        term_seg[i] = res[3]
        term_w[i] = res[4]
        steps[i] = res[5]
        trunc[i] = res[6]
        n_src[i] = res[7]
        n_neu[i] = res[8]
    return term, term_seg, term_w, steps, trunc, n_src, n_neu


@njit(cache=True, parallel=True)
def _gradient_kernel(starts, ids, n_walks, seed, tag, g, prm, record, off_src,
                     off_neu, src_pts, src_w, neu_pts, neu_w, neu_seg):
    """First step of the ball gradient estimator, then an ordinary walk.

    Per task: vector factor F (so F * u(z) estimates the boundary part of the
    gradient), scalar factor a (a * u(z) estimates the boundary part of u),
    one source sample for u and one for the gradient inside the first ball.
    """
    (p0, p1, labels, normals, bmin, bmax, left, right, start, count, mask,
     order) = g[:12]
    rmin = prm[1]
    sigma = prm[3]
    want_src = prm[5] > 0.0
    n_tasks = starts.shape[0] * n_walks
    fac = np.empty((n_tasks, 2))
    fac_u = np.empty(n_tasks)
    y_u = np.zeros((n_tasks, 2))
    w_u = np.zeros(n_tasks)
    y_g = np.zeros((n_tasks, 2))
    w_g = np.zeros((n_tasks, 2))
    term = np.empty((n_tasks, 2))
    term_seg = np.empty(n_tasks, dtype=np.int64)
    term_w = np.empty(n_tasks)
    steps = np.empty(n_tasks, dtype=np.int64)
    trunc = np.empty(n_tasks, dtype=np.bool_)
    n_src = np.empty(n_tasks, dtype=np.int64)
    n_neu = np.empty(n_tasks, dtype=np.int64)
    for i in prange(n_tasks):
        p = i // n_walks
        x = starts[p, 0]
        y = starts[p, 1]
        st = stream_key(seed, tag, ids[p], i - p * n_walks)
        dA, _, _, _ = _bvh.closest_segment(x, y, p0, p1, labels, geo.ALL, bmin,
                                           bmax, left, right, start, count,
                                           mask, order)
        R = dA if dA > rmin else rmin
        st, u = next_uniform(st)
        c = math.cos(TWO_PI * u)
        s = math.sin(TWO_PI * u)
        if sigma == 0.0:
            fac[i, 0] = 2.0 / R * c
            fac[i, 1] = 2.0 / R * s
            fac_u[i] = 1.0
        else:
            rs = math.sqrt(sigma)
            i0R, i1R = bessel_i01(R * rs)
            fac[i, 0] = rs / i1R * c
            fac[i, 1] = rs / i1R * s
            fac_u[i] = 1.0 / i0R
        if want_src:
            # u source term: y ~ Poisson ball density
            st, u1 = next_uniform(st)
            st, u2 = next_uniform(st)
            st, u3 = next_uniform(st)
            rr = R * math.sqrt(u1 * u2)
            cu = math.cos(TWO_PI * u3)
            su = math.sin(TWO_PI * u3)
            y_u[i, 0] = x + rr * cu
            y_u[i, 1] = y + rr * su
            w_u[i] = -_source_weight(rr, R, sigma) if rr > 0.0 else 0.0
            # gradient source term: uniform direction, uniform radius
            st, u4 = next_uniform(st)
            st, u5 = next_uniform(st)
            rg = R * u4
            cg = math.cos(TWO_PI * u5)
            sg = math.sin(TWO_PI * u5)
            y_g[i, 0] = x + rg * cg
            y_g[i, 1] = y + rg * sg
            if rg > 0.0:
                if sigma == 0.0:
                    mag = R * (1.0 - (rg / R) ** 2)
                else:
                    rs = math.sqrt(sigma)
                    _, k1r = bessel_k01(rg * rs)
                    _, k1R = bessel_k01(R * rs)
                    _, i1r = bessel_i01(rg * rs)
                    _, i1R = bessel_i01(R * rs)
                    mag = rs * rg * R * (k1r - k1R * i1r / i1R)
                w_g[i, 0] = -mag * cg
                w_g[i, 1] = -mag * sg
        res = _walk(x + R * c, y + R * s, False, 0.0, 0.0, st, g, prm, record,
                    src_pts, src_w, off_src[i], neu_pts, neu_w, neu_seg, off_neu[i])
        term[i, 0] = res[1]
        term[i, 1] = res[2]
        term_seg[i] = res[3]
        term_w[i] = res[4]
        steps[i] = res[5] + 1
        trunc[i] = res[6]
        n_src[i] = res[7]
        n_neu[i] = res[8]
    return (fac, fac_u, y_u, w_u, y_g, w_g, term, term_seg, term_w, steps, trunc,
            n_src, n_neu)


# ---------------------------------------------------------------------------
# drivers

def _params(scene, problem, cfg, star):
    return np.array([cfg.epsilon, cfg.r_min, float(cfg.max_steps), problem.sigma,
                     1.0 if star else 0.0,
                     1.0 if problem.source is not None else 0.0,
                     1.0 if problem.neumann is not None else 0.0,
                     geo.RAY_TMIN_REL * scene.diagonal])


def _run_two_phase(kernel, args_before, args_after_record, n_tasks, need_events):
    """Run ``kernel`` once (no events) or twice (count, then record)."""
    empty2 = np.empty((0, 2))
    empty1 = np.empty(0)
    emptyi = np.empty(0, dtype=np.int64)
    zeros = np.zeros(n_tasks, dtype=np.int64)
    out = kernel(*args_before, False, zeros, zeros, empty2, empty1, empty2,
                 empty1, emptyi)
    if not need_events:
        return out, (empty2, empty1, zeros), (empty2, empty1, emptyi, zeros)
    n_src, n_neu = out[-2], out[-1]
    off_src = np.concatenate([[0], np.cumsum(n_src)[:-1]]).astype(np.int64)
    off_neu = np.concatenate([[0], np.cumsum(n_neu)[:-1]]).astype(np.int64)
    src_pts = np.zeros((int(n_src.sum()), 2))
    src_w = np.zeros(int(n_src.sum()))
    neu_pts = np.zeros((int(n_neu.sum()), 2))
    neu_w = np.zeros(int(n_neu.sum()))
    neu_seg = np.zeros(int(n_neu.sum()), dtype=np.int64)
    out = kernel(*args_before, True, off_src, off_neu, src_pts, src_w, neu_pts,
                 neu_w, neu_seg)
    return out, (src_pts, src_w, n_src), (neu_pts, neu_w, neu_seg, n_neu)


def _per_task_events(values, weights, counts):
    """Sum weight * value per task, in a fixed order."""
    n = len(counts)
    if len(values) == 0:
        return np.zeros(n)
    task = np.repeat(np.arange(n), counts)
    return np.bincount(task, weights=weights * values, minlength=n)


def _walk_values(scene, problem, term, term_seg, term_w, src, neu):
    g = evaluate_field(problem.dirichlet, term, term_seg)
    val = term_w * g
    src_pts, src_w, n_src = src
    if len(src_pts):
        val += _per_task_events(evaluate_field(problem.source, src_pts), src_w, n_src)
    neu_pts, neu_w, neu_seg, n_neu = neu
    if len(neu_pts):
        val += _per_task_events(evaluate_field(problem.neumann, neu_pts, neu_seg),
                                neu_w, n_neu)
    return val


def _check_scene(scene, star):
    if not scene.has(geo.Label.DIRICHLET):
        raise ValueError("walks need a Dirichlet boundary to terminate")
    if not star and scene.has(geo.Label.NEUMANN):
        raise ValueError("walk on spheres needs a purely Dirichlet scene")


def _point_ids(n, ids):
    if ids is None:
        return np.arange(n, dtype=np.int64)
    return np.ascontiguousarray(ids, dtype=np.int64)


MAX_TASKS = 1 << 21


def walk_samples(scene, problem, points, cfg, star=True, normals=None, ids=None):
    """Per-walk solution samples, shape (n_points, n_walks), plus WalkStats.

    ``normals`` (outward, per point) marks starts lying on the Neumann boundary;
    rows of zeros mean interior starts.
    """
    _check_scene(scene, star)
    cfg = cfg.resolved(scene)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    ids = _point_ids(len(pts), ids)
    if normals is None:
        nrm = np.zeros_like(pts)
    else:
        nrm = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 2)
    onb = np.any(nrm != 0.0, axis=1)
    prm = _params(scene, problem, cfg, star)
    need = problem.source is not None or (star and problem.neumann is not None)
    g = _geo_tuple(scene)
    out = np.empty((len(pts), cfg.n_walks))
    stats = WalkStats()
    chunk = max(1, MAX_TASKS // cfg.n_walks)
    for a in range(0, len(pts), chunk):
        b = min(a + chunk, len(pts))
        args = (pts[a:b], onb[a:b], nrm[a:b], ids[a:b], cfg.n_walks, cfg.seed,
                TAG_SOLVE * 1_000_003 + cfg.stream, g, prm)
        res, src, neu = _run_two_phase(_solve_kernel, args, None,
                                       (b - a) * cfg.n_walks, need)
        term, term_seg, term_w, steps, trunc = res[:5]
        vals = _walk_values(scene, problem, term, term_seg, term_w, src, neu)
        out[a:b] = vals.reshape(b - a, cfg.n_walks)
        stats.add(WalkStats(walks=len(vals), truncated=int(trunc.sum()),
                            steps=int(steps.sum())))
    return out, stats


def gradient_samples(scene, problem, points, cfg, ids=None):
    """Per-walk samples of (u, ∇u) from the ball gradient estimator.

    Returns (u_samples (P, W), grad_samples (P, W, 2), WalkStats). With
    ``cfg.control_variate`` each gradient sample subtracts the leave-one-out
    mean of the other walks' u(z) estimates, which keeps it unbiased.
    """
    _check_scene(scene, True)
    cfg = cfg.resolved(scene)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    ids = _point_ids(len(pts), ids)
    prm = _params(scene, problem, cfg, True)
    need = problem.source is not None or problem.neumann is not None
    g = _geo_tuple(scene)
    W = cfg.n_walks
    u_out = np.empty((len(pts), W))
    g_out = np.empty((len(pts), W, 2))
    stats = WalkStats()
    chunk = max(1, MAX_TASKS // W)
    for a in range(0, len(pts), chunk):
        b = min(a + chunk, len(pts))
        args = (pts[a:b], ids[a:b], W, cfg.seed, TAG_GRADIENT * 1_000_003 + cfg.stream,
                g, prm)
        res, src, neu = _run_two_phase(_gradient_kernel, args, None, (b - a) * W, need)
        (fac, fac_u, y_u, w_u, y_g, w_g, term, term_seg, term_w, steps, trunc,
         *_) = res
        uz = _walk_values(scene, problem, term, term_seg, term_w, src, neu)
        u = fac_u * uz
        grad_src = np.zeros_like(fac)
        if problem.source is not None:
            u += w_u * evaluate_field(problem.source, y_u)
            grad_src = w_g * evaluate_field(problem.source, y_g)[:, None]
        uz = uz.reshape(b - a, W)
        if cfg.control_variate and W > 1:
            cv = (uz.sum(axis=1, keepdims=True) - uz) / (W - 1)
        else:
            cv = np.zeros_like(uz)
        grad = fac.reshape(b - a, W, 2) * (uz - cv)[..., None] + grad_src.reshape(b - a, W, 2)
        u_out[a:b] = u.reshape(b - a, W)
        g_out[a:b] = grad
        stats.add(WalkStats(walks=len(term_w), truncated=int(trunc.sum()),
                            steps=int(steps.sum())))
    return u_out, g_out, stats


def _estimate(samples, stats, n_points):
    W = samples.shape[1]
    mean = samples.mean(axis=1)
    se = samples.std(axis=1, ddof=1) / math.sqrt(W) if W > 1 else np.zeros_like(mean)
    return mean, se


def solve_points(scene, problem, points, cfg, star=True, normals=None, ids=None):
    """Batched pointwise solve: (means, standard errors, WalkStats)."""
    samples, stats = walk_samples(scene, problem, points, cfg, star, normals, ids)
    mean, se = _estimate(samples, stats, len(samples))
    return mean, se, stats


def gradient_points(scene, problem, points, cfg, ids=None):
    """Batched gradient solve: (u mean, u se, grad mean, grad se, WalkStats)."""
    u, gr, stats = gradient_samples(scene, problem, points, cfg, ids)
    W = u.shape[1]
    um = u.mean(axis=1)
    gm = gr.mean(axis=1)
    if W > 1:
        use = u.std(axis=1, ddof=1) / math.sqrt(W)
        gse = gr.std(axis=1, ddof=1) / math.sqrt(W)
    else:
        use = np.zeros_like(um)
        gse = np.zeros_like(gm)
    return um, use, gm, gse, stats


def _single(mean, se, stats, cfg):
    m = mean[0]
    return PointEstimate(mean=m if np.ndim(m) else float(m), count=cfg.n_walks,
                         stderr=se[0] if np.ndim(se[0]) else float(se[0]),
                         truncated=stats.truncated,
                         mean_steps=stats.steps / max(stats.walks, 1))


def wos_solve(scene, problem, x, cfg):
    mean, se, stats = solve_points(scene, problem, np.asarray(x)[None], cfg, star=False)
    return _single(mean, se, stats, cfg)


def wost_solve(scene, problem, x, cfg, normal=None):
    nrm = None if normal is None else np.asarray(normal, dtype=np.float64)[None]
    mean, se, stats = solve_points(scene, problem, np.asarray(x)[None], cfg,
                                   star=True, normals=nrm)
    return _single(mean, se, stats, cfg)


def wost_gradient(scene, problem, x, cfg):
    _, _, gm, gse, stats = gradient_points(scene, problem, np.asarray(x)[None], cfg)
    return _single(gm, gse, stats, cfg)


def normal_derivative(scene, problem, x, normal, cfg):
    _, g, _ = gradient_samples(scene, problem, np.asarray(x)[None], cfg)
    d = g[0] @ np.asarray(normal, dtype=np.float64)
    se = d.std(ddof=1) / math.sqrt(len(d)) if len(d) > 1 else 0.0
    return PointEstimate(mean=float(d.mean()), count=len(d), stderr=float(se))
