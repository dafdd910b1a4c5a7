"""2D boundary representation, spatial queries and boundary/region sampling."""
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import bvh as _bvh

RAY_TMIN_REL = 1e-9
DEGENERATE_REL = 1e-12


class Label(IntEnum):
    DIRICHLET = 0
    NEUMANN = 1


# label filters, as bitmasks over 1 << Label
ALL = 3
DIRICHLET = 1 << Label.DIRICHLET
NEUMANN = 1 << Label.NEUMANN
_FILTERS = {"all": ALL, "dirichlet": DIRICHLET, "neumann": NEUMANN,
            "D": DIRICHLET, "N": NEUMANN, None: ALL}


def label_mask(filter):
    if isinstance(filter, (int, np.integer)):
        return int(filter)
    try:
        return _FILTERS[filter]
    except KeyError:
        raise ValueError(f"unknown label filter {filter!r}") from None


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Silhouettes:
    """Candidate silhouette vertices of the Neumann boundary."""
    points: np.ndarray   # (V, 2)
    n1: np.ndarray       # (V, 2) normals of the two incident Neumann segments
    n2: np.ndarray
    always: np.ndarray   # (V,) bool, open-chain endpoints
    bvh: _bvh.FlatBVH


@dataclass(frozen=True, eq=False)
class Scene:
    """Labeled segment mesh with a BVH. Immutable after construction."""
    vertices: np.ndarray
    segments: np.ndarray
    labels: np.ndarray
    normals: np.ndarray
    diagonal: float
    bvh: _bvh.FlatBVH
    silhouettes: Silhouettes
    p0: np.ndarray = field(repr=False)
    p1: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    @property
    def n_segments(self):
        return len(self.segments)

    @property
    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def total_length(self):
        return float(self.lengths.sum())

    def has(self, label):
        return bool(np.any(self.labels == int(label)))

    @property
    def is_closed(self):
        deg = np.bincount(self.segments.ravel(), minlength=len(self.vertices))
        used = deg > 0
        return bool(np.all(deg[used] == 2))

    def loops(self):
        """Segment ids of each closed loop, in traversal order."""
        nxt = {}
        for s, (i, _) in enumerate(self.segments):
            if i in nxt:
                raise GeometryError(f"vertex {i} starts more than one segment")
            nxt[int(i)] = s
        seen = np.zeros(len(self.segments), dtype=bool)
        loops = []
        for s0 in range(len(self.segments)):
            if seen[s0]:
                continue
            loop, s = [], s0
            while not seen[s]:
                seen[s] = True
                loop.append(s)
                j = int(self.segments[s, 1])
                if j not in nxt:
                    raise GeometryError(f"boundary is open at vertex {j}")
                s = nxt[j]
            if s != s0:
                raise GeometryError(f"segment {s0} does not close into a loop")
            loops.append(np.array(loop, dtype=np.int64))
        return loops

    def bvh_arrays(self):
        return self.bvh.arrays()

    def silhouette_arrays(self):
        sil = self.silhouettes
        return (sil.points, sil.n1, sil.n2, sil.always) + sil.bvh.arrays()

    def with_labels(self, labels):
        return build_scene(self.vertices, self.segments, labels)


def _silhouettes(vertices, segments, labels, normals):
    incident = {}
    for s in np.flatnonzero(labels == Label.NEUMANN):
        for v in segments[s]:
            incident.setdefault(int(v), []).append(int(s))
    pts, n1, n2, always = [], [], [], []
    for v, segs in sorted(incident.items()):
        pts.append(vertices[v])
        if len(segs) == 2:
            n1.append(normals[segs[0]])
            n2.append(normals[segs[1]])
            always.append(False)
        else:
            # open chain endpoint (or non-manifold vertex): always a silhouette
            n1.append(normals[segs[0]])
            n2.append(normals[segs[0]])
            always.append(True)
    pts = np.array(pts, dtype=np.float64).reshape(-1, 2)
    tree = _bvh.build_bvh(pts, pts, np.zeros(len(pts), dtype=np.int64))
    return Silhouettes(pts, np.array(n1, dtype=np.float64).reshape(-1, 2),
                       np.array(n2, dtype=np.float64).reshape(-1, 2),
                       np.array(always, dtype=np.bool_), tree)


def build_scene(vertices, segments, labels):
    vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 2)
    segments = np.ascontiguousarray(segments, dtype=np.int64).reshape(-1, 2)
    labels = np.asarray([_parse_label(l) for l in labels], dtype=np.int64)
    if len(labels) != len(segments):
        raise GeometryError(
            f"{len(labels)} labels for {len(segments)} segments")
    if len(segments) == 0:
        raise GeometryError("scene has no segments")
    bad = np.flatnonzero((segments < 0) | (segments >= len(vertices)))
    if len(bad):
        raise GeometryError(f"segment {bad[0] // 2} has an out-of-range vertex index")
    used = np.unique(segments)
    lo, hi = vertices[used].min(axis=0), vertices[used].max(axis=0)
    diagonal = float(np.hypot(*(hi - lo)))
    p0 = vertices[segments[:, 0]]
    p1 = vertices[segments[:, 1]]
    e = p1 - p0
    lengths = np.hypot(e[:, 0], e[:, 1])
    degenerate = np.flatnonzero(lengths < DEGENERATE_REL * max(diagonal, 1e-300))
    if len(degenerate):
        raise GeometryError(f"degenerate segment {int(degenerate[0])}")
    normals = np.column_stack([e[:, 1], -e[:, 0]]) / lengths[:, None]
    tree = _bvh.build_bvh(np.minimum(p0, p1), np.maximum(p0, p1), labels)
    return Scene(vertices=vertices, segments=segments, labels=labels,
                 normals=normals, diagonal=diagonal, bvh=tree,
                 silhouettes=_silhouettes(vertices, segments, labels, normals),
                 p0=np.ascontiguousarray(p0), p1=np.ascontiguousarray(p1),
                 lengths=lengths)


def _parse_label(label):
    if isinstance(label, str):
        key = label.strip().upper()
        if key in ("D", "DIRICHLET"):
            return Label.DIRICHLET
        if key in ("N", "NEUMANN"):
            return Label.NEUMANN
        raise GeometryError(f"unknown boundary label {label!r}")
    return Label(int(label))


def polygon_scene(points, labels="D"):
    """Closed loop through ``points`` (CCW for an outward-facing boundary)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    segs = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    if isinstance(labels, str):
        labels = [labels] * n
    return build_scene(points, segs, labels)


def merge_scenes(*scenes):
    verts, segs, labels, off = [], [], [], 0
    for sc in scenes:
        verts.append(sc.vertices)
        segs.append(sc.segments + off)
        labels.append(sc.labels)
        off += len(sc.vertices)
    return build_scene(np.vstack(verts), np.vstack(segs), np.concatenate(labels))


def circle_points(n, radius=1.0, center=(0.0, 0.0)):
    t = 2.0 * np.pi * np.arange(n) / n
    return np.column_stack([center[0] + radius * np.cos(t),
                            center[1] + radius * np.sin(t)])


# ---------------------------------------------------------------------------
# scene files

def read_scene(path):
    verts, segs, labels = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                verts.append((float(tok[1]), float(tok[2])))
            elif tok[0] == "s":
                segs.append((int(tok[1]), int(tok[2])))
                labels.append(tok[3] if len(tok) > 3 else "D")
            else:
                raise GeometryError(f"unknown record {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from None
    return build_scene(verts, segs, labels)


def write_scene(scene, path):
    lines = [f"v {float(x)!r} {float(y)!r}" for x, y in scene.vertices]
    tags = {Label.DIRICHLET: "D", Label.NEUMANN: "N"}
    lines += [f"s {i} {j} {tags[Label(l)]}"
              for (i, j), l in zip(scene.segments, scene.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# queries

@njit(cache=True, parallel=True)
def _closest_batch(pts, p0, p1, labels, qmask, bmin, bmax, left, right, start,
                   count, mask, order):
    n = pts.shape[0]
    dist = np.empty(n)
    cp = np.empty((n, 2))
    seg = np.empty(n, dtype=np.int64)
    for i in prange(n):
        d, cx, cy, s = _bvh.closest_segment(pts[i, 0], pts[i, 1], p0, p1, labels,
                                            qmask, bmin, bmax, left, right, start,
                                            count, mask, order)
        dist[i] = d
        cp[i, 0] = cx
        cp[i, 1] = cy
        seg[i] = s
    return dist, cp, seg


@njit(cache=True, parallel=True)
def _silhouette_batch(pts, sv, sn1, sn2, salways, bmin, bmax, left, right,
                      start, count, mask, order):
    n = pts.shape[0]
    out = np.empty(n)
    for i in prange(n):
        out[i] = _bvh.closest_silhouette(pts[i, 0], pts[i, 1], sv, sn1, sn2,
                                         salways, bmin, bmax, left, right,
                                         start, count, mask, order)
    return out


def closest_points(scene, points, filter="all"):
    """Vectorized closest point: (distance, point, normal, segment id) arrays."""
    qmask = label_mask(filter)
    if not np.any((1 << scene.labels) & qmask):
        raise GeometryError("no boundary of requested label")
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    dist, cp, seg = _closest_batch(pts, scene.p0, scene.p1, scene.labels, qmask,
                                   *scene.bvh_arrays())
    return dist, cp, scene.normals[seg], seg


def closest_point(scene, x, filter="all"):
    dist, cp, nrm, seg = closest_points(scene, np.asarray(x)[None, :], filter)
    return cp[0], float(dist[0]), nrm[0], int(seg[0])


def closest_silhouette_distances(scene, points):
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    return _silhouette_batch(pts, *scene.silhouette_arrays())


def closest_silhouette_distance(scene, x):
    return float(closest_silhouette_distances(scene, np.asarray(x)[None, :])[0])


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    t: float
    segment: int
    normal: np.ndarray
    sign: int


def intersect_ray(scene, origin, direction, max_t=np.inf, filter="all", capacity=256):
    """All hits along the ray with t in (1e-9 * diagonal, max_t], nearest first."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.hypot(*d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    out_t = np.empty(capacity)
    out_s = np.empty(capacity, dtype=np.int64)
    tmin = RAY_TMIN_REL * scene.diagonal
    n = _bvh.ray_all(o[0], o[1], d[0], d[1], tmin, float(max_t), scene.p0, scene.p1,
                     scene.labels, label_mask(filter), *scene.bvh_arrays(), out_t, out_s)
    if n > capacity:
        return intersect_ray(scene, origin, direction, max_t, filter, capacity=2 * n)
    idx = np.lexsort((out_s[:n], out_t[:n]))
    hits = []
    for k in idx:
        t, s = float(out_t[k]), int(out_s[k])
        nrm = scene.normals[s]
        hits.append(RayHit(point=o + t * d, t=t, segment=s, normal=nrm,
                           sign=1 if float(nrm @ d) > 0 else -1))
    return hits


# ---------------------------------------------------------------------------
# regions

@dataclass(frozen=True, eq=False)
class Region:
    """Closed region bounded by ``boundary`` (labels ignored)."""
    boundary: Scene

    def __post_init__(self):
        if not self.boundary.is_closed:
            raise GeometryError("region boundary must be closed")
        if self.area <= 0 or self.perimeter <= 0:
            raise GeometryError("region must have positive area")

    @property
    def area(self):
        p0, p1 = self.boundary.p0, self.boundary.p1
        return float(0.5 * np.sum(p0[:, 0] * p1[:, 1] - p1[:, 0] * p0[:, 1]))

    @property
    def perimeter(self):
        return self.boundary.total_length

    @property
    def diagonal(self):
        return self.boundary.diagonal

    def contains(self, points):
        return inside(self, points)


def inside(region, points):
    """Crossing parity along +x; points on the boundary count as inside."""
    scene = region.boundary if isinstance(region, Region) else region
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    x, y = pts[:, 0:1], pts[:, 1:2]
    a, b = scene.p0[None, :, :], scene.p1[None, :, :]
    straddle = (a[..., 1] > y) != (b[..., 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = a[..., 0] + (y - a[..., 1]) * (b[..., 0] - a[..., 0]) / (b[..., 1] - a[..., 1])
    parity = np.count_nonzero(straddle & (xc > x), axis=1) % 2 == 1
    dist, *_ = closest_points(scene, pts)
    res = parity | (dist <= RAY_TMIN_REL * scene.diagonal)
    return bool(res[0]) if single else res


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class BoundaryPoints:
    """Struct-of-arrays set of boundary samples."""
    points: np.ndarray    # (n, 2)
    normals: np.ndarray   # (n, 2)
    pdf: np.ndarray       # (n,)
    segment: np.ndarray   # (n,)
    arc: np.ndarray       # (n,) arc-length coordinate along the sample's loop
    loop: np.ndarray      # (n,) loop index, -1 for open boundaries

    def __len__(self):
        return len(self.points)

    def take(self, idx):
        return BoundaryPoints(*(getattr(self, f)[idx] for f in
                                ("points", "normals", "pdf", "segment", "arc", "loop")))


def _loop_layout(scene):
    """Per-segment loop id and arc offset within the loop, plus loop lengths."""
    loop_id = np.full(scene.n_segments, -1, dtype=np.int64)
    offset = np.zeros(scene.n_segments)
    lengths = []
    try:
        loops = scene.loops()
    except GeometryError:
        loops = []
    for k, segs in enumerate(loops):
        loop_id[segs] = k
        offset[segs] = np.concatenate([[0.0], np.cumsum(scene.lengths[segs])[:-1]])
        lengths.append(float(scene.lengths[segs].sum()))
    return loop_id, offset, np.array(lengths)


def sample_boundary(scene, count, rng, stratified=False, segments=None):
    """Uniform-by-length samples via a CDF table over segment lengths."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ids = np.arange(scene.n_segments) if segments is None else np.asarray(segments)
    lens = scene.lengths[ids]
    total = float(lens.sum())
    cdf = np.cumsum(lens) / total
    cdf[-1] = 1.0
    if stratified:
        u = (np.arange(count) + rng.random(count)) / count
    else:
        u = rng.random(count)
    k = np.minimum(np.searchsorted(cdf, u, side="right"), len(ids) - 1)
    lo = np.concatenate([[0.0], cdf[:-1]])[k]
    t = np.clip((u - lo) / (cdf[k] - lo), 0.0, 1.0)
    seg = ids[k]
    pts = scene.p0[seg] + t[:, None] * (scene.p1[seg] - scene.p0[seg])
    loop_id, offset, _ = _loop_layout(scene)
    arc = offset[seg] + t * scene.lengths[seg]
    return BoundaryPoints(points=pts, normals=scene.normals[seg].copy(),
                          pdf=np.full(count, 1.0 / total), segment=seg,
                          arc=arc, loop=loop_id[seg])


def sample_region_interior(region, count, rng, stratified=False, batch=None):
    """Uniform samples in the region by rejection from its bounding box.

    Returns (points, pdf). With ``stratified``, proposals come from a jittered
    grid over the bounding box; accepted points are shuffled before truncation
    and any shortfall is topped up with independent proposals.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = region.boundary.bounds
    ext = hi - lo
    area = region.area
    box = float(ext[0] * ext[1])
    out = []
    have = 0
    proposals = 0
    if stratified:
        n_cells = int(np.ceil(count * box / area))
        nx = max(1, int(round(np.sqrt(n_cells * ext[0] / ext[1]))))
        ny = max(1, int(np.ceil(n_cells / nx)))
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        cells = np.column_stack([ix.ravel(), iy.ravel()])
        p = lo + (cells + rng.random(cells.shape)) / [nx, ny] * ext
        proposals += len(p)
        p = p[inside(region, p)]
        p = p[rng.permutation(len(p))]
        out.append(p[:count])
        have = len(out[-1])
    while have < count:
        m = batch or max(64, int(1.2 * (count - have) * box / area) + 16)
        p = lo + rng.random((m, 2)) * ext
        proposals += m
        p = p[inside(region, p)]
        out.append(p[: count - have])
        have += len(out[-1])
        if proposals >= 1_000_000 and have < 1e-4 * proposals:
            raise GeometryError("degenerate region")
    pts = np.vstack(out)
    return pts, np.full(count, 1.0 / area)


def voronoi_weights(arc, loop_length):
    """1D Voronoi cell lengths of samples on one closed loop.

    ``arc`` holds arc-length coordinates in [0, loop_length); the result is in
    the input order.
    """
    arc = np.asarray(arc, dtype=np.float64)
    n = len(arc)
    if n == 0:
        return arc.copy()
    if n == 1:
        return np.array([float(loop_length)])
    order = np.argsort(arc, kind="stable")
    s = arc[order]
    gap_next = np.diff(np.append(s, s[0] + loop_length))
    gap_prev = np.roll(gap_next, 1)
    w = np.empty(n)
    w[order] = 0.5 * (gap_prev + gap_next)
    return w


def voronoi_weights_for(scene, samples):
    """Per-loop Voronoi weights for samples drawn on ``scene``."""
    _, _, lengths = _loop_layout(scene)
    w = np.empty(len(samples))
    for k in np.unique(samples.loop):
        sel = samples.loop == k
        if k < 0:
            raise GeometryError("Voronoi weights need closed loops")
        w[sel] = voronoi_weights(samples.arc[sel], lengths[k])
    return w
