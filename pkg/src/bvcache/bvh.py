"""Axis-aligned bounding box hierarchy over 2D segments and points.

The tree is stored as flat arrays so the numba traversal kernels below can be
called from inside random walks. Each node carries a bitmask of the labels of
the primitives below it; queries pass a label mask and skip subtrees that
cannot contain a matching primitive.
"""
from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF_SIZE = 4
STACK_SIZE = 64


@dataclass(frozen=True)
class FlatBVH:
    bmin: np.ndarray    # (K, 2)
    bmax: np.ndarray    # (K, 2)
    left: np.ndarray    # (K,) child index, -1 for leaves
    right: np.ndarray   # (K,)
    start: np.ndarray   # (K,) offset into ``order``
    count: np.ndarray   # (K,) primitives in leaf, 0 for inner nodes
    mask: np.ndarray    # (K,) OR of 1 << label over the subtree
    order: np.ndarray   # (P,) primitive ids in leaf order

    def arrays(self):
        return (self.bmin, self.bmax, self.left, self.right, self.start,
                self.count, self.mask, self.order)


def build_bvh(lo, hi, labels):
    """Median-split hierarchy over primitives with boxes ``lo``/``hi`` (P, 2)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(lo)
    centers = 0.5 * (lo + hi)
    bmin, bmax, left, right, start, count, mask = [], [], [], [], [], [], []
    order = np.arange(n, dtype=np.int64)

    def new_node(ids, first):
        k = len(bmin)
        if len(ids):
            bmin.append(lo[ids].min(axis=0))
            bmax.append(hi[ids].max(axis=0))
            mask.append(int(np.bitwise_or.reduce(1 << labels[ids])))
        else:
            bmin.append(np.array([np.inf, np.inf]))
            bmax.append(np.array([-np.inf, -np.inf]))
            mask.append(0)
        left.append(-1)
        right.append(-1)
        start.append(first)
        count.append(len(ids))
        return k

    # iterative build, stack of (node, first, last)
    root = new_node(order, 0)
    stack = [(root, 0, n)]
    while stack:
        node, first, last = stack.pop()
        ids = order[first:last]
        if last - first <= LEAF_SIZE:
            continue
        c = centers[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        ids = ids[np.argsort(c[:, axis], kind="stable")]
        order[first:last] = ids
        mid = first + (last - first) // 2
        a = new_node(order[first:mid], first)
        b = new_node(order[mid:last], mid)
        left[node], right[node], count[node] = a, b, 0
        stack.append((a, first, mid))
        stack.append((b, mid, last))

    return FlatBVH(
        bmin=np.array(bmin, dtype=np.float64).reshape(-1, 2),
        bmax=np.array(bmax, dtype=np.float64).reshape(-1, 2),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        mask=np.array(mask, dtype=np.int64),
        order=order,
    )


@njit(cache=True, inline="always")
def box_dist2(x, y, bmin, bmax, k):
    dx = max(bmin[k, 0] - x, 0.0, x - bmax[k, 0])
    dy = max(bmin[k, 1] - y, 0.0, y - bmax[k, 1])
    return dx * dx + dy * dy


@njit(cache=True, inline="always")
def point_segment(x, y, ax, ay, bx, by):
    """Closest point on segment ab to (x, y): (dist2, cx, cy)."""
    ex = bx - ax
    ey = by - ay
    ee = ex * ex + ey * ey
    s = ((x - ax) * ex + (y - ay) * ey) / ee
    if s < 0.0:
        s = 0.0
    elif s > 1.0:
        s = 1.0
    cx = ax + s * ex
    cy = ay + s * ey
    return (x - cx) * (x - cx) + (y - cy) * (y - cy), cx, cy


@njit(cache=True)
def closest_segment(x, y, p0, p1, labels, qmask,
                    bmin, bmax, left, right, start, count, mask, order):
    """Nearest segment whose label bit is in ``qmask``.

    Returns (distance, cx, cy, segment id); id -1 when nothing matches.
    Ties go to the lowest segment id.
    """
    best = np.inf
    bx = 0.0
    by = 0.0
    bseg = -1
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    if mask[0] & qmask:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if box_dist2(x, y, bmin, bmax, k) > best:
            continue
        if count[k] > 0:
            for i in range(start[k], start[k] + count[k]):
                s = order[i]
                if not ((1 << labels[s]) & qmask):
                    continue
                d2, cx, cy = point_segment(x, y, p0[s, 0], p0[s, 1], p1[s, 0], p1[s, 1])
                if d2 < best or (d2 == best and s < bseg):
                    best = d2
                    bx = cx
                    by = cy
                    bseg = s
        else:
            a = left[k]
            b = right[k]
            da = box_dist2(x, y, bmin, bmax, a) if mask[a] & qmask else np.inf
            db = box_dist2(x, y, bmin, bmax, b) if mask[b] & qmask else np.inf
            # push the farther child first so the nearer one is popped next
            if da <= db:
                if db <= best:
                    stack[sp] = b
                    sp += 1
                if da <= best:
                    stack[sp] = a
                    sp += 1
            else:
                if da <= best:
                    stack[sp] = a
                    sp += 1
                if db <= best:
                    stack[sp] = b
                    sp += 1
    return np.sqrt(best), bx, by, bseg


@njit(cache=True, inline="always")
def ray_box(ox, oy, idx, idy, tmax, bmin, bmax, k):
    t0 = 0.0
    t1 = tmax
    for a in range(2):
        o = ox if a == 0 else oy
        inv = idx if a == 0 else idy
        ta = (bmin[k, a] - o) * inv
        tb = (bmax[k, a] - o) * inv
        if ta != ta or tb != tb:
            # 0 * inf: ray parallel to and on the slab plane
            if o < bmin[k, a] or o > bmax[k, a]:
                return False
            continue
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit(cache=True, inline="always")
def ray_segment(ox, oy, dx, dy, ax, ay, bx, by):
    """Ray parameter t of the crossing with segment ab, or -1.0."""
    ex = bx - ax
    ey = by - ay
    den = dx * ey - dy * ex
    if den == 0.0:
        return -1.0
    wx = ax - ox
    wy = ay - oy
    t = (wx * ey - wy * ex) / den
    s = (wx * dy - wy * dx) / den
    if s < 0.0 or s > 1.0:
        return -1.0
    return t


@njit(cache=True)
def ray_first(ox, oy, dx, dy, tmin, tmax, p0, p1, labels, qmask,
              bmin, bmax, left, right, start, count, mask, order):
    """First hit with t in (tmin, tmax]: (t, segment id) or (inf, -1)."""
    idx = 1.0 / dx if dx != 0.0 else np.inf
    idy = 1.0 / dy if dy != 0.0 else np.inf
    best = np.inf
    bseg = -1
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    if mask[0] & qmask:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        lim = best if best < tmax else tmax
        if not ray_box(ox, oy, idx, idy, lim, bmin, bmax, k):
            continue
        if count[k] > 0:
            for i in range(start[k], start[k] + count[k]):
                s = order[i]
                if not ((1 << labels[s]) & qmask):
                    continue
                t = ray_segment(ox, oy, dx, dy, p0[s, 0], p0[s, 1], p1[s, 0], p1[s, 1])
                if t > tmin and t <= tmax and (t < best or (t == best and s < bseg)):
                    best = t
                    bseg = s
        else:
            if mask[left[k]] & qmask:
                stack[sp] = left[k]
                sp += 1
            if mask[right[k]] & qmask:
                stack[sp] = right[k]
                sp += 1
    return best, bseg


@njit(cache=True)
def ray_all(ox, oy, dx, dy, tmin, tmax, p0, p1, labels, qmask,
            bmin, bmax, left, right, start, count, mask, order, out_t, out_s):
    """All hits with t in (tmin, tmax], unsorted; returns the number written.

    Hits beyond the capacity of ``out_t`` are counted but not stored.
    """
    idx = 1.0 / dx if dx != 0.0 else np.inf
    idy = 1.0 / dy if dy != 0.0 else np.inf
    n = 0
    cap = out_t.shape[0]
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    sp = 0
    if mask[0] & qmask:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if not ray_box(ox, oy, idx, idy, tmax, bmin, bmax, k):
            continue
        if count[k] > 0:
            for i in range(start[k], start[k] + count[k]):
                s = order[i]
                if not ((1 << labels[s]) & qmask):
                    continue
                t = ray_segment(ox, oy, dx, dy, p0[s, 0], p0[s, 1], p1[s, 0], p1[s, 1])
                if t > tmin and t <= tmax:
                    if n < cap:
                        out_t[n] = t
                        out_s[n] = s
                    n += 1
        else:
            if mask[left[k]] & qmask:
                stack[sp] = left[k]
                sp += 1
            if mask[right[k]] & qmask:
                stack[sp] = right[k]
                sp += 1
    return n


@njit(cache=True)
def closest_silhouette(x, y, sv, sn1, sn2, salways,
                       bmin, bmax, left, right, start, count, mask, order):
    """Distance to the nearest silhouette vertex as seen from (x, y).

    A candidate vertex v joining Neumann segments with normals n1, n2 is a
    silhouette iff n1.(v - x) and n2.(v - x) have strictly opposite signs;
    open-chain endpoints (``salways``) always qualify.
    """
    best = np.inf
    if sv.shape[0] == 0:
        return best
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        k = stack[sp]
        if box_dist2(x, y, bmin, bmax, k) >= best:
            continue
        if count[k] > 0:
            for i in range(start[k], start[k] + count[k]):
                v = order[i]
                vx = sv[v, 0] - x
                vy = sv[v, 1] - y
                d2 = vx * vx + vy * vy
                if d2 >= best:
                    continue
                if not salways[v]:
                    a = sn1[v, 0] * vx + sn1[v, 1] * vy
                    b = sn2[v, 0] * vx + sn2[v, 1] * vy
                    if not (a * b < 0.0):
                        continue
                best = d2
        else:
            a = left[k]
            b = right[k]
            da = box_dist2(x, y, bmin, bmax, a)
            db = box_dist2(x, y, bmin, bmax, b)
            if da <= db:
                stack[sp] = b
                stack[sp + 1] = a
            else:
                stack[sp] = a
                stack[sp + 1] = b
            sp += 2
    return np.sqrt(best)
