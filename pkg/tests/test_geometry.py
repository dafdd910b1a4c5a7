import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from shapely.geometry import Point, Polygon

from bvcache import geometry as geo

SQUARE = [(0, 0), (1, 0), (1, 1), (0, 1)]


def square(labels="D"):
    return geo.polygon_scene(SQUARE, labels)


def star_polygon(rng, n=24):
    t = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(0.4, 1.0, n)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def brute_closest(scene, x):
    a, b = scene.p0, scene.p1
    e = b - a
    t = np.clip(np.einsum("ij,ij->i", x - a, e) / np.einsum("ij,ij->i", e, e), 0, 1)
    c = a + t[:, None] * e
    return np.hypot(*(c - x).T)


def brute_ray(scene, o, d, tmin):
    hits = []
    for s, (a, b) in enumerate(zip(scene.p0, scene.p1)):
        e = b - a
        m = np.array([[d[0], -e[0]], [d[1], -e[1]]])
        if abs(np.linalg.det(m)) < 1e-300:
            continue
        t, u = np.linalg.solve(m, a - o)
        if t > tmin and -1e-12 <= u <= 1 + 1e-12:
            hits.append((t, s))
    return sorted(hits)


# ---------------------------------------------------------------- scenes

def test_square_scene():
    sc = square()
    assert sc.diagonal == pytest.approx(np.sqrt(2))
    assert sc.is_closed
    np.testing.assert_allclose(np.hypot(*sc.normals.T), 1.0, atol=1e-12)


def test_neumann_bottom_normal():
    sc = square(["N", "D", "D", "D"])
    np.testing.assert_allclose(sc.normals[0], (0, -1), atol=1e-15)
    assert sc.labels[0] == geo.Label.NEUMANN


def test_degenerate_segment_rejected():
    with pytest.raises(geo.GeometryError, match="degenerate segment 1"):
        geo.build_scene(SQUARE, [(0, 1), (0, 0), (1, 2)], ["D"] * 3)


def test_inconsistent_lengths_rejected():
    with pytest.raises(geo.GeometryError):
        geo.build_scene(SQUARE, [(0, 1), (1, 2)], ["D"])
    with pytest.raises(geo.GeometryError):
        geo.build_scene(SQUARE, [(0, 7)], ["D"])


def test_scene_file_round_trip(tmp_path):
    sc = square(["N", "D", "N", "D"])
    path = tmp_path / "sq.scene"
    geo.write_scene(sc, path)
    back = geo.read_scene(path)
    np.testing.assert_array_equal(back.vertices, sc.vertices)
    np.testing.assert_array_equal(back.segments, sc.segments)
    np.testing.assert_array_equal(back.labels, sc.labels)


def test_scene_file_comments_and_errors(tmp_path):
    p = tmp_path / "a.scene"
    p.write_text("# square\nv 0 0\nv 1 0\nv 0 1  # corner\ns 0 1 D\ns 1 2 N\ns 2 0\n")
    sc = geo.read_scene(p)
    assert sc.n_segments == 3 and sc.labels[1] == geo.Label.NEUMANN
    p.write_text("v 0 0\nq 1 2\n")
    with pytest.raises(geo.GeometryError):
        geo.read_scene(p)


def test_loops_of_annulus():
    outer = geo.polygon_scene(geo.circle_points(16, 2.0))
    inner = geo.polygon_scene(geo.circle_points(8, 1.0)[::-1])
    sc = geo.merge_scenes(outer, inner)
    loops = sc.loops()
    assert [len(l) for l in loops] == [16, 8]


# ---------------------------------------------------------------- closest point

def test_closest_point_examples():
    sc = square()
    _, d, _, seg = geo.closest_point(sc, np.array([0.5, 0.5]))
    assert d == pytest.approx(0.5) and seg == 0
    cp, d, _, _ = geo.closest_point(sc, np.array([1.2, 0.5]))
    np.testing.assert_allclose(cp, (1, 0.5), atol=1e-15)
    assert d == pytest.approx(0.2)
    cp, d, _, _ = geo.closest_point(sc, np.array([-0.3, -0.4]))
    np.testing.assert_allclose(cp, (0, 0), atol=1e-15)
    assert d == pytest.approx(0.5)


def test_closest_point_label_filter():
    sc = square(["N", "D", "D", "D"])
    _, d, _, seg = geo.closest_point(sc, np.array([0.5, 0.1]), "dirichlet")
    assert seg in (1, 3) and d == pytest.approx(0.5)
    with pytest.raises(geo.GeometryError, match="no boundary"):
        geo.closest_point(square("D"), np.array([0.5, 0.5]), "neumann")


def test_closest_point_matches_brute_force():
    rng = np.random.default_rng(0)
    sc = geo.polygon_scene(star_polygon(rng, 64))
    x = rng.uniform(-1.5, 1.5, (1000, 2))
    d, _, _, seg = geo.closest_points(sc, x)
    for i in range(len(x)):
        bf = brute_closest(sc, x[i])
        assert d[i] == pytest.approx(bf.min(), rel=1e-9, abs=1e-15)
        assert bf[seg[i]] <= bf.min() * (1 + 1e-9) + 1e-15


# ---------------------------------------------------------------- silhouettes

def test_silhouette_reflex_corner():
    sc = geo.build_scene([(1, 0), (0, 0), (0, 1)], [(0, 1), (1, 2)], ["N", "N"])
    np.testing.assert_allclose(sc.normals, [(0, 1), (1, 0)], atol=1e-15)
    assert geo.closest_silhouette_distance(sc, (0.3, -0.4)) == pytest.approx(0.5)
    # from (-0.3, -0.4) both normals see the corner from the same side
    d = geo.closest_silhouette_distance(sc, (-0.3, -0.4))
    assert d == pytest.approx(np.hypot(1.3, 0.4))  # nearest open-chain endpoint


def test_flat_chain_has_no_interior_silhouette():
    sc = geo.build_scene([(0, 0), (1, 0), (2, 0)], [(0, 1), (1, 2)], ["N", "N"])
    # the middle vertex never straddles; only the chain ends count
    assert geo.closest_silhouette_distance(sc, (1.0, 0.3)) == pytest.approx(np.hypot(1, 0.3))


def test_convex_neumann_loop_has_no_silhouettes_inside():
    sc = square("N")
    assert geo.closest_silhouette_distance(sc, (0.5, 0.5)) == np.inf


def test_no_neumann_is_infinite():
    assert geo.closest_silhouette_distance(square("D"), (0.2, 0.7)) == np.inf


def test_silhouette_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = star_polygon(rng, 40)
    labels = rng.choice(["D", "N"], 40)
    sc = geo.polygon_scene(pts, list(labels))
    x = rng.uniform(-0.3, 0.3, (300, 2))
    got = geo.closest_silhouette_distances(sc, x)
    n = len(pts)
    for i in range(len(x)):
        best = np.inf
        for v in range(n):
            prev, nxt = (v - 1) % n, v
            lp, ln = labels[prev] == "N", labels[nxt] == "N"
            if not (lp or ln):
                continue
            w = pts[v] - x[i]
            if lp and ln:
                a, b = sc.normals[prev] @ w, sc.normals[nxt] @ w
                if not a * b < 0:
                    continue
            best = min(best, np.hypot(*w))
        assert got[i] == pytest.approx(best)


# ---------------------------------------------------------------- rays

def test_ray_examples():
    sc = square()
    hits = geo.intersect_ray(sc, (0.5, 0.5), (1.0, 0.0))
    assert len(hits) == 1
    np.testing.assert_allclose(hits[0].point, (1, 0.5))
    assert hits[0].t == pytest.approx(0.5) and hits[0].sign == 1
    assert geo.intersect_ray(sc, (0.5, 0.5), (1.0, 0.0), max_t=0.25) == []
    hits = geo.intersect_ray(sc, (-0.5, 0.5), (1.0, 0.0))
    assert [h.t for h in hits] == pytest.approx([0.5, 1.5])
    assert [h.sign for h in hits] == [-1, 1]


def test_ray_from_boundary_skips_origin_segment():
    hits = geo.intersect_ray(square(), (0.5, 0.0), (0.0, 1.0))
    assert len(hits) == 1 and hits[0].segment == 2


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        geo.intersect_ray(square(), (0.5, 0.5), (2.0, 0.0))


def test_ray_matches_brute_force():
    rng = np.random.default_rng(2)
    sc = geo.polygon_scene(star_polygon(rng, 48))
    tmin = geo.RAY_TMIN_REL * sc.diagonal
    for _ in range(1000):
        o = rng.uniform(-1.5, 1.5, 2)
        a = rng.uniform(0, 2 * np.pi)
        d = np.array([np.cos(a), np.sin(a)])
        hits = geo.intersect_ray(sc, o, d)
        bf = brute_ray(sc, o, d, tmin)
        assert [h.segment for h in hits] == [s for _, s in bf]
        np.testing.assert_allclose([h.t for h in hits], [t for t, _ in bf], rtol=1e-9, atol=1e-12)
        for h in hits:
            assert h.sign == (1 if sc.normals[h.segment] @ d > 0 else -1)
            np.testing.assert_allclose(h.point, o + h.t * d, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- inside

def test_inside_examples():
    r = geo.Region(square())
    assert geo.inside(r, (0.5, 0.5))
    assert not geo.inside(r, (1.5, 0.5))
    assert geo.inside(r, (1.0, 0.5))


def test_region_properties():
    r = geo.Region(square())
    assert r.area == pytest.approx(1.0) and r.perimeter == pytest.approx(4.0)
    with pytest.raises(geo.GeometryError):
        geo.Region(geo.build_scene([(0, 0), (1, 0), (1, 1)], [(0, 1), (1, 2)], "DD"))


def test_inside_matches_shapely():
    rng = np.random.default_rng(8)
    pts = star_polygon(rng, 30)
    r = geo.Region(geo.polygon_scene(pts))
    poly = Polygon(pts)
    x = rng.uniform(-1.1, 1.1, (2000, 2))
    got = geo.inside(r, x)
    expect = np.array([poly.contains(Point(p)) for p in x])
    far = np.array([poly.exterior.distance(Point(p)) > 1e-9 for p in x])
    np.testing.assert_array_equal(got[far], expect[far])


def test_inside_flips_at_each_crossing():
    rng = np.random.default_rng(12)
    sc = geo.polygon_scene(star_polygon(rng, 30))
    r = geo.Region(sc)
    for _ in range(50):
        o = rng.uniform(-1.2, 1.2, 2)
        a = rng.uniform(0, 2 * np.pi)
        d = np.array([np.cos(a), np.sin(a)])
        ts = [h.t for h in geo.intersect_ray(sc, o, d)]
        mids = [0.5 * (a + b) for a, b in zip([0.0] + ts, ts + [ts[-1] + 1.0 if ts else 1.0])]
        states = [geo.inside(r, o + t * d) for t in mids]
        assert all(a != b for a, b in zip(states, states[1:]))
        assert not states[-1]


# ---------------------------------------------------------------- sampling

def test_boundary_pdf_and_on_segment():
    sc = square()
    s = geo.sample_boundary(sc, 1000, np.random.default_rng(0))
    np.testing.assert_array_equal(s.pdf, 0.25)
    a, b = sc.p0[s.segment], sc.p1[s.segment]
    cross = (b - a)[:, 0] * (s.points - a)[:, 1] - (b - a)[:, 1] * (s.points - a)[:, 0]
    assert np.abs(cross).max() <= 1e-9


def test_boundary_bottom_edge_fraction():
    s = geo.sample_boundary(square(), 100_000, np.random.default_rng(1))
    assert np.mean(s.segment == 0) == pytest.approx(0.25, abs=0.005)


def test_boundary_stratified_quarters():
    sc = geo.build_scene([(0, 0), (1, 0)], [(0, 1)], "D")
    s = geo.sample_boundary(sc, 4, np.random.default_rng(3), stratified=True)
    np.testing.assert_array_equal(np.sort(np.floor(s.points[:, 0] * 4)), [0, 1, 2, 3])


@pytest.mark.parametrize("stratified", [False, True])
def test_boundary_uniformity_chi2(stratified):
    rng = np.random.default_rng(5)
    sc = geo.polygon_scene(star_polygon(rng, 20))
    s = geo.sample_boundary(sc, 100_000, rng, stratified=stratified)
    L = sc.total_length
    counts = np.bincount(np.minimum((s.arc / L * 16).astype(int), 15), minlength=16)
    p = stats.chisquare(counts).pvalue
    assert p > 1e-3


def test_interior_pdf():
    _, pdf = geo.sample_region_interior(geo.Region(square()), 100, np.random.default_rng(0))
    np.testing.assert_allclose(pdf, 1.0)
    disk = geo.Region(geo.polygon_scene(geo.circle_points(4096)))
    _, pdf = geo.sample_region_interior(disk, 10, np.random.default_rng(0))
    np.testing.assert_allclose(pdf, 1 / np.pi, rtol=1e-5)


@pytest.mark.parametrize("stratified", [False, True])
def test_interior_mean(stratified):
    pts, _ = geo.sample_region_interior(geo.Region(square()), 100_000,
                                        np.random.default_rng(6), stratified=stratified)
    assert len(pts) == 100_000
    np.testing.assert_allclose(pts.mean(axis=0), (0.5, 0.5), atol=0.003)


def test_interior_samples_are_inside():
    rng = np.random.default_rng(7)
    r = geo.Region(geo.polygon_scene(star_polygon(rng, 12)))
    pts, _ = geo.sample_region_interior(r, 5000, rng, stratified=True)
    assert np.all(geo.inside(r, pts))


# ---------------------------------------------------------------- Voronoi

def test_voronoi_examples():
    np.testing.assert_allclose(geo.voronoi_weights([0, 1, 2, 3], 4.0), 1.0)
    np.testing.assert_allclose(geo.voronoi_weights([0, 1, 3], 4.0), [1.0, 1.5, 1.5])
    np.testing.assert_allclose(geo.voronoi_weights([2.5], 4.0), [4.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 0.999999), min_size=1, max_size=60), st.floats(0.1, 100))
def test_voronoi_partitions_loop(u, length):
    arc = np.array(u) * length
    w = geo.voronoi_weights(arc, length)
    assert w.sum() == pytest.approx(length, rel=1e-9)
    assert np.all(w >= 0)


def test_voronoi_for_multi_loop_scene():
    outer = geo.polygon_scene(geo.circle_points(16, 2.0))
    inner = geo.polygon_scene(geo.circle_points(8, 1.0)[::-1])
    sc = geo.merge_scenes(outer, inner)
    s = geo.sample_boundary(sc, 500, np.random.default_rng(1))
    w = geo.voronoi_weights_for(sc, s)
    assert w.sum() == pytest.approx(sc.total_length, rel=1e-9)
    for k, segs in enumerate(sc.loops()):
        assert w[s.loop == k].sum() == pytest.approx(sc.lengths[segs].sum(), rel=1e-9)
