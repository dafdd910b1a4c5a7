"""Drivers behind the CLI subcommands and the HTTP endpoints."""
import csv
from dataclasses import dataclass, field, replace
import json
import math
from pathlib import Path
import time

import numpy as np

from . import cache as bc
from . import geometry as geo
from . import pointwise as pw
from . import problems as pr
from .config import ConfigError
from .fields import make_field
from .kernels import KernelSpec

DEFAULT_GRID = 64


def apply_threads(threads):
    """Cap numba worker threads; results do not depend on the count."""
    if threads is None:
        return
    import numba
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


@dataclass
class Setup:
    scene: geo.Scene
    problem: pw.PDEProblem
    analytic: pr.AnalyticProblem = None
    request: bc.RegionRequest = field(default_factory=bc.RegionRequest)


def build_setup(cfg):
    spec = cfg.problem
    try:
        if spec.analytic is not None:
            ap = pr.analytic_problem(spec.analytic, spec.resolution)
            scene, problem, analytic = ap.scene, ap.problem, ap
        else:
            scene = geo.read_scene(cfg.scene)
            problem = pw.PDEProblem(spec=KernelSpec(sigma=spec.sigma),
                                    source=_field(spec.f), dirichlet=_field(spec.g),
                                    neumann=_field(spec.h))
            analytic = None
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    request = bc.RegionRequest()
    if cfg.region.kind == "subdomain":
        try:
            loop = geo.read_scene(cfg.region.path)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"region.path: {exc}") from None
        request = bc.RegionRequest("subdomain", loop)
    return Setup(scene, problem, analytic, request)


def _field(spec):
    return None if spec is None else make_field(spec.model_dump())


def walk_config(cfg, seed=None, **overrides):
    w = cfg.walk
    try:
        wc = pw.WalkConfig(n_walks=w.n_walks, epsilon=w.epsilon, r_min=w.r_min,
                           max_steps=w.max_steps, control_variate=w.control_variate,
                           seed=cfg.seed if seed is None else seed)
        return replace(wc, **overrides)
    except ValueError as exc:
        raise ConfigError(f"walk: {exc}") from None


def cache_config(cfg, scene, seed=None, **overrides):
    c = cfg.cache
    seed = cfg.seed if seed is None else seed
    try:
        cc = bc.CacheConfig(
            n_boundary=c.n_boundary, n_source=c.n_source, n_walks_neumann=c.n_walks_neumann,
            n_walks_dirichlet=c.n_walks_dirichlet, offset=c.offset, clamp=c.clamp,
            correction=c.correction, correction_walks=c.correction_walks,
            correction_rays=c.correction_rays, walk=walk_config(cfg, seed),
            stratified=c.stratified, voronoi=c.voronoi, neumann_start=c.neumann_start,
            seed=seed)
        return replace(cc, **overrides).resolved(scene)
    except ValueError as exc:
        raise ConfigError(f"cache: {exc}") from None


def evaluation_points(cfg, scene):
    """(points, grid origin/spacing/shape or None)."""
    if cfg.points is not None:
        return np.asarray(cfg.points, dtype=np.float64).reshape(-1, 2), None
    if cfg.grid is not None:
        g = cfg.grid
        sp = np.broadcast_to(np.asarray(g.spacing, dtype=np.float64), (2,))
        meta = (np.asarray(g.origin, dtype=np.float64), sp, (g.nx, g.ny))
    else:
        lo, hi = scene.bounds
        n = DEFAULT_GRID
        sp = (hi - lo) / n
        meta = (lo + 0.5 * sp, sp, (n, n))
    return pr.GridField.node_points(*meta), meta


def build_region(setup, ccfg):
    try:
        return bc.build_solve_region(setup.scene, setup.request, offset=ccfg.offset)
    except geo.GeometryError as exc:
        raise ConfigError(f"region: {exc}") from None


# ---------------------------------------------------------------------------
# solve

@dataclass
class SolveResult:
    points: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    stderr: np.ndarray
    gradient: np.ndarray = None
    report: list = field(default_factory=list)
    grid: tuple = None
    rmse: float = None
    files: list = field(default_factory=list)
    evals: object = None


def _rmse_vs_exact(setup, points, values, valid):
    if setup.analytic is None:
        return None
    ok = valid & np.isfinite(values)
    if not ok.any():
        return None
    err = values[ok] - setup.analytic.u(points[ok])
    return float(np.sqrt(np.mean(err * err)))


def solve(cfg, setup=None, seed=None, points=None, **cache_overrides):
    """Run a configured solve in memory."""
    setup = setup or build_setup(cfg)
    if points is None:
        pts, meta = evaluation_points(cfg, setup.scene)
    else:
        pts, meta = np.asarray(points, dtype=np.float64).reshape(-1, 2), None
    seed = cfg.seed if seed is None else seed
    if cfg.mode == "bvc":
        return _solve_bvc(cfg, setup, pts, meta, seed, **cache_overrides)
    return _solve_pointwise(cfg, setup, pts, meta, seed)


def _solve_bvc(cfg, setup, pts, meta, seed, **cache_overrides):
    ccfg = cache_config(cfg, setup.scene, seed, **cache_overrides)
    region = build_region(setup, ccfg)
    exact = setup.analytic.exact_data() if cfg.cache.exact_data else None
    evals = bc.EvaluationPoints.create(pts, region, setup.problem.source is not None)
    report = []
    for k in range(cfg.rounds):
        rep = bc.update_solution(evals, setup.scene, setup.problem, region, ccfg,
                                 round_index=k, exact=exact, gradient=cfg.gradient)
        vals = evals.get_solution()
        report.append({
            "round": k, "mode": "bvc", "cache_time": rep.cache_time,
            "splat_time": rep.splat_time, "correction_time": rep.correction_time,
            "fallback_time": rep.fallback_time, "total_time": rep.total_time,
            "n_boundary": rep.n_boundary, "n_source": rep.n_source, "walks": rep.walks,
            "truncated": rep.truncated, "skipped": rep.skipped, "dropped": rep.dropped,
            "fallback_points": int(evals.fallback.sum()),
            "rmse": _rmse_vs_exact(setup, pts, vals, evals.valid),
        })
    values = evals.get_solution()
    return SolveResult(points=pts, values=values, valid=evals.valid & np.isfinite(values),
                       stderr=evals.solution_stderr(),
                       gradient=evals.get_gradient() if cfg.gradient else None,
                       report=report, grid=meta,
                       rmse=_rmse_vs_exact(setup, pts, values, evals.valid), evals=evals)


def _solve_pointwise(cfg, setup, pts, meta, seed):
    star = cfg.mode == "wost"
    if not star and setup.scene.has(geo.Label.NEUMANN):
        raise ConfigError("mode 'wos' needs a purely Dirichlet scene; use 'wost'")
    if setup.request.kind == "subdomain":
        valid = geo.inside(setup.request.loop, pts)
    else:
        valid = geo.inside(setup.scene, pts)
    idx = np.flatnonzero(valid)
    sums = np.zeros(len(idx))
    grads = np.zeros((len(idx), 2))
    est = []
    report = []
    for k in range(cfg.rounds):
        wcfg = walk_config(cfg, seed, stream=k)
        t0 = time.perf_counter()
        if cfg.gradient:
            u, g, stats = pw.gradient_samples(setup.scene, setup.problem, pts[idx], wcfg,
                                              ids=idx.astype(np.int64))
            grads += g.mean(axis=1)
        else:
            u, stats = pw.walk_samples(setup.scene, setup.problem, pts[idx], wcfg,
                                       star=star, ids=idx.astype(np.int64))
        est.append(u.mean(axis=1))
        sums += est[-1]
        values = np.full(len(pts), np.nan)
        values[idx] = sums / (k + 1)
        report.append({
            "round": k, "mode": cfg.mode, "cache_time": 0.0, "splat_time": 0.0,
            "correction_time": 0.0, "fallback_time": time.perf_counter() - t0,
            "total_time": time.perf_counter() - t0, "n_boundary": 0, "n_source": 0,
            "walks": stats.walks, "truncated": stats.truncated, "skipped": 0, "dropped": 0,
            "fallback_points": len(idx), "walks_per_point": cfg.walk.n_walks * (k + 1),
            "rmse": _rmse_vs_exact(setup, pts, values, valid),
        })
    values = np.full(len(pts), np.nan)
    values[idx] = sums / cfg.rounds
    stderr = np.full(len(pts), np.nan)
    if cfg.rounds > 1:
        stderr[idx] = np.std(est, axis=0, ddof=1) / math.sqrt(cfg.rounds)
    gradient = None
    if cfg.gradient:
        gradient = np.full((len(pts), 2), np.nan)
        gradient[idx] = grads / cfg.rounds
    return SolveResult(points=pts, values=values, valid=valid, stderr=stderr,
                       gradient=gradient, report=report, grid=meta,
                       rmse=_rmse_vs_exact(setup, pts, values, valid))


# ---------------------------------------------------------------------------
# output writers

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_rows(path, rows, columns=None):
    columns = columns or list(rows[0].keys()) if rows else (columns or [])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return str(path)


def write_point_values(path, points, values, valid):
    """x,y,value,valid rows; invalid values are written as nan."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["x,y,value,valid"]
    for (x, y), v, ok in zip(points, values, valid):
        lines.append(f"{x:.17g},{y:.17g},{(f'{v:.17g}' if ok else 'nan')},{int(ok)}")
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def write_pgm(path, values, valid, shape, value_range=None):
    """8-bit grayscale image; invalid pixels black, top row = largest y."""
    nx, ny = shape
    vals = np.asarray(values, dtype=np.float64).reshape(ny, nx)
    ok = np.asarray(valid, dtype=bool).reshape(ny, nx) & np.isfinite(vals)
    if value_range is None:
        lo, hi = (float(vals[ok].min()), float(vals[ok].max())) if ok.any() else (0.0, 1.0)
    else:
        lo, hi = map(float, value_range)
    span = hi - lo if hi > lo else 1.0
    level = np.clip((vals - lo) / span, 0.0, 1.0)
    img = np.where(ok, 1 + np.rint(level * 254), 0).astype(np.uint8)[::-1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{nx} {ny}\n255\n".encode() + img.tobytes())
    side = path.with_name(path.name + ".txt")
    side.write_text(f"value_min {lo:.17g}\nvalue_max {hi:.17g}\n"
                    "mapping gray = 1 + round(254 * (value - value_min) / (value_max - value_min))\n"
                    "out_of_domain gray = 0\n")
    return [str(path), str(side)]


def run_solve(cfg):
    apply_threads(cfg.threads)
    res = solve(cfg)
    out = cfg.outputs
    if out.grid_csv:
        res.files.append(write_point_values(out.grid_csv, res.points, res.values, res.valid))
    if out.image:
        if res.grid is None:
            raise ConfigError("outputs.image needs a grid, not a point list")
        res.files += write_pgm(out.image, res.values, res.valid, res.grid[2], out.image_range)
    if out.report_csv and res.report:
        cols = list(res.report[0].keys())
        for r in res.report:
            cols += [c for c in r if c not in cols]
        res.files.append(write_rows(out.report_csv, res.report, cols))
    return res


# ---------------------------------------------------------------------------
# convergence

def fit_slope(xs, ys):
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    ok = (xs > 0) & (ys > 0) & np.isfinite(ys)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[ok]), np.log(ys[ok]), 1)[0])


def run_convergence(cfg, write=True):
    """RMSE against the analytic solution over a parameter sweep and seeds."""
    apply_threads(cfg.threads)
    setup = build_setup(cfg)
    if setup.analytic is None:
        raise ConfigError("converge needs an analytic problem (problem.analytic)")
    conv = cfg.converge
    rows = []
    for value in conv.values:
        if value < 1:
            raise ConfigError("converge.values must be >= 1")
        for s in range(conv.seeds):
            seed = cfg.seed + s
            run = cfg
            over = {}
            if conv.parameter == "n_boundary":
                over = {"n_boundary": int(value)}
            elif conv.parameter == "n_walks":
                run = cfg.model_copy(update={"walk": cfg.walk.model_copy(
                    update={"n_walks": int(value)})})
            else:
                run = cfg.model_copy(update={"rounds": int(value)})
            t0 = time.perf_counter()
            res = solve(run, setup, seed=seed, **over)
            rows.append({"parameter": conv.parameter, "value": int(value), "seed": seed,
                         "rmse": res.rmse, "wall_time": time.perf_counter() - t0})
    means = [np.mean([r["rmse"] for r in rows if r["value"] == v]) for v in conv.values]
    slope = fit_slope(conv.values, means)
    for r in rows:
        r["slope"] = slope
    files = []
    if write and cfg.outputs.table_csv:
        files.append(write_rows(cfg.outputs.table_csv, rows))
    return rows, slope, files


# ---------------------------------------------------------------------------
# streamlines

@dataclass
class Polyline:
    seed: tuple
    points: list
    reason: str


def trace_streamlines(cfg, write=True):
    """Heun integration of x' = ∇u/|∇u| through retained caches."""
    apply_threads(cfg.threads)
    setup = build_setup(cfg)
    ccfg = cache_config(cfg, setup.scene)
    region = build_region(setup, ccfg)
    exact = setup.analytic.exact_data() if cfg.cache.exact_data else None
    caches = bc.RetainedCaches(setup.scene, setup.problem, region, ccfg, cfg.rounds, exact)
    sl = cfg.streamlines
    h = sl.step
    lines = []

    def direction(p):
        g = caches.gradient(p[None])[0]
        if not np.all(np.isfinite(g)):
            return None, "outside"
        n = float(np.hypot(*g))
        if n < 1e-12:
            return None, "zero-gradient"
        return g / n, None

    for seed in sl.seeds:
        x = np.asarray(seed, dtype=np.float64)
        pts, reason = [], "steps"
        d1, why = direction(x)
        if why == "outside":
            lines.append(Polyline(tuple(seed), [], "outside"))
            continue
        pts.append(x.tolist())
        for _ in range(sl.n_steps):
            if d1 is None:
                reason = why
                break
            d2, why2 = direction(x + h * d1)
            if d2 is None:
                reason = why2
                break
            x = x + 0.5 * h * (d1 + d2)
            d1, why = direction(x)
            if why == "outside":
                reason = "outside"
                break
            pts.append(x.tolist())
        lines.append(Polyline(tuple(seed), pts, reason))
    files = []
    if write and cfg.outputs.polylines:
        path = Path(cfg.outputs.polylines)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = {"step": h, "polylines": [{"seed": list(p.seed), "points": p.points,
                                          "reason": p.reason} for p in lines]}
        path.write_text(json.dumps(data, indent=1))
        files.append(str(path))
    return lines, files


# ---------------------------------------------------------------------------
# ablation

def run_ablation(cfg, parameter=None, values=None, write=True):
    """Sweep l, c or the correction mode; report interior and near-boundary error."""
    apply_threads(cfg.threads)
    setup = build_setup(cfg)
    if setup.analytic is None:
        raise ConfigError("ablate needs an analytic problem (problem.analytic)")
    parameter = parameter or cfg.ablate.parameter
    values = list(values if values is not None else cfg.ablate.values)
    if not values:
        values = {"l": [2.0, 5.0, 10.0], "c": [100.0, 10.0, 3.0, 1.0],
                  "mode": ["off", "clamp-only", "clamp+correct"]}[parameter]
    base = cache_config(cfg, setup.scene)
    eps = base.walk.epsilon
    settings = []
    for v in values:
        if parameter == "l":
            v = float(v)
            if not v > 1.0:
                raise ConfigError(f"ablate: l = {v:g} epsilon violates l > epsilon")
            settings.append((v, {"offset": v * eps}))
        elif parameter == "c":
            v = float(v)
            if not v > 0:
                raise ConfigError("ablate: c must be positive")
            mode = cfg.cache.correction if cfg.cache.correction != "off" else "clamp-only"
            settings.append((v, {"clamp": v, "correction": mode}))
        else:
            if v not in bc.CORRECTION_MODES:
                raise ConfigError(f"ablate: unknown mode {v!r}")
            settings.append((v, {"correction": v}))
    widest = max([o.get("offset", base.offset) for _, o in settings])
    pts, _ = evaluation_points(cfg, setup.scene)
    ref = bc.build_solve_region(setup.scene, setup.request, offset=widest)
    inside = geo.inside(setup.scene, pts) if setup.request.kind == "whole" else \
        geo.inside(setup.request.loop, pts)
    d, *_ = geo.closest_points(ref.boundary, pts)
    near = inside & (d < 2 * widest)
    interior = inside & ~near
    exact = setup.analytic.u(pts)
    rows = []
    for v, over in settings:
        res = solve(cfg, setup, **over)
        err = res.values - exact
        est = res.evals.round_estimates() - exact[None]
        per_round = np.nanmean(est[:, interior], axis=1) if interior.any() else np.zeros(1)
        se = float(np.std(per_round, ddof=1) / math.sqrt(len(per_round))) \
            if len(per_round) > 1 else float("nan")
        row = {"parameter": parameter, "value": v,
               "interior_rmse": _rms(err[interior]), "interior_bias": _mean(err[interior]),
               "interior_bias_se": se, "near_rmse": _rms(err[near]),
               "near_max_abs": float(np.nanmax(np.abs(err[near]))) if near.any() else None}
        rows.append(row)
    files = []
    if write and cfg.outputs.table_csv:
        files.append(write_rows(cfg.outputs.table_csv, rows))
    return rows, files


def _rms(e):
    e = e[np.isfinite(e)]
    return float(np.sqrt(np.mean(e * e))) if len(e) else None


def _mean(e):
    e = e[np.isfinite(e)]
    return float(np.mean(e)) if len(e) else None


# ---------------------------------------------------------------------------
# oracle

def run_oracle(cfg, write=True):
    """Deterministic reference values on the configured grid or points."""
    apply_threads(cfg.threads)
    setup = build_setup(cfg)
    method = cfg.oracle.method
    pts, meta = evaluation_points(cfg, setup.scene)
    if method == "fd":
        h = cfg.oracle.fd_spacing
        if h is None:
            raise ConfigError("oracle.fd_spacing is required for the fd method")
        try:
            grid = pr.fd_reference(setup.scene, setup.problem, h)
        except ValueError as exc:
            raise ConfigError(f"oracle: {exc}") from None
        pts = grid.points()
        values = grid.values.ravel()
        valid = grid.valid.ravel()
        meta = (grid.origin, grid.spacing, grid.shape)
    else:
        if setup.analytic is None:
            raise ConfigError(f"oracle method {method!r} needs an analytic problem")
        valid = geo.inside(setup.scene, pts)
        values = np.full(len(pts), np.nan)
        if method == "exact":
            values[valid] = setup.analytic.u(pts[valid])
        else:
            ap = setup.analytic
            for i in np.flatnonzero(valid):
                v = pr.dense_bie_quadrature(setup.scene, ap.u, ap.dudn, pts[i],
                                            setup.problem.spec, cfg.oracle.quadrature_nodes)
                if setup.problem.source is not None:
                    v += pr.source_integral(setup.scene, setup.problem.source, pts[i],
                                            setup.problem.spec)
                values[i] = v
    files = []
    if write and cfg.outputs.grid_csv:
        files.append(write_point_values(cfg.outputs.grid_csv, pts, values, valid))
    return pts, values, valid, files
