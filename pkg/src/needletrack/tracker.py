"""Sequence-level tracking: detection, sign resolution and filtering, plus the
two-frame line-fit baseline and the injection-point guidance computation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import ekf
from .detect import DetectConfig, DetectionResult, detect
from .geometry import (
    EllipseParams, ScanPlane, ToolAxis, angles_from_direction, axis_constraints_from_ellipse,
    direction, line_plane_intersect, point_line_distance, ParallelLinePlane,
)


class DegenerateBaseline(ValueError):
    pass


class DegenerateSurface(ValueError):
    pass


class NoIntersection(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TrackerConfig:
    detect: DetectConfig = field(default_factory=DetectConfig)
    noise: ekf.NoiseConfig = field(default_factory=ekf.NoiseConfig)
    init_window: int = 2
    init_min_separation_mm: float = 1e-3
    baseline_min_separation_mm: float = 1e-3
    gate: bool = False
    drop_planes: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.init_window < 2:
            raise ValueError("init_window must be at least 2")
        if self.init_min_separation_mm <= 0 or self.baseline_min_separation_mm <= 0:
            raise ValueError("separation thresholds must be positive")


@dataclass(eq=False)
class FrameRecord:
    index: int
    timestamp: float
    plane_index: int
    detected: bool
    status: str                         # uninitialized | initialized | updated | extrapolated | singular | numerical
    ekf_axis: ToolAxis | None = None
    ekf_state: np.ndarray | None = None
    trace_P: float = math.nan
    mahalanobis2: float = math.nan
    baseline_axis: ToolAxis | None = None
    baseline_status: str = "none"       # ok | degenerate | none
    detection: DetectionResult | None = None

    @property
    def skipped(self) -> bool:
        return self.status not in ("updated", "initialized")


@dataclass(eq=False)
class TrackerOutput:
    records: list[FrameRecord]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _center3d(e: EllipseParams, plane: ScanPlane) -> np.ndarray:
    return plane.pixel_to_3d(e.center_col, e.center_row)


def baseline_linefit(c1, plane1: ScanPlane, c2, plane2: ScanPlane, prefer=None,
                     min_separation: float = 1e-3) -> ToolAxis:
    """Axis through two consecutive ellipse centres (3D points), based at the later one."""
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    same_plane = (abs(abs(plane1.normal @ plane2.normal) - 1) < 1e-9
                  and abs(plane1.signed_distance(plane2.origin)) < 1e-9)
    if same_plane:
        raise DegenerateBaseline("both detections lie on the same plane")
    sep = float(np.linalg.norm(c2 - c1))
    if sep <= min_separation:
        raise DegenerateBaseline(f"centres {sep * 1e3:.1f} um apart")
    theta, phi = angles_from_direction(c2 - c1, prefer)
    return ToolAxis(c2, theta, phi)


def _frame_seed(cfg: TrackerConfig, index: int):
    return np.random.default_rng([cfg.seed, index])


def run(sequence, cfg: TrackerConfig = TrackerConfig(), detections=None) -> TrackerOutput:
    """Track a sequence (``synth.Sequence`` or any object with ``frames`` and ``images``).

    ``detections`` may supply precomputed :class:`DetectionResult` objects per frame.
    """
    records: list[FrameRecord] = []
    belief: ekf.Belief | None = None
    last_t = None
    pending: list[tuple[EllipseParams, ScanPlane]] = []
    prev = None          # (centre, plane) of the last detection, for the baseline
    prev_dir = None
    for k, frame in enumerate(sequence.frames):
        plane = frame.plane
        t = plane.timestamp
        if detections is not None:
            det = detections[k]
        else:
            det = detect(sequence.images[k], cfg.detect, _frame_seed(cfg, frame.index),
                         force_fail=frame.plane_index in cfg.drop_planes)
        if det.found and frame.plane_index in cfg.drop_planes:
            det = DetectionResult(None, det.tool_points[:0], det.eye_points, det.candidates,
                                  {**det.diagnostics, "failure": "forced"})
        rec = FrameRecord(frame.index, t, frame.plane_index, det.found, "uninitialized",
                          detection=det)

        if det.found:
            c = _center3d(det.ellipse, plane)
            if prev is not None:
                try:
                    ax = baseline_linefit(prev[0], prev[1], c, plane, prev_dir,
                                          cfg.baseline_min_separation_mm)
                    rec.baseline_axis, rec.baseline_status = ax, "ok"
                    prev_dir = ax.l
                except DegenerateBaseline:
                    rec.baseline_status = "degenerate"
            prev = (c, plane)

        if belief is None:
            if det.found:
                pending.append((det.ellipse, plane))
                try:
                    belief = ekf.initialize(pending[-cfg.init_window:], cfg.init_min_separation_mm)
                    last_t = t
                    rec.status = "initialized"
                except ekf.DegenerateInit:
                    pass
            if belief is not None:
                _fill(rec, belief)
            records.append(rec)
            continue

        dt = t - last_t
        u = ekf.ControlInput.from_plane(plane, dt) if dt > 0 else None
        if det.found and u is not None:
            try:
                prior = ekf.predict(belief, u, cfg.noise)
                z = ekf.sign_resolve(det.ellipse, plane, prior.state)
                post, info = ekf.update(prior, z, plane, cfg.noise, cfg.gate)
                rec.mahalanobis2 = info.mahalanobis2
                if info.gated:
                    rec.status = "extrapolated"
                    _fill(rec, prior)
                else:
                    belief, last_t = post, t
                    rec.status = "updated"
                    _fill(rec, belief)
            except ekf.SingularityDeferred:
                rec.status = "singular"
                _fill(rec, belief)
            except ekf.NumericalFailure:
                rec.status = "numerical"
                _fill(rec, belief)
        else:
            rec.status = "extrapolated"
            try:
                _fill(rec, ekf.predict(belief, u, cfg.noise) if u is not None else belief)
            except ekf.SingularityDeferred:
                _fill(rec, belief)
        records.append(rec)
    return TrackerOutput(records)


def _fill(rec: FrameRecord, b: ekf.Belief):
    rec.ekf_state = b.state.copy()
    rec.ekf_axis = b.axis
    rec.trace_P = float(np.trace(b.P))


# --- measurement noise calibration ---------------------------------------------

def calibrate_measurement_noise(groups, cfg: DetectConfig = DetectConfig(), seed: int = 0,
                                floor: float = 1e-8) -> np.ndarray:
    """Diagonal R from detections on static-needle frames.

    ``groups`` is an iterable of image lists; each list holds frames of one fixed
    needle/plane configuration. Within-group sample variances are pooled. Position
    variance is averaged over the in-plane directions and applied isotropically
    (the out-of-plane component of a centre is exact by construction).
    """
    pooled = np.zeros(5)
    dof = 0
    for g, images in enumerate(groups):
        rows = []
        for k, img in enumerate(images):
            det = detect(img, cfg, np.random.default_rng([seed, g, k]))
            if not det.found:
                continue
            c = axis_constraints_from_ellipse(det.ellipse, img.plane)
            col, row = img.plane.point_to_pixel(c.center3d)
            rows.append([col * img.plane.px_spacing_col * 1e-3, row * img.plane.px_spacing_row * 1e-3,
                         c.cos_theta_abs, c.n_dot_l_abs])
        if len(rows) < 2:
            continue
        a = np.asarray(rows)
        pooled += ((a - a.mean(axis=0)) ** 2).sum(axis=0)[[0, 1, 1, 2, 3]] * [1, 1, 0, 1, 1]
        dof += len(rows) - 1
    if dof == 0:
        raise ValueError("no usable detections for calibration")
    var = pooled / dof
    pos = 0.5 * (var[0] + var[1])
    return np.diag(np.maximum([pos, pos, pos, var[3], var[4]], floor))


# --- guidance -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TargetSurface:
    center: np.ndarray
    radius: float
    n_inliers: int


def _sphere_from_points(pts):
    """Algebraic sphere x.x + D.x + G = 0 through >= 4 points (least squares)."""
    a = np.column_stack([pts, np.ones(len(pts))])
    sol, *_ = np.linalg.lstsq(a, -(pts * pts).sum(axis=1), rcond=None)
    c = -sol[:3] / 2
    r2 = c @ c - sol[3]
    return c, math.sqrt(r2) if r2 > 0 else math.nan


def _coplanar(pts, tol=1e-9):
    q = pts - pts.mean(axis=0)
    sv = np.linalg.svd(q, compute_uv=False)
    return sv[0] == 0 or sv[-1] <= tol * sv[0]


def fit_target_surface(points, threshold_mm: float = 0.03, iterations: int = 500,
                       confidence: float = 0.999, rng=None) -> TargetSurface:
    """RANSAC sphere (4-point hypotheses) with a geometric least-squares refit on inliers."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4 or _coplanar(pts):
        raise DegenerateSurface("need at least 4 non-coplanar points")
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(pts)
    best_count, best = 0, None
    trials, done = iterations, 0
    while done < min(trials, iterations):
        idx = rng.choice(n, 4, replace=False)
        sample = pts[idx]
        done += 1
        if _coplanar(sample, 1e-6):
            continue
        c, r = _sphere_from_points(sample)
        if not math.isfinite(r):
            continue
        count = int((np.abs(np.linalg.norm(pts - c, axis=1) - r) <= threshold_mm).sum())
        if count > best_count:
            best_count, best = count, (c, r)
            w = (count / n) ** 4
            trials = math.log(1 - confidence) / math.log(1 - w) if w < 1 else 0
    if best is None:
        raise DegenerateSurface("no valid sphere hypothesis")
    c, r = best
    inl = np.abs(np.linalg.norm(pts - c, axis=1) - r) <= threshold_mm
    if inl.sum() >= 4 and not _coplanar(pts[inl]):
        c, r = _sphere_from_points(pts[inl])
        c, r = _refine_sphere(pts[inl], c, r)
        inl = np.abs(np.linalg.norm(pts - c, axis=1) - r) <= threshold_mm
    return TargetSurface(c, float(r), int(inl.sum()))


def _refine_sphere(pts, c, r, iters=10):
    p = np.concatenate([c, [r]])
    for _ in range(iters):
        d = pts - p[:3]
        dist = np.linalg.norm(d, axis=1)
        res = dist - p[3]
        J = np.column_stack([-d / dist[:, None], -np.ones(len(pts))])
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        p = p + step
        if np.linalg.norm(step) < 1e-12:
            break
    return p[:3], float(p[3])


@dataclass(frozen=True, eq=False)
class Injection:
    point: np.ndarray
    taus: tuple[float, float]


def injection_point(axis: ToolAxis, surf: TargetSurface) -> Injection:
    """Intersection of the tool axis with the target sphere.

    The returned point is the first crossing ahead of the base point along ``l``
    (smallest tau >= 0); when both crossings are behind, the nearer one.
    """
    l = axis.l
    w = axis.x - surf.center
    b = float(l @ w)
    disc = b * b - (float(w @ w) - surf.radius**2)
    if disc < 0:
        raise NoIntersection("tool axis misses the target surface")
    sq = math.sqrt(disc)
    taus = (-b - sq, -b + sq)
    ahead = [t for t in taus if t >= 0]
    tau = min(ahead) if ahead else max(taus)
    return Injection(axis.x + tau * l, taus)


# --- evaluation helpers -----------------------------------------------------------

def canonical_angles(axis: ToolAxis) -> tuple[float, float]:
    """(theta, phi) of the line with its direction in the +z hemisphere."""
    return angles_from_direction(axis.l)


def angle_errors(est: ToolAxis, truth: ToolAxis) -> tuple[float, float, float]:
    """(theta error, wrapped phi error, total axis angle) in radians, lines compared unsigned."""
    te, pe = canonical_angles(est)
    tt, pt = canonical_angles(truth)
    total = math.acos(min(1.0, abs(float(est.l @ truth.l))))
    return te - tt, math.remainder(pe - pt, 2 * math.pi), total


def axis_distance(est: ToolAxis, truth: ToolAxis, plane: ScanPlane) -> float:
    """Distance from the true axis/plane intersection to the estimated line (mm)."""
    try:
        q = line_plane_intersect(truth, plane)
    except ParallelLinePlane:
        q = truth.x
    return point_line_distance(q, est.x, est.l)


CSV_FIELDS = ["frame", "t", "plane_index", "detected", "status",
              "x", "y", "z", "theta", "phi", "xdot", "ydot", "zdot", "thetadot", "phidot",
              "trace_P", "innovation_mahalanobis", "skipped",
              "base_status", "base_x", "base_y", "base_z", "base_theta", "base_phi"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(out: TrackerOutput, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in out:
            s = r.ekf_state if r.ekf_state is not None else [None] * 10
            b = r.baseline_axis
            w.writerow([_fmt(v) for v in [r.index, r.timestamp, r.plane_index, r.detected]] + [r.status]
                       + [_fmt(v) for v in list(s) + [r.trace_P, r.mahalanobis2, r.skipped]]
                       + [r.baseline_status]
                       + [_fmt(v) for v in ([*b.x, b.theta, b.phi] if b is not None else [None] * 5)])


@dataclass(eq=False)
class TrackRow:
    index: int
    timestamp: float
    plane_index: int
    detected: bool
    status: str
    ekf_axis: ToolAxis | None
    baseline_axis: ToolAxis | None
    baseline_status: str


def read_csv(path) -> list[TrackRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            def f(key):
                return float(d[key]) if d[key] != "" else None
            ekf_axis = None
            if d["x"] != "":
                ekf_axis = ToolAxis([f("x"), f("y"), f("z")], f("theta"), f("phi"))
            base = None
            if d["base_x"] != "":
                base = ToolAxis([f("base_x"), f("base_y"), f("base_z")], f("base_theta"), f("base_phi"))
            rows.append(TrackRow(int(d["frame"]), float(d["t"]), int(d["plane_index"]),
                                 d["detected"] == "1", d["status"], ekf_axis, base, d["base_status"]))
    return rows


def evaluate(rows, truth_axes, frames_planes, steady_from: float = 0.0) -> dict:
    """Aggregate error metrics of EKF and baseline tracks against ground truth."""
    if len(rows) != len(truth_axes):
        raise ValueError(f"track has {len(rows)} frames but truth has {len(truth_axes)}")
    per_frame = []
    for r, tr, plane in zip(rows, truth_axes, frames_planes):
        item = {"frame": r.index, "t": r.timestamp}
        for name, ax in (("ekf", r.ekf_axis), ("base", r.baseline_axis)):
            if ax is None:
                item[name] = None
                continue
            dth, dph, tot = angle_errors(ax, tr)
            item[name] = {"theta_err_deg": math.degrees(dth), "phi_err_deg": math.degrees(dph),
                          "angle_err_deg": math.degrees(tot), "axis_dist_mm": axis_distance(ax, tr, plane)}
        per_frame.append(item)
    summary = {"frames": len(rows),
               "detections": int(sum(r.detected for r in rows)),
               "dropouts": int(sum(not r.detected for r in rows))}
    for name in ("ekf", "base"):
        sel = [p for p in per_frame if p[name] is not None and p["t"] >= steady_from]
        summary[f"{name}_count"] = len(sel)
        est_angles = []
        for r in rows:
            ax = r.ekf_axis if name == "ekf" else r.baseline_axis
            if ax is not None and r.timestamp >= steady_from:
                est_angles.append(canonical_angles(ax))
        for key in ("theta_err_deg", "phi_err_deg", "angle_err_deg", "axis_dist_mm"):
            vals = np.array([p[name][key] for p in sel])
            summary[f"{name}_{key}_mean"] = float(vals.mean()) if vals.size else None
            summary[f"{name}_{key}_std"] = float(vals.std()) if vals.size else None
            summary[f"{name}_{key}_rms"] = float(np.sqrt((vals**2).mean())) if vals.size else None
        if est_angles:
            a = np.degrees(np.array(est_angles))
            summary[f"{name}_theta_std_deg"] = float(a[:, 0].std())
            summary[f"{name}_phi_std_deg"] = float(_circular_std_deg(a[:, 1]))
        else:
            summary[f"{name}_theta_std_deg"] = summary[f"{name}_phi_std_deg"] = None
    return {"summary": summary, "per_frame": per_frame}


def _circular_std_deg(phi_deg):
    ref = phi_deg[0]
    wrapped = (phi_deg - ref + 180.0) % 360.0 - 180.0
    return wrapped.std()


def write_summary(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
