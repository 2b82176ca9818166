"""Per-B-scan needle cross-section detection.

Pipeline: per-column intensity maxima -> robust tissue layer fit -> filtered
height above tissue -> optional removal of tissue-connected points -> RANSAC
ellipse -> geometric-distance refinement with known minor axis.

Ellipse work happens in the isotropic pixel frame ``(u, v) = (col * aspect, row)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import EllipseParams, ScanPlane, fold_alpha

TOOL, EYE, NOISE, EXCLUDED = 0, 1, 2, 3


class DetectionError(RuntimeError):
    pass


class InsufficientSupport(DetectionError):
    pass


class NoEllipseFound(DetectionError):
    pass


class NonConvergence(DetectionError):
    pass


@dataclass(frozen=True)
class DetectConfig:
    tissue_model: str = "circle"
    tissue_threshold: float = 4.0
    tissue_iterations: int = 200
    min_tissue_support: int = 50
    d_min: float = 20.0
    kernel: int = 15
    pathology: bool = False
    ellipse_threshold: float = 2.0
    ellipse_iterations: int = 500
    min_ellipse_inliers: int = 20
    ransac_confidence: float = 0.999
    needle_diameter_mm: float = 0.41
    refine_max_iter: int = 50
    refine_tol: float = 1e-6
    max_residual: float = 3.0
    free_center: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tissue_model not in ("circle", "poly4"):
            raise ValueError(f"tissue_model must be 'circle' or 'poly4', got {self.tissue_model!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd number of pixels")
        for name in ("tissue_threshold", "d_min", "ellipse_threshold", "needle_diameter_mm",
                     "max_residual", "refine_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.ransac_confidence < 1:
            raise ValueError("ransac_confidence must lie in (0, 1)")


@dataclass(eq=False)
class CandidateSet:
    rows: np.ndarray      # argmax row per column
    values: np.ndarray    # intensity at that row
    labels: np.ndarray    # TOOL / EYE / NOISE / EXCLUDED

    @property
    def cols(self) -> np.ndarray:
        return np.arange(self.rows.size)


@dataclass(eq=False)
class TissueFit:
    kind: str
    params: np.ndarray
    margin: float
    inliers: np.ndarray   # bool per column
    branch: float = -1.0  # circle: -1 upper, +1 lower branch
    scale: float = 1.0    # poly4: columns are normalised by this before evaluation

    def row_at(self, cols) -> np.ndarray:
        c = np.asarray(cols, dtype=float)
        if self.kind == "circle":
            cx, cy, r = self.params
            return cy + self.branch * np.sqrt(np.clip(r * r - (c - cx) ** 2, 0.0, None))
        return np.polynomial.polynomial.polyval(c / self.scale, self.params)


@dataclass(eq=False)
class DetectionResult:
    ellipse: EllipseParams | None
    tool_points: np.ndarray   # (N, 2) col, row of ellipse inliers
    eye_points: np.ndarray    # (M, 2) col, row of tissue inliers
    candidates: CandidateSet | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return self.ellipse is not None


# --- step 1 -------------------------------------------------------------------

def candidate_points(pixels) -> CandidateSet:
    """Brightest pixel of every column; ties resolve to the smallest row."""
    b = np.asarray(pixels)
    if b.size == 0:
        raise ValueError("empty image")
    rows = np.argmax(b, axis=0)
    values = b[rows, np.arange(b.shape[1])]
    return CandidateSet(rows, values, np.full(rows.size, NOISE, dtype=np.int8))


# --- step 2 -------------------------------------------------------------------

def _ransac_trials(inlier_frac: float, sample: int, confidence: float) -> float:
    w = inlier_frac ** sample
    if w <= 0:
        return math.inf
    if w >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - w)


def _draw_samples(rng, n, h, k):
    return rng.integers(0, n, size=(h, k))


def _distinct(idx):
    s = np.sort(idx, axis=1)
    return np.all(s[:, 1:] != s[:, :-1], axis=1)


def _circles_from_triples(x, y):
    """Circles through point triples; x, y have shape (H, 3). Returns cx, cy, r, ok."""
    a = np.stack([x, y, np.ones_like(x)], axis=-1)
    rhs = -(x * x + y * y)
    det = np.linalg.det(a)
    ok = np.abs(det) > 1e-9 * (np.abs(x).max(axis=1) + 1) ** 2
    a[~ok] = np.eye(3)
    sol = np.linalg.solve(a, rhs[..., None])[..., 0]
    cx, cy = -sol[:, 0] / 2, -sol[:, 1] / 2
    r2 = cx * cx + cy * cy - sol[:, 2]
    ok &= r2 > 0
    return cx, cy, np.sqrt(np.abs(r2)), ok


def _circle_vdist(cx, cy, r, x, y):
    """Vertical distance from points to the nearer branch of each circle; shapes broadcast."""
    h = r * r - (x - cx) ** 2
    s = np.sqrt(np.clip(h, 0.0, None))
    d = np.minimum(np.abs(y - (cy - s)), np.abs(y - (cy + s)))
    return np.where(h >= 0, d, np.inf)


def _kasa_circle(x, y):
    a = np.column_stack([x, y, np.ones_like(x)])
    sol, *_ = np.linalg.lstsq(a, -(x * x + y * y), rcond=None)
    cx, cy = -sol[0] / 2, -sol[1] / 2
    return np.array([cx, cy, math.sqrt(max(cx * cx + cy * cy - sol[2], 1e-12))])


def fit_tissue(cands: CandidateSet, kind: str = "circle", cfg: DetectConfig = DetectConfig(),
               rng=None) -> TissueFit:
    """RANSAC tissue layer (circle from 3 points or quartic from 5), refit on inliers."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = cands.cols.astype(float)
    y = cands.rows.astype(float)
    n = x.size
    if n < cfg.min_tissue_support:
        raise InsufficientSupport(f"{n} candidates < minimum support {cfg.min_tissue_support}")
    thr = cfg.tissue_threshold
    scale = max(1.0, 0.5 * n)
    sample = 3 if kind == "circle" else 5
    best_count, best = -1, None
    trials, done, batch = cfg.tissue_iterations, 0, 32
    while done < min(trials, cfg.tissue_iterations):
        h = min(batch, cfg.tissue_iterations - done)
        idx = _draw_samples(rng, n, h, sample)
        if kind == "circle":
            cx, cy, r, ok = _circles_from_triples(x[idx], y[idx])
            ok &= _distinct(idx)
            d = _circle_vdist(cx[:, None], cy[:, None], r[:, None], x[None], y[None])
        else:
            xs = x[idx] / scale
            v = xs[..., None] ** np.arange(5)
            ok = (np.abs(np.linalg.det(v)) > 1e-12) & _distinct(idx)
            v[~ok] = np.eye(5)
            coef = np.linalg.solve(v, y[idx][..., None])[..., 0]
            d = np.abs(y[None] - np.polynomial.polynomial.polyval(x / scale, coef.T))
        counts = np.where(ok, (d <= thr).sum(axis=1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best = (cx[k], cy[k], r[k]) if kind == "circle" else coef[k]
            trials = _ransac_trials(best_count / n, sample, cfg.ransac_confidence)
        done += h
    if best is None or best_count < cfg.min_tissue_support:
        raise InsufficientSupport(f"best tissue consensus {best_count} < {cfg.min_tissue_support}")

    def residual(params):
        if kind == "circle":
            return _circle_vdist(*params, x, y)
        return np.abs(y - np.polynomial.polynomial.polyval(x / scale, params))

    params = np.asarray(best, dtype=float)
    inl = residual(params) <= thr
    for _ in range(2):
        if kind == "circle":
            params = _kasa_circle(x[inl], y[inl])
        else:
            params = np.polynomial.polynomial.polyfit(x[inl] / scale, y[inl], 4)
        new = residual(params) <= thr
        if new.sum() < cfg.min_tissue_support or np.array_equal(new, inl):
            inl = new if new.sum() >= cfg.min_tissue_support else inl
            break
        inl = new
    if inl.sum() < cfg.min_tissue_support:
        raise InsufficientSupport(f"tissue refit kept {int(inl.sum())} inliers")
    branch = -1.0
    if kind == "circle":
        cy = params[1]
        branch = -1.0 if np.median(y[inl]) <= cy else 1.0
    return TissueFit(kind, params, thr, inl, branch, scale if kind == "poly4" else 1.0)


# --- step 3 -------------------------------------------------------------------

def filtered_height(cands: CandidateSet, fit: TissueFit, kernel: int = 15):
    """Raw and filtered height of each candidate above the tissue model (rows)."""
    d = fit.row_at(cands.cols) - cands.rows
    ds = ndimage.grey_opening(d, size=kernel, mode="nearest")
    ds = ndimage.grey_closing(ds, size=kernel, mode="nearest")
    ds = ndimage.median_filter(ds, size=kernel, mode="nearest")
    return d, ds


def tool_candidates(cands: CandidateSet, fit: TissueFit, d_min: float = 20.0,
                    kernel: int = 15) -> np.ndarray:
    """Column indices whose filtered height above tissue exceeds ``d_min``."""
    _, ds = filtered_height(cands, fit, kernel)
    return np.flatnonzero(ds > d_min)


# --- step 4 -------------------------------------------------------------------

def exclude_pathology(tool_pts, excluded_seed, d_min: float) -> np.ndarray:
    """Mask of ``tool_pts`` kept after removing everything chained to an excluded point.

    Points are (u, v) in a metric-consistent frame; a point is removed when it lies
    within ``d_min`` of an excluded point, repeated to a fixed point.
    """
    tool_pts = np.asarray(tool_pts, dtype=float).reshape(-1, 2)
    excluded_seed = np.asarray(excluded_seed, dtype=float).reshape(-1, 2)
    keep = np.ones(len(tool_pts), dtype=bool)
    if len(tool_pts) == 0 or len(excluded_seed) == 0:
        return keep
    tree = cKDTree(tool_pts)
    frontier = excluded_seed
    while len(frontier):
        hits = tree.query_ball_point(frontier, r=d_min - 1e-12)
        idx = np.unique(np.concatenate([np.asarray(h, dtype=int) for h in hits]))
        idx = idx[keep[idx]] if idx.size else idx
        if idx.size == 0:
            break
        keep[idx] = False
        frontier = tool_pts[idx]
    return keep


# --- step 5 -------------------------------------------------------------------

@dataclass(frozen=True)
class Conic:
    """a x^2 + b x y + c y^2 + d x + e y + f = 0 in isotropic pixel coordinates."""

    coef: np.ndarray

    def sampson(self, pts) -> np.ndarray:
        return sampson_distance(self.coef, pts)

    def geometric(self):
        """(u0, v0, semi_major, semi_minor, psi) with the major axis along (sin psi, cos psi)."""
        return conic_to_params(self.coef)


def sampson_distance(coef, pts) -> np.ndarray:
    a, b, c, d, e, f = coef
    x, y = pts[:, 0], pts[:, 1]
    val = a * x * x + b * x * y + c * y * y + d * x + e * y + f
    gx = 2 * a * x + b * y + d
    gy = b * x + 2 * c * y + e
    return np.abs(val) / np.sqrt(gx * gx + gy * gy + 1e-300)


def conic_to_params(coef):
    a, b, c, d, e, f = np.asarray(coef, dtype=float)
    disc = b * b - 4 * a * c
    if disc >= 0:
        raise NoEllipseFound("conic is not an ellipse")
    u0 = (2 * c * d - b * e) / disc
    v0 = (2 * a * e - b * d) / disc
    f0 = a * u0 * u0 + b * u0 * v0 + c * v0 * v0 + d * u0 + e * v0 + f
    m = np.array([[a, b / 2], [b / 2, c]])
    w, vec = np.linalg.eigh(m)
    if f0 == 0 or np.any(-f0 / w <= 0):
        raise NoEllipseFound("imaginary or degenerate ellipse")
    axes = np.sqrt(-f0 / w)
    k = int(np.argmax(axes))
    major = vec[:, k]
    psi = math.atan2(major[0], major[1])
    return float(u0), float(v0), float(axes[k]), float(axes[1 - k]), psi


def _normalise(pts):
    mu = pts.mean(axis=0)
    s = np.sqrt(((pts - mu) ** 2).sum(axis=1).mean() / 2) or 1.0
    return mu, s


def _denormalise(coef, mu, s):
    """Map conic coefficients from normalised coords (p - mu)/s back to pixel coords."""
    a, b, c, d, e, f = coef.T
    a2, b2, c2 = a / s**2, b / s**2, c / s**2
    d2, e2 = d / s, e / s
    mx, my = mu
    return np.stack([
        a2, b2, c2,
        -2 * a2 * mx - b2 * my + d2,
        -b2 * mx - 2 * c2 * my + e2,
        a2 * mx * mx + b2 * mx * my + c2 * my * my - d2 * mx - e2 * my + f,
    ], axis=-1)


def fit_ellipse_direct(pts) -> np.ndarray:
    """Least-squares ellipse-specific conic fit (Fitzgibbon/Halir-Flusser)."""
    pts = np.asarray(pts, dtype=float)
    mu, s = _normalise(pts)
    x, y = ((pts - mu) / s).T
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    m = np.array([m[2] / 2, -m[1], m[0] / 2])
    w, v = np.linalg.eig(m)
    v = np.real(v)
    cond = 4 * v[0] * v[2] - v[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise NoEllipseFound("direct fit did not yield an ellipse")
    a1 = v[:, ok[0]]
    coef = np.concatenate([a1, t @ a1])
    return _denormalise(coef[None], mu, s)[0]


def ransac_ellipse(pts, cfg: DetectConfig = DetectConfig(), rng=None):
    """RANSAC over exact 5-point conics restricted to ellipses, scored by Sampson distance.

    Returns the conic and the boolean inlier mask.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 6:
        raise NoEllipseFound(f"{n} tool points, need at least 6")
    mu, s = _normalise(pts)
    q = (pts - mu) / s
    design = np.column_stack([q[:, 0] ** 2, q[:, 0] * q[:, 1], q[:, 1] ** 2,
                              q[:, 0], q[:, 1], np.ones(n)])
    thr = cfg.ellipse_threshold / s
    best_count, best_coef = 0, None
    trials, done, batch = cfg.ellipse_iterations, 0, 64
    while done < min(trials, cfg.ellipse_iterations):
        h = min(batch, cfg.ellipse_iterations - done)
        idx = _draw_samples(rng, n, h, 5)
        _, sv, vt = np.linalg.svd(design[idx])
        coef = vt[:, -1, :]
        # a 5-point system with a second null vector is degenerate (e.g. collinear points)
        ok = ((coef[:, 1] ** 2 - 4 * coef[:, 0] * coef[:, 2] < 0) & (sv[:, 4] > 1e-9 * sv[:, 0])
              & _distinct(idx))
        a, b, c, d, e, f = (coef[:, k, None] for k in range(6))
        x, y = q[None, :, 0], q[None, :, 1]
        val = a * x * x + b * x * y + c * y * y + d * x + e * y + f
        gx = 2 * a * x + b * y + d
        gy = b * x + 2 * c * y + e
        dist = np.abs(val) / np.sqrt(gx * gx + gy * gy + 1e-300)
        counts = np.where(ok, (dist <= thr).sum(axis=1), -1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best_coef = int(counts[k]), coef[k]
            trials = _ransac_trials(best_count / n, 5, cfg.ransac_confidence)
        done += h
    if best_coef is None or best_count < cfg.min_ellipse_inliers:
        raise NoEllipseFound(f"best ellipse consensus {best_count} < {cfg.min_ellipse_inliers}")
    coef = _denormalise(best_coef[None], mu, s)[0]
    inl = sampson_distance(coef, pts) <= cfg.ellipse_threshold
    # one local refit on the consensus set
    try:
        refit = fit_ellipse_direct(pts[inl])
        inl2 = sampson_distance(refit, pts) <= cfg.ellipse_threshold
        if inl2.sum() >= inl.sum():
            coef, inl = refit, inl2
    except (NoEllipseFound, np.linalg.LinAlgError):
        pass
    return Conic(coef), inl


# --- step 6 -------------------------------------------------------------------

def closest_ellipse_param(qs, qw, a, b, t0=None, iters=40):
    """Parameter t of the closest point (a cos t, b sin t) to local points (qs, qw).

    Works on the first quadrant by symmetry with a bracketed Newton iteration;
    requires a >= b > 0.
    """
    xs, ys = np.abs(qs), np.abs(qw)
    c2 = a * a - b * b
    lo = np.zeros_like(xs)
    hi = np.full_like(xs, math.pi / 2)
    t = np.arctan2(a * ys, b * xs)
    if t0 is not None:
        t = np.arctan2(np.abs(np.sin(t0)), np.abs(np.cos(t0)))
    # on the major axis inside the evolute t = 0 is a stationary point but not the minimum
    on_axis = (ys == 0) & (a * xs < c2)
    if np.any(on_axis):
        t = np.where(on_axis, np.arccos(np.clip(a * xs / max(c2, 1e-300), 0.0, 1.0)), t)
    for _ in range(iters):
        st, ct = np.sin(t), np.cos(t)
        g = a * xs * st - b * ys * ct - c2 * st * ct
        dg = a * xs * ct + b * ys * st - c2 * (ct * ct - st * st)
        neg = g < 0
        lo = np.where(neg, t, lo)
        hi = np.where(neg, hi, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - g / dg
        bad = ~np.isfinite(tn) | (tn < lo) | (tn > hi) | (dg <= 0)
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        step = np.abs(tn - t)
        t = tn
        if step.max() < 1e-10:
            break
    return np.arctan2(np.copysign(np.sin(t), qw), np.copysign(np.cos(t), qs))


def ellipse_point_distance(pts, u0, v0, a, b, psi, t0=None):
    """Signed geometric distance (positive outside) and closest-point parameters.

    The ellipse has centre (u0, v0), semi-axes a >= b and major axis along
    (sin psi, cos psi).
    """
    pts = np.asarray(pts, dtype=float)
    sp, cp = math.sin(psi), math.cos(psi)
    du, dv = pts[:, 0] - u0, pts[:, 1] - v0
    qs = du * sp + dv * cp
    qw = du * cp - dv * sp
    t = closest_ellipse_param(qs, qw, a, b, t0)
    ct, st = np.cos(t), np.sin(t)
    ex, ey = qs - a * ct, qw - b * st
    nx, ny = ct / a, st / b
    nn = np.hypot(nx, ny)
    return (ex * nx + ey * ny) / nn, t


def ellipse_distance_bruteforce(pts, u0, v0, a, b, psi, samples=100000):
    t = np.linspace(0, 2 * math.pi, samples, endpoint=False)
    sp, cp = math.sin(psi), math.cos(psi)
    eu = u0 + a * np.cos(t) * sp + b * np.sin(t) * cp
    ev = v0 + a * np.cos(t) * cp - b * np.sin(t) * sp
    pts = np.asarray(pts, dtype=float)
    out = np.empty(len(pts))
    for k, (pu, pv) in enumerate(pts):
        out[k] = np.sqrt(((eu - pu) ** 2 + (ev - pv) ** 2).min())
    return out


@dataclass(eq=False)
class RefineResult:
    u0: float
    v0: float
    lambda1: float
    lambda2: float
    psi: float
    rms: float
    iterations: int
    converged: bool


def refine_ellipse(pts, lambda2: float, init=None, max_iter: int = 50, tol: float = 1e-6,
                   max_residual: float | None = None, free_center: bool = False) -> RefineResult:
    """Geometric-distance fit with centre column and minor semi-axis fixed.

    ``pts`` are (u, v) isotropic-pixel points; the horizontal centre is the
    midpoint of the extreme points and the free parameters (v0, lambda1, psi) are
    solved by Levenberg-Marquardt with lambda1 = lambda2 + exp(s).
    ``init`` is an optional (v0, lambda1, psi) guess. With ``free_center`` the
    converged fit is polished once more with the centre column released, which
    removes the up to one-column bias of the extreme-point midpoint.
    """
    pts = np.asarray(pts, dtype=float)
    if len(pts) < 3:
        raise NonConvergence("too few points to refine")
    u0 = 0.5 * (pts[:, 0].min() + pts[:, 0].max())
    inits = []
    if init is not None:
        inits.append(init)
    inits.append(_extreme_point_init(pts, u0, lambda2))
    best = None
    good_rms = 0.5 * max_residual if max_residual is not None else math.inf
    for v0, l1, psi in inits:
        if not all(map(math.isfinite, (v0, l1, psi))):
            continue
        res = _lm_fit(pts, u0, lambda2, v0, l1, psi, max_iter, tol)
        if best is None or res.rms < best.rms:
            best = res
        if best.converged and best.rms < good_rms:
            break
    if best is None:
        raise NonConvergence("no usable initial guess")
    if free_center and best.converged:
        polished = _lm_fit(pts, u0, lambda2, best.v0, best.lambda1, best.psi, max_iter, tol, free_u=True)
        # the released column must stay within a few pixels of the extreme-point midpoint
        if polished.converged and abs(polished.u0 - u0) <= 4.0 and polished.rms <= best.rms:
            best = polished
    if max_residual is not None and best.rms > max_residual:
        raise NonConvergence(f"refinement residual {best.rms:.3g} px above bound {max_residual}")
    if not best.converged and max_residual is None:
        raise NonConvergence(f"no convergence after {max_iter} iterations")
    return best


def _extreme_point_init(pts, u0, lambda2):
    """Initial (v0, lambda1, psi) from horizontal extent and the topmost point."""
    il, ir = np.argmin(pts[:, 0]), np.argmax(pts[:, 0])
    half_w = 0.5 * (pts[ir, 0] - pts[il, 0])
    v0 = 0.5 * (pts[il, 1] + pts[ir, 1])
    half_h = max(v0 - pts[:, 1].min(), 1e-6)
    l1 = math.sqrt(max(half_w**2 + half_h**2 - lambda2**2, (1.05 * lambda2) ** 2))
    s2 = (half_w**2 - lambda2**2) / max(l1**2 - lambda2**2, 1e-12)
    psi = math.asin(math.sqrt(min(1.0, max(0.0, s2))))
    # the rightmost point sits below the centre when the major axis leans right-down
    if pts[ir, 1] < pts[il, 1]:
        psi = -psi
    return v0, l1, psi


def _lm_fit(pts, u0, lambda2, v0, l1, psi, max_iter, tol, free_u=False):
    s_max = math.log(100.0 * lambda2)      # ratios below 1/100 are not physical here
    s = min(math.log(max(l1 - lambda2, 1e-3 * lambda2)), s_max)
    # parameter order (v0, s, psi[, u0])
    p = np.array([v0, s, psi, u0] if free_u else [v0, s, psi])

    def evaluate(p, t0=None):
        l1 = lambda2 + math.exp(p[1])
        r, t = ellipse_point_distance(pts, p[3] if free_u else u0, p[0], l1, lambda2, p[2], t0)
        return r, t, l1

    r, t, l1 = evaluate(p)
    cost = float(r @ r)
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sp, cp = math.sin(p[2]), math.cos(p[2])
        d = np.array([sp, cp])
        dperp = np.array([cp, -sp])
        ct, st = np.cos(t), np.sin(t)
        nl = np.column_stack([ct / l1, st / lambda2])
        nl /= np.linalg.norm(nl, axis=1, keepdims=True)
        nrm = nl[:, :1] * d + nl[:, 1:] * dperp            # outward normal, world frame
        dx_dv0 = np.array([0.0, 1.0])
        dx_ds = (math.exp(p[1]) * ct)[:, None] * d
        dx_dpsi = (l1 * ct)[:, None] * dperp - (lambda2 * st)[:, None] * d
        cols = [nrm @ dx_dv0, (nrm * dx_ds).sum(1), (nrm * dx_dpsi).sum(1)]
        if free_u:
            cols.append(nrm[:, 0])
        jac = -np.column_stack(cols)
        jtj = jac.T @ jac
        g = jac.T @ r
        while True:
            a = jtj + mu * np.diag(np.diag(jtj) + 1e-12)
            try:
                step = -np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                step = -g * 1e-3
            pn = p + step
            pn[1] = min(pn[1], s_max)
            rn, tn, l1n = evaluate(pn, t)
            cn = float(rn @ rn)
            if cn <= cost or mu > 1e10:
                break
            mu *= 10
        if cn <= cost:
            p, r, t, l1, cost = pn, rn, tn, l1n, cn
            mu = max(mu / 10, 1e-12)
        if np.linalg.norm(step) < tol:
            converged = True
            break
    rms = math.sqrt(cost / len(pts))
    return RefineResult(float(p[3]) if free_u else u0, float(p[0]), l1, lambda2, float(p[2]), rms, it,
                        converged)


# --- pipeline -----------------------------------------------------------------

def detect(img, cfg: DetectConfig = DetectConfig(), rng=None, plane: ScanPlane | None = None,
           force_fail: bool = False) -> DetectionResult:
    """Run candidate extraction, tissue fit, filtering and ellipse fitting on one B-scan.

    ``img`` is a :class:`~needletrack.synth.BScanImage` or a bare pixel array (then
    ``plane`` supplies the pixel spacing). Failures return an empty detection with
    the reason in ``diagnostics['failure']``.
    """
    pixels = getattr(img, "pixels", img)
    plane = getattr(img, "plane", plane)
    aspect = plane.aspect if plane is not None else 1.0
    row_um = plane.px_spacing_row if plane is not None else 2.5
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    nr, nc = pixels.shape
    diag: dict = {}
    empty2 = np.zeros((0, 2))

    cands = candidate_points(pixels)
    try:
        fit = fit_tissue(cands, cfg.tissue_model, cfg, rng)
    except InsufficientSupport as exc:
        diag["failure"] = f"tissue: {exc}"
        return DetectionResult(None, empty2, empty2, cands, diag)
    cols = cands.cols
    eye = np.column_stack([cols[fit.inliers], cands.rows[fit.inliers]]).astype(float)
    cands.labels[fit.inliers] = EYE

    d_raw, d_filt = filtered_height(cands, fit, cfg.kernel)
    tool_cols = np.flatnonzero(d_filt > cfg.d_min)
    uv = np.column_stack([cols * aspect, cands.rows.astype(float)])
    if cfg.pathology and tool_cols.size:
        seed_mask = (d_filt <= cfg.d_min) & (d_raw <= cfg.d_min)
        keep = exclude_pathology(uv[tool_cols], uv[seed_mask], cfg.d_min)
        cands.labels[tool_cols[~keep]] = EXCLUDED
        diag["pathology_excluded"] = int((~keep).sum())
        tool_cols = tool_cols[keep]
    cands.labels[tool_cols] = TOOL
    diag["tool_candidates"] = int(tool_cols.size)
    if force_fail:
        diag["failure"] = "forced"
        return DetectionResult(None, empty2, eye, cands, diag)

    pts = uv[tool_cols]
    try:
        conic, inl = ransac_ellipse(pts, cfg, rng)
        inliers = pts[inl]
        lambda2 = 0.5 * cfg.needle_diameter_mm * 1e3 / row_um
        try:
            cu, cv, ca, cb, cpsi = conic.geometric()
            init = (cv, max(ca, lambda2 * 1.001), cpsi)
        except NoEllipseFound:
            init = None
        res = refine_ellipse(inliers, lambda2, init, cfg.refine_max_iter, cfg.refine_tol,
                             cfg.max_residual, cfg.free_center)
    except (NoEllipseFound, NonConvergence) as exc:
        diag["failure"] = f"{type(exc).__name__}: {exc}"
        return DetectionResult(None, empty2, eye, cands, diag)

    diag.update(n_inliers=int(inl.sum()), residual=res.rms, refine_iterations=res.iterations)
    ellipse = EllipseParams(float(res.u0 / aspect), float(res.v0), float(res.lambda1),
                            float(res.lambda2), fold_alpha(res.psi))
    if (ellipse.center_col < -ellipse.lambda1 / aspect or ellipse.center_col > nc - 1 + ellipse.lambda1 / aspect
            or ellipse.center_row < -ellipse.lambda1 or ellipse.center_row > nr - 1 + ellipse.lambda1):
        diag["failure"] = "ellipse centre outside image"
        return DetectionResult(None, empty2, eye, cands, diag)
    diag["psi"] = res.psi - math.pi * math.floor(res.psi / math.pi + 0.5)
    tool = np.column_stack([inliers[:, 0] / aspect, inliers[:, 1]])
    return DetectionResult(ellipse, tool, eye, cands, diag)


def detection_to_json(frame_idx: int, det: DetectionResult, elapsed_ms: float | None = None) -> dict:
    e = det.ellipse
    out = {"frame_idx": frame_idx, "found": e is not None,
           "C_x": e.center_col if e else None, "C_y": e.center_row if e else None,
           "lambda1": e.lambda1 if e else None, "lambda2": e.lambda2 if e else None,
           "alpha_rad": e.alpha if e else None,
           "n_inliers": det.diagnostics.get("n_inliers", 0),
           "residual": det.diagnostics.get("residual")}
    if elapsed_ms is not None:
        out["elapsed_ms"] = elapsed_ms
    return out


def with_overrides(cfg: DetectConfig, **kw) -> DetectConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
