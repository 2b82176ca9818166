"""Latency-aware extended Kalman filter for the needle axis.

State (10): base point x (mm), angles theta, phi (rad), and their rates.
Every prediction propagates a constant-velocity model and then slides the base
point along the predicted axis onto the plane of the next B-scan, so the
measured ellipse centre observes the base point directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from .geometry import EPS_PARALLEL, EllipseParams, ScanPlane, ToolAxis, axis_constraints_from_ellipse, direction

EPS_SING = 1e-3
IX = slice(0, 3)
ITH, IPH = 3, 4
IV = slice(5, 8)


class FilterError(RuntimeError):
    pass


class SingularityDeferred(FilterError):
    """Prediction is too close to a parametrisation singularity; skip this frame."""


class NumericalFailure(FilterError):
    pass


class DegenerateInit(FilterError):
    pass


@dataclass(frozen=True, eq=False)
class ControlInput:
    n: np.ndarray
    p: np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "n", np.asarray(self.n, dtype=float))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))

    @classmethod
    def from_plane(cls, plane: ScanPlane, dt: float) -> ControlInput:
        return cls(plane.normal, plane.origin, dt)


def default_R() -> np.ndarray:
    """Diagonal R from the static-needle calibration on default-noise synthetic frames
    (centre 5 um, cos(theta) 0.02, ratio 0.008 standard deviations)."""
    return np.diag([0.005**2] * 3 + [0.02**2, 0.008**2])


@dataclass(frozen=True, eq=False)
class NoiseConfig:
    sigma_ax: float = 3.0                       # mm/s^2
    sigma_atheta: float = math.radians(60.0)    # rad/s^2
    sigma_aphi: float = math.radians(60.0)
    R: np.ndarray = field(default_factory=default_R)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if R.shape != (5, 5):
            raise ValueError("R must be 5x5")
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        if min(self.sigma_ax, self.sigma_atheta, self.sigma_aphi) <= 0:
            raise ValueError("acceleration sigmas must be positive")
        object.__setattr__(self, "R", R)


@dataclass(eq=False)
class Belief:
    state: np.ndarray
    P: np.ndarray

    def copy(self) -> Belief:
        return Belief(self.state.copy(), self.P.copy())

    @property
    def axis(self) -> ToolAxis:
        return ToolAxis(self.state[IX], self.state[ITH], self.state[IPH])


def pack_state(x, theta, phi, xdot=(0, 0, 0), thetadot=0.0, phidot=0.0) -> np.ndarray:
    return np.concatenate([np.asarray(x, float), [theta, phi], np.asarray(xdot, float),
                           [thetadot, phidot]])


def _dl(theta, phi):
    st, ct, sp, cp = math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)
    l = np.array([st * cp, st * sp, ct])
    l_th = np.array([ct * cp, ct * sp, -st])
    l_ph = np.array([-st * sp, st * cp, 0.0])
    return l, l_th, l_ph


def _cv_matrix(dt):
    A = np.eye(10)
    A[:5, 5:] = dt * np.eye(5)
    return A


def noise_gain(dt) -> np.ndarray:
    """Maps the 5 accelerations to the additive state noise w."""
    G = np.zeros((10, 5))
    G[:5] = 0.5 * dt * dt * np.eye(5)
    G[5:] = dt * np.eye(5)
    return G


def process_noise(dt, noise: NoiseConfig) -> np.ndarray:
    G = noise_gain(dt)
    sig = np.array([noise.sigma_ax] * 3 + [noise.sigma_atheta, noise.sigma_aphi])
    return G @ np.diag(sig**2) @ G.T


def _rebase(y, n, p, eps_par):
    """Intersect the line of preliminary state ``y`` with plane (p, n); returns state and Jacobian."""
    l, l_th, l_ph = _dl(y[ITH], y[IPH])
    ln = float(l @ n)
    if abs(ln) <= eps_par:
        raise SingularityDeferred(f"axis parallel to next plane (|l.n| = {abs(ln):.2e})")
    k = float((p - y[IX]) @ n) / ln
    out = y.copy()
    out[IX] = y[IX] + k * l
    J = np.eye(10)
    J[IX, IX] = np.eye(3) - np.outer(l, n) / ln
    J[IX, ITH] = k * (l_th - l * float(n @ l_th) / ln)
    J[IX, IPH] = k * (l_ph - l * float(n @ l_ph) / ln)
    return out, J


def transition(s, u: ControlInput, w=None, eps_par: float = EPS_PARALLEL) -> np.ndarray:
    """State transition f(s, u, w) without angle folding."""
    y = _cv_matrix(u.dt) @ np.asarray(s, dtype=float)
    if w is not None:
        y = y + w
    return _rebase(y, u.n, u.p, eps_par)[0]


def transition_jacobians(s, u: ControlInput, eps_par: float = EPS_PARALLEL):
    """(F, L): derivatives of ``transition`` w.r.t. the state and the additive noise at w = 0."""
    A = _cv_matrix(u.dt)
    _, J = _rebase(A @ np.asarray(s, dtype=float), u.n, u.p, eps_par)
    return J @ A, J


def fold_state(s: np.ndarray, P: np.ndarray | None = None):
    """Keep theta in (0, pi) and phi in [-pi, pi); the represented line is unchanged."""
    s = s.copy()
    th = math.remainder(s[ITH], 2 * math.pi)
    flip = th < 0
    if flip:
        th = -th
        s[IPH] += math.pi
        s[8] = -s[8]
    s[ITH] = th
    s[IPH] = (s[IPH] + math.pi) % (2 * math.pi) - math.pi
    if P is not None and flip:
        d = np.ones(10)
        d[ITH] = d[8] = -1.0
        P = P * np.outer(d, d)
    return s, P


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _clip_psd(P):
    w, v = np.linalg.eigh(_symmetrize(P))
    if w.min() >= 0:
        return _symmetrize(P)
    return _symmetrize((v * np.clip(w, 0.0, None)) @ v.T)


def predict(b: Belief, u: ControlInput, noise: NoiseConfig = NoiseConfig(),
            eps_par: float = EPS_PARALLEL, eps_sing: float = EPS_SING) -> Belief:
    A = _cv_matrix(u.dt)
    y = A @ b.state
    if abs(math.sin(y[ITH])) <= eps_sing:
        raise SingularityDeferred(f"axis parallel to the A-scan direction (sin theta = {math.sin(y[ITH]):.2e})")
    s, J = _rebase(y, u.n, u.p, eps_par)
    F = J @ A
    P = F @ b.P @ F.T + J @ process_noise(u.dt, noise) @ J.T
    s, P = fold_state(s, P)
    return Belief(s, _symmetrize(P))


def measurement_model(s, plane_or_normal) -> np.ndarray:
    """h(s) = (x, cos theta, n . l)."""
    n = getattr(plane_or_normal, "normal", plane_or_normal)
    s = np.asarray(s, dtype=float)
    l = direction(s[ITH], s[IPH])
    return np.concatenate([s[IX], [math.cos(s[ITH]), float(l @ n)]])


def measurement_jacobian(s, plane_or_normal) -> np.ndarray:
    n = getattr(plane_or_normal, "normal", plane_or_normal)
    _, l_th, l_ph = _dl(s[ITH], s[IPH])
    H = np.zeros((5, 10))
    H[:3, :3] = np.eye(3)
    H[3, ITH] = -math.sin(s[ITH])
    H[4, ITH] = float(n @ l_th)
    H[4, IPH] = float(n @ l_ph)
    return H


def sign_resolve(e: EllipseParams, plane: ScanPlane, predicted: np.ndarray) -> np.ndarray:
    """Measurement vector with the unsigned shape cues signed like the prediction."""
    c = axis_constraints_from_ellipse(e, plane)
    h = measurement_model(predicted, plane)
    return np.concatenate([c.center3d, [math.copysign(c.cos_theta_abs, h[3]),
                                        math.copysign(c.n_dot_l_abs, h[4])]])


@dataclass(eq=False)
class UpdateInfo:
    innovation: np.ndarray
    mahalanobis2: float
    gated: bool = False
    min_eig: float = math.nan      # smallest eigenvalue of the posterior P before PSD clipping


GATE_CHI2 = float(chi2.ppf(0.999, 5))


def update(b: Belief, z, plane, noise: NoiseConfig = NoiseConfig(), gate: bool = False):
    """EKF correction; returns (posterior, UpdateInfo). Gated measurements leave the belief unchanged."""
    z = np.asarray(z, dtype=float)
    H = measurement_jacobian(b.state, plane)
    y = z - measurement_model(b.state, plane)
    S = _symmetrize(H @ b.P @ H.T + noise.R)
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1e12:
        raise NumericalFailure("innovation covariance is singular")
    Sinv_y = np.linalg.solve(S, y)
    d2 = float(y @ Sinv_y)
    if gate and d2 > GATE_CHI2:
        return b.copy(), UpdateInfo(y, d2, True)
    K = np.linalg.solve(S, H @ b.P).T
    s = b.state + K @ y
    IKH = np.eye(10) - K @ H
    P = IKH @ b.P @ IKH.T + K @ noise.R @ K.T
    s, P = fold_state(s, P)
    min_eig = float(np.linalg.eigvalsh(_symmetrize(P)).min())
    return Belief(s, _clip_psd(P)), UpdateInfo(y, d2, min_eig=min_eig)


def initial_covariance(pos_var=0.5, ang_sd=math.radians(10.0), vel_sd=5.0,
                       angvel_sd=math.radians(30.0)) -> np.ndarray:
    return np.diag([pos_var] * 3 + [ang_sd**2] * 2 + [vel_sd**2] * 3 + [angvel_sd**2] * 2)


def initialize(detections, min_separation: float = 1e-3, P0=None) -> Belief:
    """Belief from the line through the 3D centres of the first two usable detections.

    ``detections`` is a sequence of (EllipseParams, ScanPlane); the base point is the
    most recent centre so that it already lies on the latest plane.
    """
    pts = [(plane.pixel_to_3d(e.center_col, e.center_row), plane) for e, plane in detections]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            a, pa = pts[i]
            c, pc = pts[j]
            same_plane = (abs(abs(pa.normal @ pc.normal) - 1) < 1e-9
                          and abs(pa.signed_distance(pc.origin)) < 1e-9)
            if same_plane or np.linalg.norm(c - a) <= min_separation:
                continue
            axis = ToolAxis.from_points(a, c)
            s = pack_state(c, axis.theta, axis.phi)
            return Belief(s, initial_covariance() if P0 is None else np.array(P0, dtype=float))
    raise DegenerateInit("need two detections on distinct planes with separated centres")


def nees(err: np.ndarray, P: np.ndarray, rcond: float = 1e-10) -> tuple[float, int]:
    """Normalised estimation error squared and the rank used (pseudo-inverse on the support of P)."""
    w, v = np.linalg.eigh(_symmetrize(P))
    keep = w > rcond * w.max()
    proj = v[:, keep].T @ err
    return float(proj @ (proj / w[keep])), int(keep.sum())


def state_error(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    e = np.asarray(est, dtype=float) - np.asarray(truth, dtype=float)
    e[IPH] = math.remainder(e[IPH], 2 * math.pi)
    return e
