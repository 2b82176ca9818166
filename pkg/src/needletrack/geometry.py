"""Coordinate conventions, scan planes, tool axes and the cylinder/plane ellipse relations.

World frame: x is the horizontal galvo deflection, y the vertical deflection and
z the A-scan (depth) direction, increasing with the image row index. Lengths are
in millimetres, pixel spacings in micrometres.

Ellipses are expressed in an isotropic pixel frame: rows are kept as-is and
columns are rescaled by ``px_spacing_col / px_spacing_row`` so that angles and
distances are metric. Semi-axis lengths are therefore given in row pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS_PARALLEL = 1e-6
Z_AXIS = np.array([0.0, 0.0, 1.0])


class GeometryError(ValueError):
    pass


class ParallelLinePlane(GeometryError):
    """The tool axis is (numerically) parallel to the scan plane."""


def _unit(v, name="vector") -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0.0:
        raise GeometryError(f"{name} must be a finite non-zero 3-vector")
    return v / norm


def direction(theta: float, phi: float) -> np.ndarray:
    """Unit direction of an axis with angle ``theta`` from +z and azimuth ``phi``."""
    st = math.sin(theta)
    return np.array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)])


def angles_from_direction(l, prefer=None) -> tuple[float, float]:
    """Return (theta, phi) of the undirected line through ``l``.

    The sign of ``l`` is chosen to have a positive component along ``prefer``
    when given, otherwise to point into the +z hemisphere.
    """
    l = _unit(l, "direction")
    ref = Z_AXIS if prefer is None else np.asarray(prefer, dtype=float)
    if np.dot(l, ref) < 0.0:
        l = -l
    theta = math.acos(max(-1.0, min(1.0, l[2])))
    phi = math.atan2(l[1], l[0])
    return theta, phi


@dataclass(frozen=True, eq=False)
class ToolAxis:
    """Infinite needle centre line ``x + tau * l(theta, phi)``."""

    x: np.ndarray
    theta: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "phi", float(self.phi))

    @property
    def l(self) -> np.ndarray:
        return direction(self.theta, self.phi)

    @classmethod
    def from_points(cls, a, b, prefer=None) -> ToolAxis:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        theta, phi = angles_from_direction(b - a, prefer)
        return cls(b, theta, phi)


@dataclass(frozen=True, eq=False)
class ScanPlane:
    """Placement of one B-scan in 3D.

    ``origin`` is the world position of pixel (row 0, col 0). Pixel centres sit
    at integer (col, row) coordinates.
    """

    origin: np.ndarray
    col_dir: np.ndarray
    row_dir: np.ndarray = field(default_factory=lambda: Z_AXIS.copy())
    px_spacing_col: float = 5.0
    px_spacing_row: float = 2.5
    n_rows: int = 1024
    n_cols: int = 1024
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        col = _unit(self.col_dir, "col_dir")
        row = _unit(self.row_dir, "row_dir")
        if abs(np.dot(col, row)) > 1e-6:
            raise GeometryError("col_dir and row_dir must be orthogonal")
        normal = np.cross(col, row)
        if abs(np.dot(normal, Z_AXIS)) > 1e-6:
            raise GeometryError("scan planes must contain the A-scan (z) direction")
        object.__setattr__(self, "col_dir", col)
        object.__setattr__(self, "row_dir", row)
        object.__setattr__(self, "_normal", normal / np.linalg.norm(normal))
        if self.px_spacing_col <= 0 or self.px_spacing_row <= 0:
            raise GeometryError("pixel spacings must be positive")

    @property
    def normal(self) -> np.ndarray:
        return self._normal

    @property
    def aspect(self) -> float:
        """Column spacing expressed in row pixels."""
        return self.px_spacing_col / self.px_spacing_row

    def with_timestamp(self, t: float) -> ScanPlane:
        return ScanPlane(self.origin, self.col_dir, self.row_dir, self.px_spacing_col,
                         self.px_spacing_row, self.n_rows, self.n_cols, float(t))

    def pixel_to_3d(self, col, row) -> np.ndarray:
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        sc = self.px_spacing_col * 1e-3
        sr = self.px_spacing_row * 1e-3
        return (self.origin
                + (col * sc)[..., None] * self.col_dir
                + (row * sr)[..., None] * self.row_dir)

    def point_to_pixel(self, q) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of :meth:`pixel_to_3d` after orthogonal projection onto the plane."""
        d = np.asarray(q, dtype=float) - self.origin
        col = (d @ self.col_dir) / (self.px_spacing_col * 1e-3)
        row = (d @ self.row_dir) / (self.px_spacing_row * 1e-3)
        return col, row

    def signed_distance(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=float) - self.origin) @ self.normal


def pixel_to_3d(plane: ScanPlane, col, row) -> np.ndarray:
    return plane.pixel_to_3d(col, row)


def point_to_pixel(plane: ScanPlane, q):
    return plane.point_to_pixel(q)


@dataclass(frozen=True)
class EllipseParams:
    """Needle cross-section in one B-scan.

    Centre in raw pixel indices; semi-axes in row pixels; ``alpha`` is the unsigned
    angle between the major axis and the A-scan direction, in [0, pi/2].
    """

    center_col: float
    center_row: float
    lambda1: float
    lambda2: float
    alpha: float

    def __post_init__(self):
        if not (self.lambda1 >= self.lambda2 > 0):
            raise GeometryError(f"need lambda1 >= lambda2 > 0, got {self.lambda1}, {self.lambda2}")
        if not (0.0 <= self.alpha <= math.pi / 2 + 1e-12):
            raise GeometryError(f"alpha out of [0, pi/2]: {self.alpha}")

    @property
    def ratio(self) -> float:
        return self.lambda2 / self.lambda1


def fold_alpha(psi: float) -> float:
    """Unsigned line-to-line angle in [0, pi/2] for an axis orientation ``psi``."""
    a = abs(math.remainder(psi, math.pi))
    return min(a, math.pi / 2)


def line_plane_intersect(axis: ToolAxis, plane: ScanPlane, eps: float = EPS_PARALLEL) -> np.ndarray:
    l = axis.l
    n = plane.normal
    denom = float(l @ n)
    if abs(denom) <= eps:
        raise ParallelLinePlane(f"|l.n| = {abs(denom):.3g} <= {eps}")
    tau = float((plane.origin - axis.x) @ n) / denom
    return axis.x + tau * l


@dataclass(frozen=True, eq=False)
class CrossSection:
    """Signed cross-section geometry in the isotropic pixel frame (u = scaled col, v = row)."""

    center_col: float
    center_row: float
    semi_major: float
    semi_minor: float
    major_dir: np.ndarray  # unit (du, dv)
    center3d: np.ndarray


def cross_section(axis: ToolAxis, radius: float, plane: ScanPlane) -> CrossSection:
    c3 = line_plane_intersect(axis, plane)
    col, row = plane.point_to_pixel(c3)
    l = axis.l
    n = plane.normal
    ndl = abs(float(l @ n))
    minor = radius / (plane.px_spacing_row * 1e-3)
    major = minor / ndl
    proj = l - (l @ n) * n
    pnorm = np.linalg.norm(proj)
    if pnorm < 1e-9:
        # circular section: orientation is arbitrary, take the A-scan direction
        d = np.array([0.0, 1.0])
    else:
        d = np.array([proj @ plane.col_dir, proj @ plane.row_dir]) / pnorm
    return CrossSection(float(col), float(row), float(major), float(minor), d, c3)


def ellipse_from_cylinder(axis: ToolAxis, radius: float, plane: ScanPlane) -> EllipseParams:
    """Forward model: ellipse cut from a cylinder of ``radius`` mm by the scan plane."""
    cs = cross_section(axis, radius, plane)
    alpha = math.acos(min(1.0, abs(float(cs.major_dir[1]))))
    return EllipseParams(cs.center_col, cs.center_row, max(cs.semi_major, cs.semi_minor),
                         cs.semi_minor, alpha)


@dataclass(frozen=True, eq=False)
class AxisConstraints:
    cos_theta_abs: float
    n_dot_l_abs: float
    center3d: np.ndarray


def axis_constraints_from_ellipse(e: EllipseParams, plane: ScanPlane) -> AxisConstraints:
    """Unsigned |cos(theta)| and |n.l| of the axis, and the 3D centre, from one ellipse.

    The in-plane projection of l has length sqrt(1 - (n.l)^2), so the cosine of the
    major-axis angle to z is rescaled by that length to give cos(theta).
    """
    ratio = e.lambda2 / e.lambda1
    cos_theta = math.cos(e.alpha) * math.sqrt(max(0.0, 1.0 - ratio * ratio))
    return AxisConstraints(min(1.0, cos_theta), ratio, plane.pixel_to_3d(e.center_col, e.center_row))


def line_line_distance(a0, da, b0, db) -> float:
    """Closest distance between two infinite lines given by point and direction."""
    a0, da, b0, db = (np.asarray(v, dtype=float) for v in (a0, da, b0, db))
    cr = np.cross(da, db)
    w = b0 - a0
    nc = np.linalg.norm(cr)
    if nc < 1e-12:
        du = da / np.linalg.norm(da)
        return float(np.linalg.norm(w - (w @ du) * du))
    return float(abs(w @ cr) / nc)


def point_line_distance(q, x0, d) -> float:
    q, x0, d = (np.asarray(v, dtype=float) for v in (q, x0, d))
    d = d / np.linalg.norm(d)
    w = q - x0
    return float(np.linalg.norm(w - (w @ d) * d))


def axis_angle_error(l_est, l_true) -> float:
    """Angle in radians between two undirected lines."""
    c = abs(float(np.dot(_unit(l_est), _unit(l_true))))
    return math.acos(min(1.0, c))
