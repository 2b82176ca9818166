"""Shared builders for the test modules."""

import math

import numpy as np

from needletrack.ekf import pack_state
from needletrack.geometry import ScanPlane, ToolAxis, direction
from needletrack.synth import MotionScript, NoiseConfig, SceneTruth

# one summary line per acceptance criterion, printed at the end of the pytest run
ACCEPTANCE_LINES: list[str] = []


def random_vertical_plane(rng) -> ScanPlane:
    a = rng.uniform(0, 2 * math.pi)
    origin = rng.uniform(-1, 1, 3)
    return ScanPlane(origin, [math.cos(a), math.sin(a), 0.0])


def axis_with_ndotl(plane: ScanPlane, theta: float, ndotl: float, base=(0.2, 0.0, 1.0)) -> ToolAxis:
    """Axis with polar angle ``theta`` whose direction has n.l = ndotl on ``plane``."""
    n = plane.normal
    psi = math.atan2(n[1], n[0])
    phi = psi + math.acos(ndotl / math.sin(theta))
    return ToolAxis(np.asarray(base, float), theta, phi)


def static_truth(axis, noise=None, **kw) -> SceneTruth:
    return SceneTruth(MotionScript.static(axis), noise=noise or NoiseConfig.noise_free(), **kw)


def central_difference(f, s, h=1e-6):
    s = np.asarray(s, float)
    cols = []
    for k in range(s.size):
        e = np.zeros_like(s)
        e[k] = h
        cols.append((f(s + e) - f(s - e)) / (2 * h))
    return np.column_stack(cols)


def random_state(rng, plane, dt):
    """A state with sin(theta) > 0.05 and |l.n| > 0.05 both now and after ``dt`` of motion."""
    while True:
        s = pack_state(rng.uniform(-1, 1, 3), rng.uniform(0.05, math.pi - 0.05), rng.uniform(-math.pi, math.pi),
                       rng.normal(0, 1, 3), rng.normal(0, 0.5), rng.normal(0, 0.5))
        ok = True
        for t in (0.0, dt):
            th, ph = s[3] + t * s[8], s[4] + t * s[9]
            if math.sin(th) <= 0.05 or abs(direction(th, ph) @ plane.normal) <= 0.05:
                ok = False
        if ok:
            return s


def relative_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))
