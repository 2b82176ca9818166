"""TOML run configuration: scene, scan pattern, detection and filter settings."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import ekf
from .detect import DetectConfig
from .geometry import ToolAxis
from .synth import Bump, MotionScript, NoiseConfig, ScanPattern, SceneTruth, TissueModel
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


CANNED = ("lateral-sweep", "z-rotation", "cross-pattern", "empty-scene", "pathology", "dropout")

_SECTIONS = {
    "": {"seed", "duration_s", "frames", "needle", "tissue", "pattern", "motion", "noise",
         "detect", "filter"},
    "needle": {"radius_mm", "thickness_px"},
    "tissue": {"kind", "circle", "poly4", "bumps", "reflectivity", "thickness_px", "subsurface_px"},
    "pattern": {"kind", "count", "spacing_mm", "angle_deg", "a_scan_rate_hz", "a_scans_per_bscan",
                "n_rows", "n_cols", "px_spacing_um"},
    "motion": {"times_s", "x_mm", "theta_deg", "phi_deg"},
    "noise": {"speckle_sigma", "gaussian_sigma", "salt_rate"},
    "detect": {"tissue_model", "tissue_threshold_px", "tissue_iterations", "min_tissue_support",
               "d_min_px", "kernel_px", "pathology", "ellipse_threshold_px", "ellipse_iterations",
               "min_ellipse_inliers", "ransac_confidence", "needle_diameter_mm", "max_residual_px",
               "free_center"},
    "filter": {"sigma_ax", "sigma_atheta_deg", "sigma_aphi_deg", "R_sigma", "gate", "init_window",
               "init_min_separation_mm", "baseline_min_separation_mm", "drop_planes"},
}


@dataclass(frozen=True, eq=False)
class RunConfig:
    seed: int = 0
    duration_s: float = 5.0
    truth: SceneTruth | None = None
    pattern: ScanPattern = field(default_factory=ScanPattern.parallel)
    detect: DetectConfig = field(default_factory=DetectConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    source: str = "<defaults>"

    def with_seed(self, seed: int) -> RunConfig:
        truth = self.truth
        if truth is not None:
            truth = replace(truth, noise=replace(truth.noise, seed=seed))
        det = replace(self.detect, seed=seed)
        return replace(self, seed=seed, truth=truth, detect=det,
                       tracker=replace(self.tracker, detect=det, seed=seed))

    def with_pathology(self, on: bool = True) -> RunConfig:
        det = replace(self.detect, pathology=on)
        return replace(self, detect=det, tracker=replace(self.tracker, detect=det))

    def with_frames(self, n: int) -> RunConfig:
        if n <= 0:
            raise ConfigError("frames must be positive")
        return replace(self, duration_s=n * self.pattern.period)


def resolve_path(name_or_path) -> Path | None:
    """A filesystem path, or the bundled config of that name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    if str(name_or_path) in CANNED:
        return Path(str(resources.files("needletrack") / "configs" / f"{name_or_path}.toml"))
    return None


def load_config(name_or_path) -> RunConfig:
    path = resolve_path(name_or_path)
    if path is None:
        raise ConfigError(f"config {name_or_path!r} is neither a file nor one of {', '.join(CANNED)}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    try:
        return _build(data, source)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _check_keys(section: str, d: dict, source: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: [{section}] must be a table")
    unknown = set(d) - _SECTIONS[section]
    if unknown:
        where = f"[{section}]" if section else "top level"
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)} in {where}")


class _Section:
    """Typed accessor that reports the offending key on failure."""

    def __init__(self, name, d, source):
        self.name, self.d, self.source = name, d, source

    def _err(self, key, msg):
        where = f"{self.name}.{key}" if self.name else key
        return ConfigError(f"{self.source}: {where}: {msg}")

    def num(self, key, default, lo=-math.inf, hi=math.inf, integer=False, lo_open=False):
        v = self.d.get(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self._err(key, f"expected a number, got {v!r}")
        if integer and not float(v).is_integer():
            raise self._err(key, f"expected an integer, got {v!r}")
        if v < lo or v > hi or (lo_open and v == lo):
            bound = f"({lo}, {hi}]" if lo_open else f"[{lo}, {hi}]"
            raise self._err(key, f"{v!r} outside valid range {bound}")
        return int(v) if integer else float(v)

    def flag(self, key, default):
        v = self.d.get(key, default)
        if not isinstance(v, bool):
            raise self._err(key, f"expected true/false, got {v!r}")
        return v

    def choice(self, key, default, options):
        v = self.d.get(key, default)
        if v not in options:
            raise self._err(key, f"expected one of {list(options)}, got {v!r}")
        return v

    def vec(self, key, default, length=None, value=None):
        v = self.d.get(key, default) if value is None else value
        try:
            a = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise self._err(key, f"expected a list of numbers, got {v!r}") from None
        if length is not None and a.shape != (length,):
            raise self._err(key, f"expected {length} numbers, got {v!r}")
        if not np.all(np.isfinite(a)):
            raise self._err(key, "values must be finite")
        return a


def _build(data: dict, source: str) -> RunConfig:
    _check_keys("", data, source)
    for name in _SECTIONS:
        if name and name in data:
            _check_keys(name, data[name], source)
    top = _Section("", data, source)
    seed = top.num("seed", 0, 0, 2**63 - 1, integer=True)
    duration = top.num("duration_s", 5.0, 0.0, 3600.0, lo_open=True)

    pat = _Section("pattern", data.get("pattern", {}), source)
    kind = pat.choice("kind", "parallel", ("parallel", "cross"))
    px = pat.vec("px_spacing_um", [5.0, 2.5], 2)
    if np.any(px <= 0):
        raise pat._err("px_spacing_um", "spacings must be positive")
    common = dict(n_rows=pat.num("n_rows", 1024, 16, 8192, integer=True),
                  n_cols=pat.num("n_cols", 1024, 16, 8192, integer=True),
                  px_um=tuple(px), angle=math.radians(pat.num("angle_deg", 0.0, -360, 360)),
                  a_scan_rate=pat.num("a_scan_rate_hz", 30000.0, 0.0, 1e7, lo_open=True),
                  a_scans_per_bscan=pat.num("a_scans_per_bscan", 1000, 1, 100000, integer=True))
    if kind == "parallel":
        pattern = ScanPattern.parallel(count=pat.num("count", 5, 1, 64, integer=True),
                                       spacing_mm=pat.num("spacing_mm", 0.25, 0.0, 100.0, lo_open=True),
                                       **common)
    else:
        for key in ("count", "spacing_mm"):
            if key in pat.d:
                raise pat._err(key, "not used by the cross pattern")
        pattern = ScanPattern.cross(**common)
    if "frames" in data:
        duration = top.num("frames", 1, 1, 10**7, integer=True) * pattern.period

    needle = _Section("needle", data.get("needle", {}), source)
    radius = needle.num("radius_mm", 0.205, 0.0, 10.0, lo_open=True)
    thickness = needle.num("thickness_px", 4, 1, 100, integer=True)

    tis = _Section("tissue", data.get("tissue", {}), source)
    bumps = []
    for k, b in enumerate(tis.d.get("bumps", [])):
        if not isinstance(b, dict) or set(b) != {"center_col", "width", "height"}:
            raise tis._err(f"bumps[{k}]", "expected {center_col, width, height}")
        bs = _Section(f"tissue.bumps[{k}]", b, source)
        bumps.append(Bump(bs.num("center_col", 0), bs.num("width", 1, 0, 1e4, lo_open=True),
                          bs.num("height", 0, -1e4, 1e4)))
    tissue = TissueModel(kind=tis.choice("kind", "circle", ("circle", "poly4")),
                         circle=tuple(tis.vec("circle", [512.0, 4800.0, 4000.0], 3)),
                         poly4=tuple(tis.vec("poly4", [800.0, 0, 0, 0, 0], 5)),
                         bumps=tuple(bumps),
                         reflectivity=tis.num("reflectivity", 150.0, 0, 255),
                         thickness=tis.num("thickness_px", 6, 1, 200, integer=True))
    subsurface = tis.num("subsurface_px", 60, 0, 2000, integer=True)
    rows = tissue.surface_row(np.arange(pattern.planes[0].n_cols))
    if np.any(rows < 0) or np.any(rows >= pattern.planes[0].n_rows):
        raise tis._err("kind", "tissue curve leaves the image rows")

    mot = _Section("motion", data.get("motion", {}), source)
    times = mot.vec("times_s", [0.0, duration])
    n = len(times)
    if n == 0 or np.any(np.diff(times) <= 0):
        raise mot._err("times_s", "keyframe times must be strictly increasing")
    xs = mot.vec("x_mm", [[0.0, 0.0, 1.0]] * n)
    if xs.ndim == 1 and xs.shape == (3,):
        xs = np.tile(xs, (n, 1))
    if xs.shape != (n, 3):
        raise mot._err("x_mm", f"expected {n} points of 3 coordinates")
    th = _broadcast(mot, "theta_deg", 70.0, n)
    ph = _broadcast(mot, "phi_deg", 65.0, n)
    motion = MotionScript(tuple(float(t) for t in times),
                          tuple(ToolAxis(x, math.radians(a), math.radians(b)) for x, a, b in zip(xs, th, ph)))

    nz = _Section("noise", data.get("noise", {}), source)
    noise = NoiseConfig(nz.num("speckle_sigma", 0.3, 0.0, 5.0), nz.num("gaussian_sigma", 8.0, 0.0, 255.0),
                        nz.num("salt_rate", 0.0, 0.0, 1.0), seed)
    truth = SceneTruth(motion, tissue, noise, radius, thickness, subsurface)

    dt = _Section("detect", data.get("detect", {}), source)
    det = DetectConfig(tissue_model=dt.choice("tissue_model", "circle", ("circle", "poly4")),
                       tissue_threshold=dt.num("tissue_threshold_px", 4.0, 0.0, 1000.0, lo_open=True),
                       tissue_iterations=dt.num("tissue_iterations", 200, 1, 100000, integer=True),
                       min_tissue_support=dt.num("min_tissue_support", 50, 3, 100000, integer=True),
                       d_min=dt.num("d_min_px", 20.0, 0.0, 10000.0, lo_open=True),
                       kernel=dt.num("kernel_px", 15, 1, 1001, integer=True),
                       pathology=dt.flag("pathology", False),
                       ellipse_threshold=dt.num("ellipse_threshold_px", 2.0, 0.0, 1000.0, lo_open=True),
                       ellipse_iterations=dt.num("ellipse_iterations", 500, 1, 100000, integer=True),
                       min_ellipse_inliers=dt.num("min_ellipse_inliers", 20, 6, 100000, integer=True),
                       ransac_confidence=dt.num("ransac_confidence", 0.999, 0.0, 0.999999999, lo_open=True),
                       needle_diameter_mm=dt.num("needle_diameter_mm", 2 * radius, 0.0, 20.0, lo_open=True),
                       max_residual=dt.num("max_residual_px", 3.0, 0.0, 1000.0, lo_open=True),
                       free_center=dt.flag("free_center", True),
                       seed=seed)
    if det.kernel % 2 == 0:
        raise dt._err("kernel_px", "must be odd")

    fl = _Section("filter", data.get("filter", {}), source)
    r_sigma = fl.vec("R_sigma", np.sqrt(np.diag(ekf.default_R())), 5)
    if np.any(r_sigma <= 0):
        raise fl._err("R_sigma", "standard deviations must be positive")
    noise_cfg = ekf.NoiseConfig(fl.num("sigma_ax", 3.0, 0.0, 1e4, lo_open=True),
                                math.radians(fl.num("sigma_atheta_deg", 60.0, 0.0, 1e5, lo_open=True)),
                                math.radians(fl.num("sigma_aphi_deg", 60.0, 0.0, 1e5, lo_open=True)),
                                np.diag(r_sigma**2))
    drops = fl.d.get("drop_planes", [])
    if not isinstance(drops, list) or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 0
                                              for k in drops):
        raise fl._err("drop_planes", "expected a list of non-negative plane indices")
    trk = TrackerConfig(detect=det, noise=noise_cfg,
                        init_window=fl.num("init_window", 2, 2, 1000, integer=True),
                        init_min_separation_mm=fl.num("init_min_separation_mm", 1e-3, 0.0, 100.0, lo_open=True),
                        baseline_min_separation_mm=fl.num("baseline_min_separation_mm", 1e-3, 0.0, 100.0,
                                                          lo_open=True),
                        gate=fl.flag("gate", False), drop_planes=tuple(drops), seed=seed)
    return RunConfig(seed, duration, truth, pattern, det, trk, source)


def _broadcast(sec: _Section, key, default, n):
    v = sec.d.get(key, default)
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v] * n
    a = sec.vec(key, None, value=v)
    if a.shape != (n,):
        raise sec._err(key, f"expected {n} values (one per keyframe) or a single number")
    return a
