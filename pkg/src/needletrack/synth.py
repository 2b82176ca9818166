"""Synthetic B-scan sequences with exact ground truth.

A scene is an ideal cylinder (the needle) moving along a scripted path above a
single bright tissue layer. Only the upper surface of the needle is visible;
every pixel below it in the same A-scan is shadowed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ScanPlane, ToolAxis, ParallelLinePlane, cross_section

BACKGROUND = 10.0
NEEDLE_INTENSITY = 255.0


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Bump:
    """Gaussian elevation of the tissue surface (pixels)."""

    center_col: float
    width: float
    height: float


@dataclass(frozen=True)
class TissueModel:
    """Surface row as a function of column.

    ``circle`` is (center_col, center_row, radius) in pixel units and uses the
    upper branch; ``poly4`` holds a_0..a_4 of ``row = sum a_k col**k``.
    """

    kind: str = "circle"
    circle: tuple[float, float, float] = (512.0, 4800.0, 4000.0)
    poly4: tuple[float, ...] = (800.0, 0.0, 0.0, 0.0, 0.0)
    bumps: tuple[Bump, ...] = ()
    reflectivity: float = 150.0
    thickness: int = 6

    def __post_init__(self):
        if self.kind not in ("circle", "poly4"):
            raise ValueError(f"unknown tissue kind {self.kind!r}")
        if len(self.poly4) != 5:
            raise ValueError("poly4 needs exactly 5 coefficients")
        if self.kind == "circle" and self.circle[2] <= 0:
            raise ValueError("circle radius must be positive")

    def surface_row(self, cols) -> np.ndarray:
        c = np.asarray(cols, dtype=float)
        if self.kind == "circle":
            cx, cy, r = self.circle
            rows = cy - np.sqrt(np.clip(r * r - (c - cx) ** 2, 0.0, None))
        else:
            rows = np.polynomial.polynomial.polyval(c, self.poly4)
        for b in self.bumps:
            rows = rows - b.height * np.exp(-0.5 * ((c - b.center_col) / b.width) ** 2)
        return rows


@dataclass(frozen=True)
class MotionScript:
    times: tuple[float, ...]
    poses: tuple[ToolAxis, ...]

    def __post_init__(self):
        if len(self.times) != len(self.poses) or not self.times:
            raise ValueError("need one pose per keyframe time")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("keyframe times must be strictly increasing")

    @classmethod
    def static(cls, axis: ToolAxis, duration: float = 1e6) -> MotionScript:
        return cls((0.0, float(duration)), (axis, axis))

    def pose_at(self, t: float) -> ToolAxis:
        return pose_at(self, t)


def pose_at(script: MotionScript, t: float) -> ToolAxis:
    times = script.times
    tol = 1e-9
    if t < times[0] - tol or t > times[-1] + tol:
        raise OutOfRange(f"t={t} outside [{times[0]}, {times[-1]}]")
    if len(times) == 1:
        return script.poses[0]
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    t0, t1 = times[k], times[k + 1]
    w = min(1.0, max(0.0, (t - t0) / (t1 - t0)))
    a, b = script.poses[k], script.poses[k + 1]
    return ToolAxis((1 - w) * a.x + w * b.x,
                    (1 - w) * a.theta + w * b.theta,
                    (1 - w) * a.phi + w * b.phi)


@dataclass(frozen=True)
class ScanPattern:
    planes: tuple[ScanPlane, ...]
    a_scan_rate: float = 30000.0
    a_scans_per_bscan: int = 1000

    @property
    def period(self) -> float:
        return self.a_scans_per_bscan / self.a_scan_rate

    @classmethod
    def parallel(cls, count=5, spacing_mm=0.25, n_rows=1024, n_cols=1024,
                 px_um=(5.0, 2.5), angle=0.0, **kw) -> ScanPattern:
        """Stack of B-scans along y, each scanning along x, optionally rotated about z."""
        ys = (np.arange(count) - (count - 1) / 2) * spacing_mm
        return cls(tuple(_centered_plane(np.array([0.0, y, 0.0]), angle, n_rows, n_cols, px_um)
                         for y in ys), **kw)

    @classmethod
    def cross(cls, n_rows=1024, n_cols=1024, px_um=(5.0, 2.5), angle=0.0, **kw) -> ScanPattern:
        """Two perpendicular B-scans intersecting on the z axis."""
        c = np.zeros(3)
        return cls((_centered_plane(c, angle, n_rows, n_cols, px_um),
                    _centered_plane(c, angle + math.pi / 2, n_rows, n_cols, px_um)), **kw)


def _centered_plane(center, angle, n_rows, n_cols, px_um) -> ScanPlane:
    col_dir = np.array([math.cos(angle), math.sin(angle), 0.0])
    half = 0.5 * (n_cols - 1) * px_um[0] * 1e-3
    origin = np.asarray(center, dtype=float) - half * col_dir
    return ScanPlane(origin, col_dir, np.array([0.0, 0.0, 1.0]), px_um[0], px_um[1],
                     int(n_rows), int(n_cols))


@dataclass(frozen=True)
class Frame:
    index: int
    plane_index: int
    plane: ScanPlane

    @property
    def timestamp(self) -> float:
        return self.plane.timestamp


def schedule_frames(pattern: ScanPattern, duration: float) -> list[Frame]:
    """Frames every ``pattern.period`` seconds in [0, duration), cycling the planes."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    dt = pattern.period
    count = int(math.ceil(duration / dt - 1e-9))
    nplanes = len(pattern.planes)
    return [Frame(k, k % nplanes, pattern.planes[k % nplanes].with_timestamp(k * dt))
            for k in range(count)]


@dataclass(frozen=True)
class NoiseConfig:
    speckle_sigma: float = 0.3
    gaussian_sigma: float = 8.0
    salt_rate: float = 0.0
    seed: int = 0

    @classmethod
    def noise_free(cls, seed: int = 0) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class SceneTruth:
    motion: MotionScript
    tissue: TissueModel = field(default_factory=TissueModel)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    radius_mm: float = 0.205
    needle_thickness: int = 4
    subsurface_depth: int = 60

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("needle radius must be positive")


@dataclass(eq=False)
class BScanImage:
    pixels: np.ndarray  # (n_rows, n_cols) uint8
    plane: ScanPlane

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def needle_top_rows(truth: SceneTruth, plane: ScanPlane, axis: ToolAxis | None = None):
    """Row of the needle's upper surface at every column (NaN where absent)."""
    if axis is None:
        axis = truth.motion.pose_at(plane.timestamp)
    try:
        cs = cross_section(axis, truth.radius_mm, plane)
    except ParallelLinePlane:
        return np.full(plane.n_cols, np.nan)
    return ellipse_top_rows(cs.center_col * plane.aspect, cs.center_row, cs.semi_major,
                            cs.semi_minor, cs.major_dir, np.arange(plane.n_cols) * plane.aspect)


def ellipse_top_rows(u0, v0, a, b, d, u) -> np.ndarray:
    """Smallest v on the ellipse at each abscissa ``u`` (NaN outside its extent)."""
    du, dv = d
    m00 = du * du / a**2 + dv * dv / b**2
    m01 = du * dv / a**2 - du * dv / b**2
    m11 = dv * dv / a**2 + du * du / b**2
    x = np.asarray(u, dtype=float) - u0
    disc = (m01 * x) ** 2 - m11 * (m00 * x * x - 1.0)
    with np.errstate(invalid="ignore"):
        top = v0 + (-m01 * x - np.sqrt(disc)) / m11
    return np.where(disc >= 0, top, np.nan)


def render_bscan(truth: SceneTruth, plane: ScanPlane, frame_index: int = 0) -> BScanImage:
    nr, nc = plane.n_rows, plane.n_cols
    rows = np.arange(nr)[:, None]
    img = np.full((nr, nc), BACKGROUND, dtype=np.float32)

    tis = np.round(truth.tissue.surface_row(np.arange(nc)))[None, :]
    th = truth.tissue.thickness
    sub = (rows >= tis + th) & (rows < tis + th + truth.subsurface_depth)
    img[sub] = 0.3 * truth.tissue.reflectivity
    img[(rows >= tis) & (rows < tis + th)] = truth.tissue.reflectivity

    top = needle_top_rows(truth, plane)
    cols = np.flatnonzero(np.isfinite(top))
    if cols.size:
        t = np.round(top[cols]).astype(int)[None, :]
        r = rows
        block = img[:, cols]
        block[r >= t] = BACKGROUND
        block[(r >= t) & (r < t + truth.needle_thickness)] = NEEDLE_INTENSITY
        img[:, cols] = block

    nz = truth.noise
    if nz.speckle_sigma > 0 or nz.gaussian_sigma > 0 or nz.salt_rate > 0:
        rng = np.random.default_rng([nz.seed, frame_index])
        if nz.speckle_sigma > 0:
            img *= np.exp(nz.speckle_sigma * rng.standard_normal((nr, nc), dtype=np.float32))
        if nz.gaussian_sigma > 0:
            img += nz.gaussian_sigma * rng.standard_normal((nr, nc), dtype=np.float32)
        if nz.salt_rate > 0:
            img[rng.random((nr, nc)) < nz.salt_rate] = 255.0
    return BScanImage(np.clip(np.rint(img), 0, 255).astype(np.uint8), plane)


def render_sequence(truth: SceneTruth, frames: list[Frame]) -> list[BScanImage]:
    return [render_bscan(truth, f.plane, f.index) for f in frames]


def truth_axes(truth: SceneTruth, frames: list[Frame]) -> list[ToolAxis]:
    return [truth.motion.pose_at(f.timestamp) for f in frames]


# --- file formats -------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def plane_to_json(plane: ScanPlane) -> dict:
    return {
        "p_mm": plane.origin.tolist(),
        "n": plane.normal.tolist(),
        "col_dir": plane.col_dir.tolist(),
        "row_dir": plane.row_dir.tolist(),
        "px_um": [plane.px_spacing_col, plane.px_spacing_row],
        "size": [plane.n_rows, plane.n_cols],
    }


def plane_from_json(d: dict, timestamp: float = 0.0) -> ScanPlane:
    plane = ScanPlane(np.array(d["p_mm"]), np.array(d["col_dir"]), np.array(d["row_dir"]),
                      float(d["px_um"][0]), float(d["px_um"][1]),
                      int(d["size"][0]), int(d["size"][1]), float(timestamp))
    if "n" in d and abs(abs(float(np.dot(plane.normal, d["n"]))) - 1.0) > 1e-6:
        raise ValueError("manifest normal is inconsistent with col_dir x row_dir")
    return plane


def axis_to_json(axis: ToolAxis) -> dict:
    return {"x_mm": axis.x.tolist(), "theta_rad": axis.theta, "phi_rad": axis.phi}


def axis_from_json(d: dict) -> ToolAxis:
    return ToolAxis(np.array(d["x_mm"]), d["theta_rad"], d["phi_rad"])


def tissue_to_json(t: TissueModel) -> dict:
    return {"kind": t.kind, "circle": list(t.circle), "poly4": list(t.poly4),
            "bumps": [[b.center_col, b.width, b.height] for b in t.bumps],
            "reflectivity": t.reflectivity, "thickness": t.thickness}


def tissue_from_json(d: dict) -> TissueModel:
    return TissueModel(d["kind"], tuple(d["circle"]), tuple(d["poly4"]),
                       tuple(Bump(*b) for b in d.get("bumps", [])),
                       d["reflectivity"], int(d["thickness"]))


@dataclass(eq=False)
class Sequence:
    """A loaded (or freshly rendered) sequence: frames in timestamp order."""

    frames: list[Frame]
    images: list[BScanImage]
    radius_mm: float = 0.205
    truth: list[ToolAxis] | None = None
    tissue: TissueModel | None = None
    seed: int | None = None

    def __len__(self):
        return len(self.frames)


def export_sequence(frames: list[Frame], images: list[BScanImage], truth: SceneTruth,
                    out_dir) -> list[dict]:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = []
    for f, img in zip(frames, images):
        rel = f"images/frame_{f.index:05d}.pgm"
        write_pgm(out / rel, img.pixels)
        manifest.append({"image_path": rel, "timestamp_s": f.timestamp,
                         "plane_index": f.plane_index, "plane": plane_to_json(f.plane)})
    gt = {
        "radius_mm": truth.radius_mm,
        "frames": [axis_to_json(a) for a in truth_axes(truth, frames)],
        "tissue": tissue_to_json(truth.tissue),
        "noise_seed": truth.noise.seed,
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "truth.json", gt)
    return manifest


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def load_sequence(directory, load_images: bool = True) -> Sequence:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read {d / 'manifest.json'}: {exc}") from exc
    frames, images = [], []
    for k, entry in enumerate(manifest):
        plane = plane_from_json(entry["plane"], entry["timestamp_s"])
        frames.append(Frame(k, int(entry.get("plane_index", 0)), plane))
        if load_images:
            images.append(BScanImage(read_pgm(d / entry["image_path"]), plane))
    seq = Sequence(frames, images)
    if (d / "truth.json").exists():
        gt = json.loads((d / "truth.json").read_text())
        seq.radius_mm = gt["radius_mm"]
        seq.truth = [axis_from_json(a) for a in gt["frames"]]
        seq.tissue = tissue_from_json(gt["tissue"])
        seq.seed = gt.get("noise_seed")
    return seq


def synthesize(truth: SceneTruth, pattern: ScanPattern, duration: float) -> Sequence:
    frames = schedule_frames(pattern, duration)
    images = render_sequence(truth, frames)
    return Sequence(frames, images, truth.radius_mm, truth_axes(truth, frames), truth.tissue,
                    truth.noise.seed)
