import math

import numpy as np
import pytest
from scipy.spatial.distance import directed_hausdorff

from helpers import axis_with_ndotl, static_truth
from oracles import point_line_distances
from needletrack.geometry import ToolAxis
from needletrack.synth import (
    BACKGROUND, NEEDLE_INTENSITY, Bump, MotionScript, NoiseConfig, OutOfRange, ScanPattern,
    SceneTruth, TissueModel, export_sequence, load_sequence, needle_top_rows,
    pose_at, read_pgm, render_bscan, schedule_frames, synthesize, write_pgm,
)


class TestSchedule:
    def test_period_from_a_scan_rate(self):
        assert ScanPattern.parallel().period == pytest.approx(1000 / 30000)

    def test_five_planes_for_one_second(self):
        frames = schedule_frames(ScanPattern.parallel(), 1.0)
        assert len(frames) == 30
        assert [f.plane_index for f in frames] == [k % 5 for k in range(30)]
        np.testing.assert_allclose(np.diff([f.timestamp for f in frames]), 1 / 30)

    def test_single_plane(self):
        pat = ScanPattern.parallel(count=1)
        frames = schedule_frames(pat, 0.5)
        assert {f.plane_index for f in frames} == {0}
        for f in frames:
            np.testing.assert_array_equal(f.plane.origin, pat.planes[0].origin)

    def test_rejects_non_positive_duration(self):
        with pytest.raises(ValueError):
            schedule_frames(ScanPattern.parallel(), 0.0)

    def test_all_planes_contain_z(self):
        for pat in (ScanPattern.parallel(angle=0.3), ScanPattern.cross(angle=1.1)):
            for p in pat.planes:
                assert abs(p.normal[2]) < 1e-12


class TestPoseAt:
    def setup_method(self):
        self.a = ToolAxis([0, 0, 1], 1.0, 0.2)
        self.b = ToolAxis([2, 0, 1], 1.2, 0.6)
        self.script = MotionScript((0.0, 2.0), (self.a, self.b))

    def test_keyframe(self):
        p = pose_at(self.script, 2.0)
        np.testing.assert_array_equal(p.x, self.b.x)
        assert (p.theta, p.phi) == (self.b.theta, self.b.phi)

    def test_midpoint(self):
        p = pose_at(self.script, 1.0)
        np.testing.assert_allclose(p.x, [1, 0, 1])
        assert p.theta == pytest.approx(1.1)
        assert p.phi == pytest.approx(0.4)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            pose_at(self.script, 2.1)
        with pytest.raises(OutOfRange):
            pose_at(self.script, -0.01)

    def test_lateral_sweep_displacement(self):
        frames = schedule_frames(ScanPattern.parallel(), 2.0)
        xs = [pose_at(self.script, f.timestamp).x[0] for f in frames]
        np.testing.assert_allclose(np.diff(xs), 1.0 / 30, rtol=1e-9)

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            MotionScript((0.0, 0.0), (self.a, self.b))


def noise_free_scene(plane, ndotl=0.85, **kw):
    axis = axis_with_ndotl(plane, math.radians(70), ndotl)
    return static_truth(axis, **kw)


class TestRender:
    def test_needle_absent_argmax_is_tissue(self, center_plane):
        truth = static_truth(ToolAxis([20.0, 0.0, 1.0], 1.2, math.pi / 2))
        img = render_bscan(truth, center_plane)
        expected = np.round(truth.tissue.surface_row(np.arange(center_plane.n_cols)))
        np.testing.assert_array_equal(img.pixels.argmax(axis=0), expected)

    def test_shadow_below_the_arc(self, center_plane):
        truth = noise_free_scene(center_plane)
        img = render_bscan(truth, center_plane).pixels
        top = needle_top_rows(truth, center_plane)
        cols = np.flatnonzero(np.isfinite(top))
        assert cols.size > 50
        for c in cols:
            t = int(round(top[c]))
            below = img[t + truth.needle_thickness:, c]
            assert np.all(below == BACKGROUND)
            assert np.all(img[t:t + truth.needle_thickness, c] == NEEDLE_INTENSITY)

    def test_arc_matches_cylinder_membership(self, center_plane):
        # oracle: first row along each A-scan whose 3D point lies inside the cylinder
        truth = noise_free_scene(center_plane, 0.5)
        img = render_bscan(truth, center_plane).pixels
        axis = truth.motion.pose_at(0.0)
        cols = np.flatnonzero((img == NEEDLE_INTENSITY).any(axis=0))
        rows = np.arange(0, center_plane.n_rows, 0.02)
        oracle, rendered = [], []
        for c in cols:
            q = center_plane.pixel_to_3d(np.full_like(rows, c), rows)
            inside = point_line_distances(q, axis.x, axis.l) <= truth.radius_mm
            if inside.any():
                oracle.append([c, rows[inside.argmax()]])
                rendered.append([c, (img[:, c] == NEEDLE_INTENSITY).argmax()])
        oracle, rendered = np.asarray(oracle, float), np.asarray(rendered, float)
        assert len(oracle) > 50
        h = max(directed_hausdorff(oracle, rendered)[0], directed_hausdorff(rendered, oracle)[0])
        assert h <= 1.5

    def test_deterministic(self, center_plane):
        truth = noise_free_scene(center_plane, noise=NoiseConfig(seed=5))
        a = render_bscan(truth, center_plane, 3).pixels
        b = render_bscan(truth, center_plane, 3).pixels
        c = render_bscan(truth, center_plane, 4).pixels
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_bump_raises_the_tissue(self, center_plane):
        flat = TissueModel()
        bumpy = TissueModel(bumps=(Bump(300.0, 20.0, 100.0),))
        assert bumpy.surface_row([300])[0] == pytest.approx(flat.surface_row([300])[0] - 100)
        assert bumpy.surface_row([0])[0] == pytest.approx(flat.surface_row([0])[0], abs=1e-6)

    def test_invalid_tissue(self):
        with pytest.raises(ValueError):
            TissueModel(kind="spline")
        with pytest.raises(ValueError):
            TissueModel(poly4=(1.0, 2.0))

    def test_invalid_radius(self):
        with pytest.raises(ValueError):
            SceneTruth(MotionScript.static(ToolAxis([0, 0, 1], 1, 1)), radius_mm=0.0)


class TestFiles:
    def test_pgm_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (7, 11), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", px)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), px)

    @pytest.mark.parametrize("scene", ["empty", "lateral", "cross"])
    def test_sequence_round_trip(self, tmp_path, scene):
        th = math.radians(70)
        if scene == "empty":
            motion, pat = MotionScript.static(ToolAxis([20, 0, 1], th, math.pi / 2)), ScanPattern.parallel()
        elif scene == "lateral":
            motion = MotionScript((0, 1), (ToolAxis([-0.5, 0, 1], th, 1.13), ToolAxis([0.5, 0, 1], th, 1.13)))
            pat = ScanPattern.parallel()
        else:
            motion = MotionScript.static(ToolAxis([0.1, -0.1, 1], math.radians(60), math.pi / 4))
            pat = ScanPattern.cross()
        truth = SceneTruth(motion, noise=NoiseConfig(seed=2))
        seq = synthesize(truth, pat, 0.2)
        export_sequence(seq.frames, seq.images, truth, tmp_path)
        back = load_sequence(tmp_path)
        assert len(back) == len(seq)
        for f0, f1, i0, i1 in zip(seq.frames, back.frames, seq.images, back.images):
            assert i0.pixels.tobytes() == i1.pixels.tobytes()
            assert f1.timestamp == f0.timestamp
            assert f1.plane_index == f0.plane_index
            np.testing.assert_array_equal(f1.plane.origin, f0.plane.origin)
            np.testing.assert_array_equal(f1.plane.normal, f0.plane.normal)
        for a, b in zip(seq.truth, back.truth):
            np.testing.assert_array_equal(a.x, b.x)
            assert (a.theta, a.phi) == (b.theta, b.phi)
        assert back.tissue == truth.tissue
        assert back.seed == 2

    def test_missing_manifest_names_the_path(self, tmp_path):
        with pytest.raises(OSError, match="manifest.json"):
            load_sequence(tmp_path)
