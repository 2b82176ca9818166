"""Command-line entry point: synth, detect, track, eval and bench."""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ekf, plot, synth, tracker
from .config import CANNED, ConfigError, RunConfig, load_config
from .detect import DetectConfig, detect, detection_to_json
from .synth import ScanPattern

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig(truth=None)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "pathology", False):
        cfg = cfg.with_pathology(True)
    pattern = getattr(args, "pattern", None)
    if pattern is not None:
        if pattern == "cross":
            pat = ScanPattern.cross()
        else:
            pat = ScanPattern.parallel()
        cfg = replace(cfg, pattern=pat)
    if getattr(args, "frames", None) is not None:
        cfg = cfg.with_frames(args.frames)
    return cfg


def _pool_map(fn, items, threads):
    if threads is None or threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _check_threads(args):
    if getattr(args, "threads", None) is not None and args.threads < 1:
        raise UsageError("--threads must be at least 1")


# --- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    if not args.config:
        raise UsageError("synth needs --config (a TOML file or one of: " + ", ".join(CANNED) + ")")
    _check_threads(args)
    cfg = _run_config(args)
    frames = synth.schedule_frames(cfg.pattern, cfg.duration_s)
    images = _pool_map(lambda f: synth.render_bscan(cfg.truth, f.plane, f.index), frames, args.threads)
    out = Path(args.out)
    synth.export_sequence(frames, images, cfg.truth, out)
    print(f"wrote {len(frames)} frames to {out} "
          f"(dt = {1e3 * cfg.pattern.period:.3f} ms, {len(cfg.pattern.planes)} plane(s), "
          f"duration {len(frames) * cfg.pattern.period:.3f} s)")
    return EXIT_OK


def _detections(seq, det_cfg: DetectConfig, seed: int, threads, drop_planes=()):
    def one(k):
        f = seq.frames[k]
        t0 = time.perf_counter()
        d = detect(seq.images[k], det_cfg, np.random.default_rng([seed, f.index]),
                   force_fail=f.plane_index in drop_planes)
        return d, 1e3 * (time.perf_counter() - t0)
    return _pool_map(one, range(len(seq.frames)), threads)


def cmd_detect(args) -> int:
    _check_threads(args)
    cfg = _run_config(args)
    seq = synth.load_sequence(args.manifest)
    res = _detections(seq, cfg.detect, cfg.seed, args.threads)
    with open(args.out, "w") as fh:
        for f, (d, ms) in zip(seq.frames, res):
            fh.write(json.dumps(detection_to_json(f.index, d, round(ms, 3))) + "\n")
    found = sum(d.found for d, _ in res)
    print(f"{found}/{len(res)} frames with an ellipse; results in {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    _check_threads(args)
    cfg = _run_config(args)
    seq = synth.load_sequence(args.manifest)
    tcfg = cfg.tracker
    dets = [d for d, _ in _detections(seq, tcfg.detect, tcfg.seed, args.threads, tcfg.drop_planes)]
    out = tracker.run(seq, tcfg, detections=dets)
    tracker.write_csv(out, args.out)
    n_up = sum(r.status == "updated" for r in out)
    print(f"tracked {len(out)} frames ({n_up} filter updates); trace in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = tracker.read_csv(args.track)
    truth_path = Path(args.truth)
    seq = synth.load_sequence(truth_path.parent, load_images=False)
    if seq.truth is None:
        raise UsageError(f"no ground truth next to {truth_path}")
    if truth_path.name != "truth.json":
        gt = json.loads(truth_path.read_text())
        seq.truth = [synth.axis_from_json(a) for a in gt["frames"]]
    if len(rows) != len(seq.truth):
        raise UsageError(f"frame count mismatch: track has {len(rows)} rows, truth has {len(seq.truth)}")
    report = tracker.evaluate(rows, seq.truth, [f.plane for f in seq.frames], args.steady_from)
    out = Path(args.out)
    tracker.write_summary(report, out)
    svg = Path(args.plots) if args.plots else out.with_suffix(".svg")
    svg.write_text(plot.report_figure(report, rows))
    s = report["summary"]
    for name, label in (("ekf", "EKF"), ("base", "baseline")):
        print(f"{label:8s}: n={s[f'{name}_count']} theta std {_num(s[f'{name}_theta_std_deg'])} deg, "
              f"phi std {_num(s[f'{name}_phi_std_deg'])} deg, "
              f"angle err mean {_num(s[f'{name}_angle_err_deg_mean'])} deg, "
              f"axis dist mean {_num(s[f'{name}_axis_dist_mm_mean'], 4)} mm")
    print(f"report in {out}, plots in {svg}")
    return EXIT_OK


def _num(v, digits=3):
    return "n/a" if v is None else f"{v:.{digits}f}"


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    if args.repetitions < 1:
        raise UsageError("--repetitions must be at least 1")
    seq = synth.load_sequence(args.manifest)
    if args.frames is not None:
        seq.frames, seq.images = seq.frames[:args.frames], seq.images[:args.frames]
    if not seq.frames:
        raise UsageError("manifest has no frames")
    report = benchmark(seq, cfg.tracker, args.repetitions)
    print(f"{report['frames']} frames x {args.repetitions}: p50 {report['p50_ms']:.2f} ms, "
          f"p95 {report['p95_ms']:.2f} ms, {report['fps']:.0f} FPS "
          f"(pathology handling {'on' if cfg.detect.pathology else 'off'})")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return EXIT_OK


def benchmark(seq, tcfg: tracker.TrackerConfig, repetitions: int = 1) -> dict:
    """Per-frame wall-clock of detection plus one EKF predict/update, single-threaded."""
    times = []
    for _ in range(repetitions):
        belief, last_t, pending = None, None, []
        for f, img in zip(seq.frames, seq.images):
            t0 = time.perf_counter()
            d = detect(img, tcfg.detect, np.random.default_rng([tcfg.seed, f.index]))
            if d.found:
                if belief is None:
                    pending.append((d.ellipse, f.plane))
                    try:
                        belief, last_t = ekf.initialize(pending[-2:]), f.plane.timestamp
                    except ekf.DegenerateInit:
                        pass
                elif f.plane.timestamp > last_t:
                    try:
                        prior = ekf.predict(belief, ekf.ControlInput.from_plane(
                            f.plane, f.plane.timestamp - last_t), tcfg.noise)
                        z = ekf.sign_resolve(d.ellipse, f.plane, prior.state)
                        belief, _ = ekf.update(prior, z, f.plane, tcfg.noise)
                        last_t = f.plane.timestamp
                    except ekf.FilterError:
                        pass
            times.append(1e3 * (time.perf_counter() - t0))
    t = np.asarray(times)
    p50 = float(np.median(t))
    return {"frames": len(seq.frames), "repetitions": repetitions, "p50_ms": p50,
            "p95_ms": float(np.percentile(t, 95)), "mean_ms": float(t.mean()),
            "fps": 1e3 / p50 if p50 > 0 else math.inf,
            "pathology": tcfg.detect.pathology}


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="needletrack",
                                description="Needle pose tracking in synthetic OCT B-scan sequences.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, help="override the configured seed")
        if config:
            sp.add_argument("--config", help=f"TOML file or bundled name ({', '.join(CANNED)})")

    s = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pattern", choices=("parallel", "cross"), help="override the scan pattern")
    s.add_argument("--frames", type=int, help="number of frames (overrides the duration)")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("detect", help="per-frame ellipse detection to JSON lines")
    s.add_argument("manifest", help="sequence directory holding manifest.json")
    common(s)
    s.add_argument("--out", required=True, help="output .jsonl")
    s.add_argument("--pathology", action="store_true", help="enable pathology exclusion")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("track", help="run the EKF tracker and the line-fit baseline")
    s.add_argument("manifest", help="sequence directory holding manifest.json")
    common(s)
    s.add_argument("--out", required=True, help="output .csv")
    s.add_argument("--pathology", action="store_true", help="enable pathology exclusion")
    s.add_argument("--threads", type=int, default=1, help="threads for detection (filter is sequential)")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="compare a track against ground truth")
    s.add_argument("track", help="track .csv from the track command")
    s.add_argument("truth", help="truth.json of the sequence (manifest.json must sit beside it)")
    s.add_argument("--out", required=True, help="report .json")
    s.add_argument("--plots", help="SVG output (default: report path with .svg)")
    s.add_argument("--steady-from", type=float, default=1.0, help="start of the steady-state window (s)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time detection + EKF per frame")
    s.add_argument("manifest", help="sequence directory holding manifest.json")
    common(s)
    s.add_argument("--repetitions", type=int, default=3)
    s.add_argument("--frames", type=int, help="use only the first N frames")
    s.add_argument("--pathology", action="store_true", help="enable pathology exclusion")
    s.add_argument("--threads", type=int, default=1, help="accepted for symmetry; timing is single-threaded")
    s.add_argument("--out", help="optional JSON report")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
