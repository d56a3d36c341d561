"""Command-line front end.

Subcommands: simulate, estimate, sweep, optimal-flux, reconstruct, ingest.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 score-model
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .errors import FormatError, ScoreModelFailure
from .estimate import joint_ml
from .model import AcquisitionConfig, DetectorMode, PulseProfile, SceneParams
from .regularize import RegularizerConfig, SubprocessScoreModel
from .scene import export_ground_truth, load_scene_file
from .simulate import (
    RngSeed,
    detect,
    export_detections,
    quantize,
    sample_arrivals,
    save_histogram,
)


def _add_acquisition_args(parser, bin_size_default=1e-11):
    parser.add_argument("--rep-period", type=float, default=100e-9, help="repetition period [s]")
    parser.add_argument("--pulses", type=int, default=100, help="pulse count per pixel")
    parser.add_argument("--dead-time", type=float, default=20e-9, help="detector dead time [s]")
    parser.add_argument("--bin-size", type=float, default=bin_size_default, help="histogram bin size [s]")
    parser.add_argument("--pulse-width", type=float, default=1e-10, help="Gaussian pulse RMS width [s]")


def _acquisition_from(args, mode) -> AcquisitionConfig:
    return AcquisitionConfig(
        rep_period=args.rep_period, n_pulses=args.pulses, dead_time=args.dead_time,
        mode=DetectorMode.parse(mode), bin_size=args.bin_size,
        pulse=PulseProfile(args.pulse_width),
    )


def _cmd_simulate(args) -> int:
    mode = DetectorMode.parse(args.mode)
    cfg = _acquisition_from(args, mode)
    out = Path(args.out)
    if args.scene:
        from .scene import simulate_scene

        spec = load_scene_file(args.scene)
        out.mkdir(parents=True, exist_ok=True)
        data = simulate_scene(spec, cfg, args.seed, mode)
        for p, detections in enumerate(data):
            save_histogram(quantize(detections, cfg), out / f"pixel{p:05d}.csv", cfg)
        export_ground_truth(spec, out / "ground_truth.csv")
        print(f"wrote {len(data)} pixel histograms to {out}")
        return 0
    params = SceneParams(args.signal_flux, args.background_flux, args.depth)
    arrivals = sample_arrivals(params, cfg, RngSeed(args.seed, 0))
    detections = detect(arrivals, cfg, mode)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_histogram(quantize(detections, cfg), out, cfg)
    if args.export_times:
        export_detections(detections, args.export_times)
    print(f"simulated {detections.count} detections -> {out}")
    return 0


def _cmd_estimate(args) -> int:
    target = Path(args.histogram)
    if target.is_dir():
        pixels, cfg = bench.ingest_histograms(target)
        order = sorted(pixels)
        hists = [pixels[p] for p in order]
    else:
        from .simulate import load_histogram

        hist, cfg = load_histogram(target)
        order, hists = [0], [hist]
    mode = DetectorMode.parse(args.mode) if args.mode else cfg.mode
    estimates = [joint_ml(h, cfg, mode) for h in hists]
    bench.write_estimates_csv(estimates, args.out, pixels=order)
    print(f"estimated {len(estimates)} pixel(s) -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    overrides = {
        "sweep": args.sweep_var,
        "values": [float(v) for v in args.values.split(",")] if args.values else None,
        "modes": args.modes.split(",") if args.modes else None,
        "trials": args.trials,
        "seed": args.seed,
        "threads": args.threads,
    }
    if args.config:
        config = bench.ExperimentConfig.from_json(args.config, **overrides)
    else:
        missing = [k for k in ("sweep", "values") if overrides.get(k) is None]
        if missing:
            raise ValueError(f"sweep needs --config or --sweep-var/--values ({missing} missing)")
        config = bench.ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    rows = bench.run_sweep(config, dump_path=args.dump)
    timings = Path(args.out).with_name(Path(args.out).stem + "_timings.csv")
    bench.write_metric_csv(rows, args.out, timings_path=timings)
    print(f"wrote {len(rows)} metric rows -> {args.out} (timings: {timings})")
    return 0


def _cmd_optimal_flux(args) -> int:
    sbr_values = [float(v) for v in args.sbr.split(",")]
    if args.flux_grid.startswith("log:"):
        lo, hi, n = args.flux_grid[4:].split(":")
        grid = np.geomspace(float(lo), float(hi), int(n))
    else:
        grid = np.asarray([float(v) for v in args.flux_grid.split(",")])
    base = bench.ExperimentConfig(
        sweep="flux", values=tuple(grid), sbr=sbr_values[0],
        modes=args.modes.split(","), trials=args.trials, seed=args.seed,
        threads=args.threads, bin_size=args.bin_size, pulse_width=args.pulse_width,
        rep_period=args.rep_period, n_pulses=args.pulses, dead_time=args.dead_time,
    )
    rows, optima = bench.find_optimal_flux(base, sbr_values, grid)
    bench.write_metric_csv(rows, args.out)
    optima_path = Path(args.optima_out or str(Path(args.out).with_suffix("")) + "_optima.csv")
    lines = ["sbr,mode,optimal_flux,rmse_z"] + [
        f"{o['sbr']:.17g},{o['mode']},{o['optimal_flux']:.17g},{o['rmse_z']:.17g}" for o in optima
    ]
    optima_path.write_text("\n".join(lines) + "\n")
    for o in optima:
        print(f"SBR {o['sbr']:g} {o['mode']}: optimal flux {o['optimal_flux']:g}")
    return 0


def _cmd_reconstruct(args) -> int:
    mode = DetectorMode.parse(args.mode)
    cfg = _acquisition_from(args, mode)
    regularizer = None
    model = None
    if args.ssdr:
        regularizer = RegularizerConfig(
            n_iter=args.iterations,
            score_threshold=args.score_threshold,
            init_threshold=args.init_threshold,
            step_size=args.step_size,
            strength=args.strength,
            n_neighbors=args.neighbors,
        )
        if not args.score_model:
            raise ValueError("--ssdr requires --score-model")
        model = bench._score_model_from_spec(args.score_model, timeout=args.bridge_timeout)
    try:
        summary = bench.run_reconstruction(
            args.scene, cfg, mode, args.out, regularizer=regularizer,
            score_model=model, seed=args.seed,
        )
    finally:
        if isinstance(model, SubprocessScoreModel):
            model.close()
    print(json.dumps(summary, indent=1))
    return 0


def _cmd_ingest(args) -> int:
    pixels, cfg = bench.ingest_histograms(args.dir)
    total = sum(h.total for h in pixels.values())
    print(f"ingested {len(pixels)} pixels, {total} detections, "
          f"mode={cfg.mode.value}, bins={cfg.n_bins}")
    if args.out:
        lines = ["pixel,total,armed_periods"]
        for p in sorted(pixels):
            armed = "" if pixels[p].armed_periods is None else pixels[p].armed_periods
            lines.append(f"{p},{pixels[p].total},{armed}")
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one pixel or a scene to histogram files")
    p.add_argument("--mode", default="free", help="ideal | sync | free")
    p.add_argument("--scene", help="scene JSON; per-pixel outputs under --out directory")
    p.add_argument("--signal-flux", type=float, default=1.0)
    p.add_argument("--background-flux", type=float, default=1.0)
    p.add_argument("--depth", type=float, default=7.4948)
    p.add_argument("--export-times", help="also dump absolute detection times")
    _add_acquisition_args(p, bin_size_default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("estimate", help="joint ML estimation from histogram file(s)")
    p.add_argument("--mode", help="ideal | sync | free (default: sidecar mode)")
    p.add_argument("--histogram", required=True, help="histogram CSV or directory")
    p.add_argument("--out", required=True, help="output estimates CSV")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("sweep", help="Monte-Carlo error sweep to CSV")
    p.add_argument("--config", help="JSON ExperimentConfig; flags override")
    p.add_argument("--sweep-var", choices=["S", "SBR", "z", "t_d", "flux"])
    p.add_argument("--values", help="comma-separated sweep values")
    p.add_argument("--modes", help="comma-separated detector modes")
    p.add_argument("--trials", type=int)
    p.add_argument("--dump", help="per-trial dump CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("optimal-flux", help="flux level minimizing RMSE(z) per SBR and mode")
    p.add_argument("--sbr", default="0.1,1")
    p.add_argument("--flux-grid", default="log:0.1:30:10", help="log:lo:hi:n or comma list")
    p.add_argument("--modes", default="sync,free")
    p.add_argument("--trials", type=int, default=1000)
    _add_acquisition_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--optima-out")
    p.set_defaults(func=_cmd_optimal_flux)

    p = sub.add_parser("reconstruct", help="scene reconstruction with optional regularization")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--mode", default="free")
    p.add_argument("--ssdr", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--score-model", help="plane:nx,ny,nz,offset,blur or bridge:<command>")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--score-threshold", type=float, default=4.78e-3)
    p.add_argument("--init-threshold", type=float, default=1.09e-3)
    p.add_argument("--step-size", type=float, default=3.74e-6)
    p.add_argument("--strength", type=float, default=9.70e6)
    p.add_argument("--neighbors", type=int, default=8)
    p.add_argument("--bridge-timeout", type=float, default=60.0)
    _add_acquisition_args(p, bin_size_default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("ingest", help="validate and index per-pixel histogram files")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", help="optional per-pixel summary CSV")
    p.set_defaults(func=_cmd_ingest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScoreModelFailure as exc:
        print(f"score-model failure: {exc}", file=sys.stderr)
        return 4
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
