"""Monte-Carlo benchmark harness: sweeps, optimal-flux search, reconstruction.

Every trial simulates one acquisition and runs the joint ML estimator; rows
aggregate RMSE / NRMSE / MAE per (sweep value, mode).  Aggregation reduces
per-trial results in fixed trial order with exact summation, so the output
CSV is byte-identical for any worker count.  Estimator timing excludes
simulation.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ScoreModelFailure
from .estimate import Estimate, joint_ml
from .geometry import to_cartesian
from .model import AcquisitionConfig, DetectorMode, PulseProfile, SceneParams
from .regularize import (
    PlaneScoreModel,
    RegularizerConfig,
    SubprocessScoreModel,
    depth_score,
    regularize_depths,
    save_point_cloud,
)
from .scene import SceneSpec, load_scene_file, simulate_scene
from .simulate import Histogram, RngSeed, load_histogram, quantize, sample_arrivals, detect

__all__ = [
    "ExperimentConfig",
    "MetricRow",
    "run_sweep",
    "find_optimal_flux",
    "run_reconstruction",
    "ingest_histograms",
    "write_metric_csv",
    "write_estimates_csv",
    "rmse",
    "nrmse",
    "mae",
]

_SWEEP_VARS = ("S", "SBR", "z", "t_d", "flux")


def rmse(estimates, truths) -> float:
    """Root-mean-square error with order-stable exact accumulation."""
    pairs = [(float(e) - float(t)) ** 2 for e, t in zip(estimates, truths)]
    return math.sqrt(math.fsum(pairs) / len(pairs))


def nrmse(estimates, truth: float) -> float:
    """RMSE normalized by the (scalar) true parameter; NaN at zero truth."""
    if truth == 0.0:
        return math.nan
    return rmse(estimates, [truth] * len(estimates)) / truth


def mae(estimates, truths) -> float:
    return math.fsum(abs(float(e) - float(t)) for e, t in zip(estimates, truths)) / len(estimates)


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: vary one of S, SBR, z, t_d or flux (total) over ``values``.

    Fixed parameters supply everything else; ``sbr`` fixes B = S / sbr when
    sweeping S or flux at constant SBR (an explicit ``background_flux``
    wins; with neither set the background flux defaults to 1).
    """

    sweep: str
    values: tuple
    modes: tuple = (DetectorMode.IDEAL, DetectorMode.SYNCHRONOUS, DetectorMode.FREE_RUNNING)
    trials: int = 1000
    seed: int = 0
    signal_flux: float = 1.0
    background_flux: "float | None" = None
    sbr: "float | None" = None
    depth: "float | None" = None
    rep_period: float = 100e-9
    n_pulses: int = 100
    dead_time: float = 20e-9
    bin_size: float = 1e-11
    pulse_width: float = 1e-10
    threads: int = 1

    def __post_init__(self):
        if self.sweep not in _SWEEP_VARS:
            raise ValueError(f"sweep must be one of {_SWEEP_VARS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "modes", tuple(DetectorMode.parse(m) for m in self.modes))

    def acquisition(self, dead_time: "float | None" = None, mode=DetectorMode.IDEAL) -> AcquisitionConfig:
        return AcquisitionConfig(
            rep_period=self.rep_period,
            n_pulses=self.n_pulses,
            dead_time=self.dead_time if dead_time is None else dead_time,
            mode=mode,
            bin_size=self.bin_size,
            pulse=PulseProfile(self.pulse_width),
        )

    def scene_at(self, value: float) -> "tuple[SceneParams, float]":
        """Ground truth (params, dead_time) for one sweep value.

        Depth sweep values below 1.0 are fractions of the unambiguous range.
        """
        s, b, t_d = self.signal_flux, self.background_flux, self.dead_time
        if self.sweep == "S":
            s = value
        elif self.sweep == "flux":
            if self.sbr is None:
                raise ValueError("flux sweep needs a fixed sbr")
            s = value * self.sbr / (1.0 + self.sbr)
            b = value / (1.0 + self.sbr)
        elif self.sweep == "SBR":
            b = s / value
        elif self.sweep == "t_d":
            t_d = value
        if b is None:
            b = s / self.sbr if self.sbr is not None else 1.0
        cfg = self.acquisition()
        z = 0.5 * cfg.max_depth if self.depth is None else self.depth
        if self.sweep == "z":
            z = value * cfg.max_depth if value < 1.0 else value
        return SceneParams(s, b, z), t_d

    @classmethod
    def from_json(cls, path, **overrides) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON config ({exc})") from exc
        doc.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValueError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class MetricRow:
    """Aggregated errors for one (sweep value, mode) cell.

    Wall-clock estimator timing lives in a companion timings CSV rather
    than the metric CSV, so the latter is byte-identical for a fixed seed
    regardless of worker count.
    """

    sweep: str
    value: float
    mode: str
    rmse_s: float
    nrmse_s: float
    rmse_b: float
    nrmse_b: float
    rmse_z: float
    mae_z: float
    mean_runtime_s: float
    trials: int

    HEADER = "sweep,value,mode,rmse_S,nrmse_S,rmse_B,nrmse_B,rmse_z,mae_z,trials"
    TIMING_HEADER = "sweep,value,mode,mean_runtime_s,trials"

    def to_csv(self) -> str:
        return ",".join([
            self.sweep, f"{self.value:.17g}", self.mode,
            f"{self.rmse_s:.17g}", f"{self.nrmse_s:.17g}",
            f"{self.rmse_b:.17g}", f"{self.nrmse_b:.17g}",
            f"{self.rmse_z:.17g}", f"{self.mae_z:.17g}", str(self.trials),
        ])

    def to_timing_csv(self) -> str:
        return ",".join([
            self.sweep, f"{self.value:.17g}", self.mode,
            f"{self.mean_runtime_s:.17g}", str(self.trials),
        ])


def _run_trial_block(payload):
    """Worker: simulate + estimate a block of trials (picklable top level)."""
    params, cfg, mode, seed, trial_indices = payload
    out = []
    for idx in trial_indices:
        arrivals = sample_arrivals(params, cfg, RngSeed(seed, idx))
        detections = detect(arrivals, cfg, mode)
        hist = quantize(detections, cfg)
        start = time.perf_counter()
        est = joint_ml(hist, cfg, mode)
        elapsed = time.perf_counter() - start
        out.append((idx, est.signal_flux, est.background_flux, est.depth, elapsed))
    return out


def _collect_trials(params, cfg, mode, seed, base_index, trials, threads):
    indices = [base_index + t for t in range(trials)]
    if threads <= 1:
        blocks = [_run_trial_block((params, cfg, mode, seed, indices))]
    else:
        chunk = max(1, math.ceil(trials / (threads * 4)))
        payloads = [
            (params, cfg, mode, seed, indices[i:i + chunk])
            for i in range(0, trials, chunk)
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(_run_trial_block, payloads))
    results = {}
    for block in blocks:
        for idx, s, b, z, dt in block:
            results[idx] = (s, b, z, dt)
    return [results[i] for i in indices]  # fixed trial order


def run_sweep(config: ExperimentConfig, dump_path=None) -> "list[MetricRow]":
    """Simulate and estimate every (value, mode) cell; returns metric rows."""
    rows = []
    dump_lines = ["sweep,value,mode,trial,S_true,B_true,z_true,S_hat,B_hat,z_hat,runtime_s"]
    block = 0
    for value in config.values:
        params, dead_time = config.scene_at(value)
        for mode in config.modes:
            cfg = config.acquisition(dead_time=dead_time, mode=mode)
            trials = _collect_trials(params, cfg, mode, config.seed,
                                     block * config.trials, config.trials, config.threads)
            block += 1
            s_hats = [t[0] for t in trials]
            b_hats = [t[1] for t in trials]
            z_hats = [t[2] for t in trials]
            runtimes = [t[3] for t in trials]
            rows.append(MetricRow(
                sweep=config.sweep, value=value, mode=mode.value,
                rmse_s=rmse(s_hats, [params.signal_flux] * len(s_hats)),
                nrmse_s=nrmse(s_hats, params.signal_flux),
                rmse_b=rmse(b_hats, [params.background_flux] * len(b_hats)),
                nrmse_b=nrmse(b_hats, params.background_flux),
                rmse_z=rmse(z_hats, [params.depth] * len(z_hats)),
                mae_z=mae(z_hats, [params.depth] * len(z_hats)),
                mean_runtime_s=math.fsum(runtimes) / len(runtimes),
                trials=config.trials,
            ))
            if dump_path is not None:
                for t_idx, (s, b, z, dt) in enumerate(trials):
                    dump_lines.append(
                        f"{config.sweep},{value:.17g},{mode.value},{t_idx},"
                        f"{params.signal_flux:.17g},{params.background_flux:.17g},"
                        f"{params.depth:.17g},{s:.17g},{b:.17g},{z:.17g},{dt:.17g}"
                    )
    if dump_path is not None:
        Path(dump_path).write_text("\n".join(dump_lines) + "\n")
    return rows


def write_metric_csv(rows, path, timings_path=None) -> None:
    """Write the plot-facing metric CSV, optionally plus estimator timings."""
    Path(path).write_text("\n".join([MetricRow.HEADER] + [r.to_csv() for r in rows]) + "\n")
    if timings_path is not None:
        Path(timings_path).write_text(
            "\n".join([MetricRow.TIMING_HEADER] + [r.to_timing_csv() for r in rows]) + "\n"
        )


def find_optimal_flux(base: ExperimentConfig, sbr_values, flux_grid) -> "tuple[list[MetricRow], list[dict]]":
    """Per (SBR, mode): sweep total flux and pick the RMSE(z)-minimizing value."""
    all_rows, optima = [], []
    for sbr in sbr_values:
        config = replace(base, sweep="flux", values=tuple(flux_grid), sbr=float(sbr),
                         background_flux=None)
        rows = run_sweep(config)
        for row in rows:
            all_rows.append(replace(row, sweep=f"flux@sbr={sbr:g}"))
        for mode in config.modes:
            curve = [r for r in rows if r.mode == mode.value]
            best = min(curve, key=lambda r: r.rmse_z)
            optima.append({"sbr": float(sbr), "mode": mode.value,
                           "optimal_flux": best.value, "rmse_z": best.rmse_z})
    return all_rows, optima


def ingest_histograms(directory, pattern: str = "pixel*.csv") -> "tuple[dict[int, Histogram], AcquisitionConfig]":
    """Load every per-pixel histogram CSV in a directory.

    Files are ``pixel<k>.csv`` with JSON sidecars; all sidecars must agree
    on the acquisition constants.
    """
    directory = Path(directory)
    paths = sorted(directory.glob(pattern))
    if not paths:
        raise FormatError(f"{directory}: no histogram CSV files found")
    pixels: "dict[int, Histogram]" = {}
    shared_cfg = None
    for path in paths:
        stem = path.stem
        digits = "".join(ch for ch in stem if ch.isdigit())
        pixel = int(digits) if digits else len(pixels)
        hist, cfg = load_histogram(path)
        if shared_cfg is None:
            shared_cfg = cfg
        elif (cfg.bin_size, cfg.rep_period, cfg.n_pulses, cfg.dead_time, cfg.mode) != (
            shared_cfg.bin_size, shared_cfg.rep_period, shared_cfg.n_pulses,
            shared_cfg.dead_time, shared_cfg.mode,
        ):
            raise FormatError(f"{path}: acquisition constants differ across pixels")
        pixels[pixel] = hist
    return pixels, shared_cfg


def write_estimates_csv(estimates: "list[Estimate]", path, pixels=None) -> None:
    """Per-pixel estimator output: pixel,S_hat,B_hat,z_hat,loglik,iters,flags."""
    lines = ["pixel,S_hat,B_hat,z_hat,loglik,iters,flags"]
    for i, est in enumerate(estimates):
        pixel = i if pixels is None else pixels[i]
        flags = ";".join(est.flags)
        lines.append(f"{pixel},{est.signal_flux:.17g},{est.background_flux:.17g},"
                     f"{est.depth:.17g},{est.objective:.17g},{est.iterations},{flags}")
    Path(path).write_text("\n".join(lines) + "\n")


def _score_model_from_spec(spec: str, timeout: float = 60.0):
    """Build a score model from a CLI spec string.

    ``plane:nx,ny,nz,offset,blur`` gives the analytic plane prior;
    ``bridge:<command ...>`` launches a protocol subprocess.
    """
    kind, _, rest = spec.partition(":")
    if kind == "plane":
        values = [float(v) for v in rest.split(",")]
        if len(values) != 5:
            raise ValueError("plane score model needs nx,ny,nz,offset,blur")
        normal = np.asarray(values[:3])
        normal = normal / np.linalg.norm(normal)
        return PlaneScoreModel(normal, values[3], values[4])
    if kind == "bridge":
        import shlex

        command = shlex.split(rest)
        if not command:
            raise ValueError("bridge score model needs a command line")
        return SubprocessScoreModel(command, timeout=timeout)
    raise ValueError(f"unknown score model spec {spec!r}")


def run_reconstruction(scene: "SceneSpec | str", cfg: AcquisitionConfig, mode,
                       out_dir, regularizer: "RegularizerConfig | None" = None,
                       score_model=None, seed: int = 0,
                       ground_truth_metrics: bool = True) -> dict:
    """Per-pixel joint ML over a scene, optional regularization, PLY export.

    Returns a summary dict with metric values and written paths.  With the
    regularizer disabled the estimates CSV is exactly the pixelwise output.
    """
    mode = DetectorMode.parse(mode)
    spec = load_scene_file(scene) if not isinstance(scene, SceneSpec) else scene
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    data = simulate_scene(spec, cfg, seed, mode)
    valid = np.flatnonzero(spec.valid)
    estimates: "list[Estimate]" = []
    for p in range(spec.grid.size):
        if spec.valid[p]:
            estimates.append(joint_ml(data[p], cfg, mode))
        else:
            estimates.append(Estimate(0.0, 0.0, math.nan, flags=("no_hit",)))

    est_csv = out_dir / "estimates.csv"
    write_estimates_csv(estimates, est_csv)

    s_hat = np.array([e.signal_flux for e in estimates])
    b_hat = np.array([e.background_flux for e in estimates])
    z_hat = np.array([e.depth for e in estimates])

    summary = {"estimates_csv": str(est_csv), "pixels": int(spec.grid.size),
               "valid_pixels": int(valid.size), "mode": mode.value}
    if ground_truth_metrics and valid.size:
        summary["pixelwise_rmse_z"] = rmse(z_hat[valid], spec.depths[valid])
        summary["pixelwise_mae_z"] = mae(z_hat[valid], spec.depths[valid])
        summary["pixelwise_rmse_S"] = rmse(s_hat[valid], spec.signal_flux[valid])

    depths_final = z_hat
    sigma = np.zeros(spec.grid.size)
    if regularizer is not None:
        if score_model is None:
            raise ScoreModelFailure("regularization requested without a score model")
        sub_grid = spec.grid.subset(spec.valid)
        sub_data = [data[p] for p in valid]
        reg_depths, trace = regularize_depths(
            sub_grid, sub_data, (s_hat[valid], b_hat[valid], z_hat[valid]), cfg, mode,
            regularizer, score_model, seed=seed,
            ground_truth=spec.depths[valid] if ground_truth_metrics else None,
        )
        depths_final = z_hat.copy()
        depths_final[valid] = reg_depths
        cloud = to_cartesian(sub_grid, reg_depths)
        sigma_valid = depth_score(cloud, sub_grid, np.asarray(score_model(cloud.points), dtype=float))
        sigma[valid] = sigma_valid
        trace_path = out_dir / "trace.csv"
        if trace and "rmse" in trace[0]:
            lines = ["iteration,rmse,mae"] + [
                f"{t['iteration']},{t['rmse']:.17g},{t['mae']:.17g}" for t in trace
            ]
        else:
            lines = ["iteration,mean_step"] + [
                f"{t['iteration']},{t['mean_step']:.17g}" for t in trace
            ]
        trace_path.write_text("\n".join(lines) + "\n")
        summary["trace_csv"] = str(trace_path)
        if ground_truth_metrics and valid.size:
            summary["regularized_rmse_z"] = rmse(reg_depths, spec.depths[valid])
            summary["regularized_mae_z"] = mae(reg_depths, spec.depths[valid])

    ply_path = out_dir / "pointcloud.ply"
    cloud = to_cartesian(spec.grid.subset(spec.valid), depths_final[valid]) if valid.size else None
    if cloud is not None:
        save_point_cloud(ply_path, cloud.points, s_hat[valid], b_hat[valid], sigma[valid])
        summary["ply"] = str(ply_path)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary
