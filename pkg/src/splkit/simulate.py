"""Detection-time simulation for ideal, synchronous and free-running detectors.

Arrivals are drawn exactly by superposition: per period, a Poisson number of
signal arrivals at ``k * rep_period + tau + N(0, w^2)`` plus a Poisson number
of background arrivals uniform over the period.  The three detector models
then thin the arrival stream:

* ideal        -- keeps everything,
* synchronous  -- keeps the first arrival of each armed period; a period is
                  unarmed when the previous period's detection landed within
                  ``dead_time`` of the period end,
* free-running -- keeps an arrival iff it exceeds the last kept time plus
                  ``dead_time``; the detector starts armed at t = 0.

Everything is a pure function of (params, config, seed); identical seeds
reproduce identical outputs bit-exactly.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import AcquisitionConfig, DetectorMode, PulseProfile, SceneParams, check_scene

__all__ = [
    "RngSeed",
    "DetectionSet",
    "Histogram",
    "sample_arrivals",
    "detect_ideal",
    "detect_synchronous",
    "detect_free_running",
    "detect",
    "simulate_detections",
    "count_spillover",
    "quantize",
    "shift_histogram",
    "save_histogram",
    "load_histogram",
    "export_detections",
    "import_detections",
]


@dataclass(frozen=True)
class RngSeed:
    """Reproducible stream identity: (seed, stream) -> independent generator."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF])


@dataclass(frozen=True)
class DetectionSet:
    """Sorted absolute detection times over one acquisition.

    ``armed_periods`` is the synchronous-mode armed-period count N_r'
    (None for other modes).
    """

    times: np.ndarray
    rep_period: float
    n_pulses: int
    armed_periods: "int | None" = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if t.size and (np.any(np.diff(t) <= 0.0)):
            raise ValueError("times must be strictly increasing")
        if t.size and (t[0] < 0.0 or t[-1] >= self.n_pulses * self.rep_period):
            raise ValueError("times must lie in [0, n_pulses * rep_period)")
        if self.armed_periods is not None and not (0 <= self.armed_periods <= self.n_pulses):
            raise ValueError("armed_periods must lie in [0, n_pulses]")

    @property
    def count(self) -> int:
        return int(self.times.size)

    @property
    def relative_times(self) -> np.ndarray:
        """Detection times modulo the repetition period."""
        return np.mod(self.times, self.rep_period)


@dataclass(frozen=True)
class Histogram:
    """Counts of relative detection times in M uniform bins of ``bin_size``.

    Bin m collects times in [m * bin_size, (m+1) * bin_size) and is
    represented at its center (m + 1/2) * bin_size.
    """

    counts: np.ndarray
    bin_size: float
    armed_periods: "int | None" = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size < 1:
            raise ValueError("counts must be a one-dimensional, non-empty array")
        if np.any(c < 0):
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64, copy=False))

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) * self.bin_size


def sample_arrivals(params: SceneParams, cfg: AcquisitionConfig, rng: "RngSeed | np.random.Generator") -> np.ndarray:
    """Draw sorted photon arrival times on [0, n_pulses * rep_period).

    Exact superposition sampling: per period, Poisson(S) signal arrivals with
    Gaussian pulse jitter around the time of flight and Poisson(B) background
    arrivals uniform over the period.  Arrivals jittered outside the
    acquisition window are discarded.
    """
    check_scene(params, cfg)
    gen = rng.generator() if isinstance(rng, RngSeed) else rng
    n_r, t_r = cfg.n_pulses, cfg.rep_period
    tau = params.time_of_flight

    n_sig = gen.poisson(params.signal_flux, size=n_r)
    period = np.repeat(np.arange(n_r), n_sig)
    signal = period * t_r + tau + gen.standard_normal(period.size) * cfg.pulse.width

    n_bg = gen.poisson(params.background_flux, size=n_r)
    period_bg = np.repeat(np.arange(n_r), n_bg)
    background = (period_bg + gen.random(period_bg.size)) * t_r

    arrivals = np.concatenate([signal, background])
    arrivals = arrivals[(arrivals >= 0.0) & (arrivals < n_r * t_r)]
    arrivals.sort(kind="stable")
    return arrivals


def count_spillover(relative_times: np.ndarray, cfg: AcquisitionConfig) -> int:
    """Number of detections whose dead time spills into the next period."""
    return int(np.count_nonzero(np.asarray(relative_times) >= cfg.rep_period - cfg.dead_time))


def detect_ideal(arrivals: np.ndarray, cfg: AcquisitionConfig) -> DetectionSet:
    """No dead time: the detection process equals the arrival process."""
    return DetectionSet(np.asarray(arrivals, dtype=float).copy(), cfg.rep_period, cfg.n_pulses,
                        armed_periods=cfg.n_pulses)


def detect_synchronous(arrivals: np.ndarray, cfg: AcquisitionConfig) -> DetectionSet:
    """First arrival of each armed period; spillover disarms the next period.

    The recorded armed-period count is N_r' = n_pulses - #{X_i >= rep_period
    - dead_time}, computed from the kept detections.
    """
    arrivals = np.asarray(arrivals, dtype=float)
    t_r, n_r = cfg.rep_period, cfg.n_pulses
    # Index of the first arrival at or after each period start.
    starts = np.searchsorted(arrivals, np.arange(n_r + 1) * t_r)
    gate = cfg.gate_width if cfg.gate_width is not None else t_r

    kept = []
    armed = True
    for k in range(n_r):
        if not armed:
            armed = True  # dead time never spans more than one full period
            continue
        i, j = starts[k], starts[k + 1]
        if i == j:
            continue
        first = arrivals[i]
        rel = first - k * t_r
        if rel >= gate:
            continue
        kept.append(first)
        armed = rel < t_r - cfg.dead_time

    kept = np.asarray(kept, dtype=float)
    rel = np.mod(kept, t_r)
    return DetectionSet(kept, t_r, n_r, armed_periods=n_r - count_spillover(rel, cfg))


def detect_free_running(arrivals: np.ndarray, cfg: AcquisitionConfig) -> DetectionSet:
    """Greedy scan keeping arrivals that clear the last kept time + dead time."""
    arrivals = np.asarray(arrivals, dtype=float)
    kept = []
    i, n = 0, arrivals.size
    lst = arrivals.tolist()
    while i < n:
        t = lst[i]
        kept.append(t)
        # Skip everything inside the dead window (t, t + dead_time].
        i = bisect.bisect_right(lst, t + cfg.dead_time, i + 1)
    return DetectionSet(np.asarray(kept, dtype=float), cfg.rep_period, cfg.n_pulses)


_DETECTORS = {
    DetectorMode.IDEAL: detect_ideal,
    DetectorMode.SYNCHRONOUS: detect_synchronous,
    DetectorMode.FREE_RUNNING: detect_free_running,
}


def detect(arrivals: np.ndarray, cfg: AcquisitionConfig, mode: "DetectorMode | str | None" = None) -> DetectionSet:
    """Apply the detector model for ``mode`` (default: the config's mode)."""
    mode = cfg.mode if mode is None else DetectorMode.parse(mode)
    return _DETECTORS[mode](arrivals, cfg)


def simulate_detections(params: SceneParams, cfg: AcquisitionConfig,
                        rng: "RngSeed | np.random.Generator",
                        mode: "DetectorMode | str | None" = None) -> DetectionSet:
    """Sample arrivals and run the detector model in one step."""
    return detect(sample_arrivals(params, cfg, rng), cfg, mode)


def quantize(detections: DetectionSet, cfg: AcquisitionConfig) -> Histogram:
    """Bin relative detection times into the config's histogram grid."""
    m = cfg.n_bins
    idx = np.floor(detections.relative_times / cfg.bin_size).astype(np.int64)
    np.clip(idx, 0, m - 1, out=idx)  # guard float edge at exactly rep_period
    counts = np.bincount(idx, minlength=m)
    return Histogram(counts, cfg.bin_size, armed_periods=detections.armed_periods)


def shift_histogram(hist: Histogram, shift_time: float, cfg: AcquisitionConfig) -> Histogram:
    """Cyclically shift bins by round(shift_time / bin_size); total preserved."""
    s = round(shift_time / cfg.bin_size) % hist.n_bins
    return Histogram(np.roll(hist.counts, s), hist.bin_size, armed_periods=hist.armed_periods)


# ---------------------------------------------------------------------------
# File formats


def save_histogram(hist: Histogram, path, cfg: AcquisitionConfig) -> None:
    """Write ``bin_index,count`` CSV plus a JSON sidecar next to it."""
    path = Path(path)
    lines = ["bin_index,count"]
    lines += [f"{m},{int(c)}" for m, c in enumerate(hist.counts)]
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "t_r": cfg.rep_period,
        "n_r": cfg.n_pulses,
        "t_d": cfg.dead_time,
        "bin_size": hist.bin_size,
        "mode": cfg.mode.value,
        "pulse_width": cfg.pulse.width,
    }
    if hist.armed_periods is not None:
        sidecar["armed_periods"] = int(hist.armed_periods)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_histogram(path) -> "tuple[Histogram, AcquisitionConfig]":
    """Read a histogram CSV and its mandatory JSON sidecar."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FormatError(f"{sidecar_path}: missing histogram sidecar")
    try:
        meta = json.loads(sidecar_path.read_text())
        cfg = AcquisitionConfig(
            rep_period=float(meta["t_r"]),
            n_pulses=int(meta["n_r"]),
            dead_time=float(meta["t_d"]),
            mode=DetectorMode.parse(meta["mode"]),
            bin_size=float(meta["bin_size"]),
            pulse=PulseProfile(float(meta.get("pulse_width", 1e-10))),
        )
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"{sidecar_path}: invalid sidecar ({exc})") from exc

    counts = np.zeros(cfg.n_bins, dtype=np.int64)
    with path.open() as fh:
        header = fh.readline().strip()
        if header != "bin_index,count":
            raise FormatError(f"{path}:1: expected header 'bin_index,count'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                idx_s, count_s = line.split(",")
                idx, count = int(idx_s), int(count_s)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: malformed row {line!r}") from exc
            if not (0 <= idx < cfg.n_bins):
                raise FormatError(f"{path}:{lineno}: bin index {idx} out of range")
            counts[idx] = count
    armed = meta.get("armed_periods")
    hist = Histogram(counts, cfg.bin_size, armed_periods=None if armed is None else int(armed))
    return hist, cfg


def export_detections(detections: DetectionSet, path) -> None:
    """One absolute time per line, scientific notation, 17 significant digits."""
    Path(path).write_text("".join(f"{t:.16e}\n" for t in detections.times))


def import_detections(path, cfg: AcquisitionConfig, armed_periods: "int | None" = None) -> DetectionSet:
    text = Path(path).read_text().split()
    times = np.asarray([float(tok) for tok in text], dtype=float)
    return DetectionSet(times, cfg.rep_period, cfg.n_pulses, armed_periods=armed_periods)
