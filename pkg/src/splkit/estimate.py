"""Joint maximum-likelihood estimation of flux and depth from histograms.

Depth estimation is matched filtering: the candidate time of flight runs
over the M bin centers and the winning bin maximizes the histogram's
correlation with a mode-specific filter,

    ideal:  w(t) = log(S f(t) + b)
    sync:   u(t) = log(S f(t) + b) - S F(t)
    free:   u on the histogram plus v(t) = S F(t) on the dead-time-shifted
            histogram.

Correlations are linear over signed bin-center offsets, which makes the
filter argmax equal the exhaustive per-bin log-likelihood argmax by
construction.  The fast path decomposes each filter into a constant, a step
(handled by histogram suffix sums) and a localized kernel (handled by
direct or FFT convolution); it matches the direct signed-offset sum to
floating-point reassociation error, far inside 1e-9 relative.

The joint estimator alternates an exact bounded flux maximization with the
matched filter, then refines the depth continuously inside the winning bin.
Ties in any argmax break toward the smallest bin index.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.signal

from .errors import EmptyHistogram
from .likelihood import FluxObjective, count_armed_periods, loglik
from .model import (
    FLUX_FLOOR,
    SPEED_OF_LIGHT,
    AcquisitionConfig,
    DetectorMode,
    SceneParams,
)
from .simulate import DetectionSet, Histogram, quantize, shift_histogram

__all__ = [
    "FilterBank",
    "Estimate",
    "InitConfig",
    "mf_depth_ideal",
    "mf_depth_sync",
    "mf_depth_free",
    "mf_correlation",
    "matched_filter_direct",
    "coates_correction",
    "CoatesResult",
    "coates_peak_depth",
    "log_pulse_depth",
    "init_censored_ideal",
    "init_censored_sync",
    "maximize_flux",
    "refine_depth",
    "joint_ml",
]

_DEPTH_MARGIN = 1e-6  # meters kept clear of 0 and max_depth in refinements


@dataclass(frozen=True)
class InitConfig:
    """Censoring-initializer settings.

    ``window`` is the censoring window width in seconds (None picks four
    pulse widths); ``flux_floor`` is the lower bound applied to flux seeds.
    """

    window: "float | None" = None
    flux_floor: float = FLUX_FLOOR

    def window_for(self, cfg: AcquisitionConfig) -> float:
        win = 4.0 * cfg.pulse.width if self.window is None else self.window
        if not win > 0.0:
            raise ValueError("censoring window must be positive")
        return win


@dataclass(frozen=True)
class Estimate:
    """Estimated scene parameters with solver diagnostics.

    ``history`` holds per-iteration (S, B, z, objective) tuples when the
    solver was asked to keep them.
    """

    signal_flux: float
    background_flux: float
    depth: float
    iterations: int = 0
    objective: float = math.nan
    flags: "tuple[str, ...]" = ()
    history: "list | None" = field(default=None, repr=False, compare=False)

    @property
    def time_of_flight(self) -> float:
        return 2.0 * self.depth / SPEED_OF_LIGHT

    def params(self) -> SceneParams:
        return SceneParams(self.signal_flux, self.background_flux, self.depth)


class FilterBank:
    """Mode filters for one (S, B, config) triple.

    ``w``, ``u`` and ``v`` are the discrete filters sampled (lazily) at
    non-negative lags j * bin_size for j in [0, M); ``evaluate_*`` give the
    continuous filters at arbitrary signed offsets.  The localized kernels
    used by the fast correlation path are exposed for tests.
    """

    def __init__(self, signal_flux: float, background_flux: float, cfg: AcquisitionConfig):
        if signal_flux < FLUX_FLOOR or background_flux < FLUX_FLOOR:
            raise ValueError("matched filtering requires fluxes at or above the 1e-5 floor")
        self.signal_flux = float(signal_flux)
        self.background_flux = float(background_flux)
        self.cfg = cfg
        self.rate = background_flux / cfg.rep_period
        self.log_rate = math.log(self.rate)
        # Localized kernels: both the pulse bump of w and the step residual of
        # F vanish (exactly, in double precision) beyond ~40 pulse widths.
        radius = int(math.ceil(42.0 * cfg.pulse.width / cfg.bin_size)) + 2
        offsets = np.arange(-radius, radius + 1) * cfg.bin_size
        self.kernel_min_lag = -radius
        self.log_kernel = self.evaluate_w(offsets) - self.log_rate
        self.step_residual_kernel = cfg.pulse.cdf(offsets) - (offsets >= 0.0)

    @functools.cached_property
    def _lags(self):
        return np.arange(self.cfg.n_bins) * self.cfg.bin_size

    @functools.cached_property
    def w(self):
        return self.evaluate_w(self._lags)

    @functools.cached_property
    def u(self):
        return self.evaluate_u(self._lags)

    @functools.cached_property
    def v(self):
        return self.evaluate_v(self._lags)

    def evaluate_w(self, t):
        return np.log(self.signal_flux * self.cfg.pulse.pdf(t) + self.rate)

    def evaluate_u(self, t):
        return self.evaluate_w(t) - self.signal_flux * self.cfg.pulse.cdf(t)

    def evaluate_v(self, t):
        return self.signal_flux * self.cfg.pulse.cdf(t)


def _correlate_local(values: np.ndarray, kernel: np.ndarray, min_lag: int) -> np.ndarray:
    """y[m] = sum_i kernel[i] * values[m + min_lag + i], zero outside bounds."""
    m, length = values.size, kernel.size
    reversed_kernel = kernel[::-1]
    if m * length <= 1_500_000:
        full = np.convolve(values, reversed_kernel, mode="full")
    else:
        full = scipy.signal.fftconvolve(values, reversed_kernel, mode="full")
    offset = min_lag + length - 1
    return full[offset:offset + m]


def _suffix_sums(values: np.ndarray) -> np.ndarray:
    """s[m] = sum_{m' >= m} values[m']."""
    return np.cumsum(values[::-1])[::-1].astype(float)


def mf_correlation(hist: Histogram, signal_flux: float, background_flux: float,
                   cfg: AcquisitionConfig, mode: "DetectorMode | str",
                   shifted: "Histogram | None" = None) -> np.ndarray:
    """Per-bin filter correlation; entry m equals the mode's log-likelihood
    at time of flight (m + 1/2) * bin_size up to a depth-independent constant."""
    mode = DetectorMode.parse(mode)
    bank = FilterBank(signal_flux, background_flux, cfg)
    counts = hist.counts.astype(float)
    corr = hist.total * bank.log_rate + _correlate_local(
        counts, bank.log_kernel, bank.kernel_min_lag
    )
    if mode is DetectorMode.IDEAL:
        return corr
    step = _suffix_sums(counts) + _correlate_local(
        counts, bank.step_residual_kernel, bank.kernel_min_lag
    )
    corr = corr - signal_flux * step
    if mode is DetectorMode.SYNCHRONOUS:
        return corr
    if shifted is None:
        raise ValueError("free-running correlation needs the shifted histogram")
    shifted_counts = shifted.counts.astype(float)
    step_shifted = _suffix_sums(shifted_counts) + _correlate_local(
        shifted_counts, bank.step_residual_kernel, bank.kernel_min_lag
    )
    return corr + signal_flux * step_shifted


def matched_filter_direct(hist: Histogram, signal_flux: float, background_flux: float,
                          cfg: AcquisitionConfig, mode: "DetectorMode | str",
                          shifted: "Histogram | None" = None) -> np.ndarray:
    """Reference correlation: direct filter sums over signed offsets.

    O(nnz * M); used to pin down the fast path in tests.
    """
    mode = DetectorMode.parse(mode)
    bank = FilterBank(signal_flux, background_flux, cfg)
    m = hist.n_bins
    lags = np.arange(m)

    def accumulate(counts, evaluate):
        nz = np.flatnonzero(counts)
        offsets = (nz[:, None] - lags[None, :]) * cfg.bin_size
        return counts[nz].astype(float) @ evaluate(offsets)

    if mode is DetectorMode.IDEAL:
        return accumulate(hist.counts, bank.evaluate_w)
    corr = accumulate(hist.counts, bank.evaluate_u)
    if mode is DetectorMode.SYNCHRONOUS:
        return corr
    if shifted is None:
        raise ValueError("free-running correlation needs the shifted histogram")
    return corr + accumulate(shifted.counts, bank.evaluate_v)


def _argmax_tof(corr: np.ndarray, cfg: AcquisitionConfig) -> float:
    best = int(np.argmax(corr))  # first maximum: smallest-index tie-break
    return (best + 0.5) * cfg.bin_size


def mf_depth_ideal(hist: Histogram, signal_flux, background_flux, cfg) -> float:
    """Time of flight maximizing the ideal-mode log matched filter."""
    if hist.total == 0:
        raise EmptyHistogram("matched filter needs at least one detection")
    return _argmax_tof(
        mf_correlation(hist, signal_flux, background_flux, cfg, DetectorMode.IDEAL), cfg
    )


def mf_depth_sync(hist: Histogram, signal_flux, background_flux, cfg) -> float:
    """Time of flight maximizing the synchronous-mode matched filter."""
    if hist.total == 0:
        raise EmptyHistogram("matched filter needs at least one detection")
    return _argmax_tof(
        mf_correlation(hist, signal_flux, background_flux, cfg, DetectorMode.SYNCHRONOUS), cfg
    )


def mf_depth_free(hist: Histogram, shifted: Histogram, signal_flux, background_flux, cfg) -> float:
    """Time of flight maximizing the free-running two-filter correlation.

    ``shifted`` must be the histogram cyclically shifted by the dead time;
    its bin grid implicitly rounds the dead time to a whole number of bins.
    """
    if hist.total == 0:
        raise EmptyHistogram("matched filter needs at least one detection")
    return _argmax_tof(
        mf_correlation(hist, signal_flux, background_flux, cfg, DetectorMode.FREE_RUNNING,
                       shifted=shifted), cfg
    )


# ---------------------------------------------------------------------------
# Coates's correction and censoring initializers


@dataclass(frozen=True)
class CoatesResult:
    """Per-bin arrival-intensity estimates with saturation flags.

    Saturated bins (no surviving trials) carry +inf and are flagged.
    """

    rates: np.ndarray
    saturated: np.ndarray

    @property
    def any_saturated(self) -> bool:
        return bool(self.saturated.any())


def coates_correction(hist: Histogram, n_trials: int) -> CoatesResult:
    """Pile-up-corrected per-bin intensity, log(R_m / (R_m - h[m])).

    R_m counts the trials (armed periods) still unconsumed before bin m.
    """
    counts = hist.counts.astype(float)
    if counts.sum() > n_trials:
        raise ValueError("histogram total exceeds the trial count")
    before = np.concatenate([[0.0], np.cumsum(counts)[:-1]])
    remaining = n_trials - before
    denom = remaining - counts
    saturated = denom <= 0.0
    rates = np.full_like(counts, np.inf)
    ok = ~saturated
    rates[ok] = np.log(remaining[ok] / denom[ok])
    # Bins after total exhaustion have remaining == denom == 0; a zero count
    # there carries no information, so only denom <= 0 with an actual count
    # stays flagged.
    idle = saturated & (counts == 0) & (remaining <= 0.0)
    rates[idle] = 0.0
    return CoatesResult(rates, saturated & ~idle)


def _cyclic_log_pulse_correlation(values: np.ndarray, cfg: AcquisitionConfig) -> np.ndarray:
    """Circular correlation with log f at center-wrapped offsets.

    The parabola -t^2/(2 w^2) is clipped where the pulse density underflows
    double precision; past that point every offset contributes the same
    constant, so far-away counts shift all lags equally instead of swamping
    the peak (the literal parabola would let background counts half a
    period away dominate, and its log would be -inf there anyway).
    """
    m = values.size
    k = np.arange(m)
    offsets = np.where(k <= m // 2, k, k - m) * cfg.bin_size
    w = cfg.pulse.width
    exponent = np.maximum(-0.5 * (offsets / w) ** 2, math.log(np.finfo(float).tiny))
    log_pulse = exponent - math.log(math.sqrt(2 * math.pi) * w)
    spec = np.fft.rfft(values) * np.conj(np.fft.rfft(log_pulse))
    return np.fft.irfft(spec, n=m)


def log_pulse_depth(values: np.ndarray, cfg: AcquisitionConfig) -> float:
    """Time of flight from the classical log-pulse matched filter."""
    corr = _cyclic_log_pulse_correlation(np.asarray(values, dtype=float), cfg)
    return (int(np.argmax(corr)) + 0.5) * cfg.bin_size


def coates_peak_depth(hist: Histogram, n_trials: int, cfg: AcquisitionConfig) -> float:
    """Classical baseline: Coates correction then log-pulse matched filtering."""
    corrected = coates_correction(hist, n_trials)
    rates = np.where(corrected.saturated, 0.0, corrected.rates)
    return log_pulse_depth(rates, cfg)


def _cyclic_window_mask(hist: Histogram, tof: float, window: float, cfg: AcquisitionConfig) -> np.ndarray:
    centers = hist.centers()
    dist = np.abs(centers - tof)
    dist = np.minimum(dist, cfg.rep_period - dist)
    return dist <= window / 2.0


def init_censored_ideal(hist: Histogram, cfg: AcquisitionConfig,
                        init: InitConfig = InitConfig()) -> Estimate:
    """Censoring initializer for ideal and free-running data.

    Pulse-only matched filter locates the peak; counts inside the window are
    attributed to signal, the remainder to background.
    """
    floor = init.flux_floor
    n = hist.total
    if n == 0:
        return Estimate(floor, floor, 0.5 * cfg.bin_size * SPEED_OF_LIGHT / 2.0,
                        flags=("degenerate",))
    tof = log_pulse_depth(hist.counts.astype(float), cfg)
    mask = _cyclic_window_mask(hist, tof, init.window_for(cfg), cfg)
    n_close = float(hist.counts[mask].sum())
    s_hat = max(n_close / cfg.n_pulses, floor)
    b_hat = max(n / cfg.n_pulses - s_hat, floor)
    return Estimate(s_hat, b_hat, tof * SPEED_OF_LIGHT / 2.0)


def init_censored_sync(hist: Histogram, n_trials: int, cfg: AcquisitionConfig,
                       init: InitConfig = InitConfig()) -> Estimate:
    """Censoring initializer on the Coates-corrected intensity estimate.

    The armed-period formula can undercount by one when the final period's
    detection spills past the acquisition, so the trial count is floored at
    the number of detections.
    """
    floor = init.flux_floor
    if hist.total == 0:
        return Estimate(floor, floor, 0.5 * cfg.bin_size * SPEED_OF_LIGHT / 2.0,
                        flags=("degenerate",))
    corrected = coates_correction(hist, max(n_trials, hist.total))
    rates = np.where(corrected.saturated, 0.0, corrected.rates)
    tof = log_pulse_depth(rates, cfg)
    mask = _cyclic_window_mask(hist, tof, init.window_for(cfg), cfg)
    s_hat = max(float(rates[mask].sum()), floor)
    b_hat = max(float(rates.sum()) - s_hat, floor)
    flags = ("saturated_bins",) if corrected.any_saturated else ()
    return Estimate(s_hat, b_hat, tof * SPEED_OF_LIGHT / 2.0, flags=flags)


# ---------------------------------------------------------------------------
# Bounded maximization


def maximize_flux(data, depth: float, mode: "DetectorMode | str", cfg: AcquisitionConfig,
                  init: "tuple[float, float]", armed_periods: "int | None" = None,
                  floor: float = FLUX_FLOOR):
    """Maximize the log-likelihood over (S, B) in a box at fixed depth.

    Returns (signal_flux, background_flux, converged).  The box is
    [floor, 10 * max(N / n_pulses, 1)] in both coordinates; the objective is
    concave, so the maximizer is unique and start-point independent.
    """
    objective = FluxObjective(cfg, data, depth, mode, armed_periods=armed_periods)
    upper = 10.0 * max(objective.n / cfg.n_pulses, 1.0)
    bounds = [(floor, upper), (floor, upper)]
    x0 = np.clip(np.asarray(init, dtype=float), floor, upper)

    def negated(x):
        value, grad = objective.value_and_grad(x[0], x[1])
        return -value, -grad

    result = scipy.optimize.minimize(
        negated, x0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-8},
    )
    # Convergence means the box-projected gradient vanished, whatever the
    # line search reported on its final wiggle.
    _, grad = objective.value_and_grad(float(result.x[0]), float(result.x[1]))
    projected = grad.copy()
    for i, (lo, hi) in enumerate(bounds):
        if (result.x[i] <= lo and grad[i] < 0.0) or (result.x[i] >= hi and grad[i] > 0.0):
            projected[i] = 0.0
    converged = bool(result.success) or float(np.abs(projected).max()) < 1e-8
    return float(result.x[0]), float(result.x[1]), converged


def refine_depth(data, signal_flux: float, background_flux: float, tof_grid: float,
                 mode: "DetectorMode | str", cfg: AcquisitionConfig,
                 armed_periods: "int | None" = None) -> float:
    """Continuous ascent of the likelihood in depth within one bin of the
    grid estimate; never returns a worse objective than the grid value."""
    half_c = SPEED_OF_LIGHT / 2.0
    z_grid = tof_grid * half_c
    lo = max((tof_grid - cfg.bin_size) * half_c, _DEPTH_MARGIN)
    hi = min((tof_grid + cfg.bin_size) * half_c, cfg.max_depth - _DEPTH_MARGIN)
    if not lo < hi:
        return z_grid

    def negated(zv):
        res = loglik(SceneParams(signal_flux, background_flux, float(zv[0])), cfg, data,
                     mode, armed_periods=armed_periods)
        return -res.value, np.array([-res.grad[2]])

    result = scipy.optimize.minimize(
        negated, np.array([np.clip(z_grid, lo, hi)]), jac=True, method="L-BFGS-B",
        bounds=[(lo, hi)], options={"maxiter": 100, "ftol": 1e-15, "gtol": 1e-12},
    )
    z_new = float(result.x[0])
    base = loglik(SceneParams(signal_flux, background_flux, z_grid), cfg, data, mode,
                  armed_periods=armed_periods).value
    best = loglik(SceneParams(signal_flux, background_flux, z_new), cfg, data, mode,
                  armed_periods=armed_periods).value
    return z_new if best >= base else z_grid


def _resolve_armed(data, hist, cfg, mode):
    if mode is not DetectorMode.SYNCHRONOUS:
        return None
    armed = data.armed_periods if hasattr(data, "armed_periods") else None
    if armed is None:
        armed = count_armed_periods(hist, cfg)
    return armed


def joint_ml(data, cfg: AcquisitionConfig, mode: "DetectorMode | str | None" = None,
             n_outer: int = 5, refine: bool = True, joint_refine: bool = False,
             init: InitConfig = InitConfig(), keep_history: bool = False) -> Estimate:
    """Alternating maximization of the joint likelihood (flux step exact,
    depth step matched filter), followed by continuous depth refinement.

    ``data`` may be a DetectionSet (exact times drive the flux and
    refinement steps) or a Histogram.  Early exit when the depth moves less
    than a tenth of a bin and fluxes change less than 1e-6.
    """
    mode = cfg.mode if mode is None else DetectorMode.parse(mode)
    hist = data if isinstance(data, Histogram) else quantize(data, cfg)
    armed = _resolve_armed(data, hist, cfg, mode)

    if mode is DetectorMode.SYNCHRONOUS:
        seed = init_censored_sync(hist, armed, cfg, init)
    else:
        seed = init_censored_ideal(hist, cfg, init)
    if hist.total == 0:
        return Estimate(seed.signal_flux, seed.background_flux, seed.depth,
                        iterations=0,
                        objective=loglik(seed.params(), cfg, data, mode,
                                         armed_periods=armed).value,
                        flags=("degenerate",))

    shifted = shift_histogram(hist, cfg.dead_time, cfg) if mode is DetectorMode.FREE_RUNNING else None
    init_objective = loglik(seed.params(), cfg, data, mode, armed_periods=armed).value

    s_hat, b_hat, tof = seed.signal_flux, seed.background_flux, seed.time_of_flight
    flags: "list[str]" = list(seed.flags)
    history = []
    iterations = 0
    for _ in range(n_outer):
        iterations += 1
        s_new, b_new, converged = maximize_flux(
            data, tof * SPEED_OF_LIGHT / 2.0, mode, cfg, (s_hat, b_hat), armed_periods=armed
        )
        if not converged and "flux_nonconvergence" not in flags:
            flags.append("flux_nonconvergence")
        if mode is DetectorMode.IDEAL:
            tof_new = mf_depth_ideal(hist, s_new, b_new, cfg)
        elif mode is DetectorMode.SYNCHRONOUS:
            tof_new = mf_depth_sync(hist, s_new, b_new, cfg)
        else:
            tof_new = mf_depth_free(hist, shifted, s_new, b_new, cfg)
        if keep_history:
            history.append((s_new, b_new, tof_new * SPEED_OF_LIGHT / 2.0,
                            loglik(SceneParams(s_new, b_new, tof_new * SPEED_OF_LIGHT / 2.0),
                                   cfg, data, mode, armed_periods=armed).value))
        done = (
            abs(tof_new - tof) < cfg.bin_size / 10.0
            and abs(s_new - s_hat) < 1e-6
            and abs(b_new - b_hat) < 1e-6
        )
        s_hat, b_hat, tof = s_new, b_new, tof_new
        if done:
            break

    if refine:
        depth = refine_depth(data, s_hat, b_hat, tof, mode, cfg, armed_periods=armed)
    else:
        depth = tof * SPEED_OF_LIGHT / 2.0

    if joint_refine:
        s_hat, b_hat, depth, joint_flags = _joint_refine(
            data, cfg, mode, s_hat, b_hat, depth, armed, hist.total
        )
        flags += joint_flags

    objective = loglik(SceneParams(s_hat, b_hat, depth), cfg, data, mode,
                       armed_periods=armed).value
    if objective < init_objective:
        s_hat, b_hat, depth, objective = (seed.signal_flux, seed.background_flux,
                                          seed.depth, init_objective)
        flags.append("init_fallback")

    return Estimate(s_hat, b_hat, depth, iterations=iterations, objective=objective,
                    flags=tuple(flags), history=history if keep_history else None)


def _joint_refine(data, cfg, mode, s_hat, b_hat, depth, armed, total):
    """Optional final L-BFGS-B polish over all three parameters."""
    upper = 10.0 * max(total / cfg.n_pulses, 1.0)
    half_bin_z = cfg.bin_size * SPEED_OF_LIGHT / 2.0
    bounds = [
        (FLUX_FLOOR, upper),
        (FLUX_FLOOR, upper),
        (max(depth - half_bin_z, _DEPTH_MARGIN), min(depth + half_bin_z, cfg.max_depth - _DEPTH_MARGIN)),
    ]

    def negated(x):
        res = loglik(SceneParams(x[0], x[1], x[2]), cfg, data, mode, armed_periods=armed)
        return -res.value, -res.grad

    result = scipy.optimize.minimize(
        negated, np.array([s_hat, b_hat, depth]), jac=True, method="L-BFGS-B",
        bounds=bounds, options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-8},
    )
    start_value = -negated(np.array([s_hat, b_hat, depth]))[0]
    if -result.fun >= start_value:
        return float(result.x[0]), float(result.x[1]), float(result.x[2]), []
    return s_hat, b_hat, depth, ["joint_refine_fallback"]
