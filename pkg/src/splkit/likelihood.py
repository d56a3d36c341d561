"""Log-likelihoods of detection data for the three detector modes.

Each function returns the log-likelihood value and its analytic gradient
with respect to (signal flux, background flux, depth).  Data may be a
DetectionSet (exact relative times) or a Histogram, in which case times are
evaluated at bin centers; with pre-quantized detection times the two paths
agree exactly.

Value conventions (x_i relative times, b = B / rep_period, tau = 2 z / c,
Lam = S + B, flux(t) = S F(t - tau) + b t):

* ideal:  -n_r Lam + sum log(S f(x_i - tau) + b)
* sync:   -(N_r' - N) Lam + sum [log lam(x_i) - flux(x_i)], conditioned on
          the armed-period count N_r'; the parameter-free binomial constant
          is dropped.
* free:   -n_r Lam + sum [log lam(x_i) + flux(y_i) + wrap_i Lam - flux(x_i)]
          with y_i = (x_i + dead_time) mod rep_period and wrap_i indicating
          that x_i + dead_time crossed the period end.  The wrap indicator
          carries no depth dependence.

Evaluation never clamps fluxes; a zero intensity at a detection raises
NonFiniteLikelihood instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingArmedCount, NonFiniteLikelihood
from .model import SPEED_OF_LIGHT, AcquisitionConfig, DetectorMode, SceneParams
from .simulate import DetectionSet, Histogram

__all__ = [
    "LogLikResult",
    "loglik_ideal",
    "loglik_sync",
    "loglik_free",
    "loglik",
    "count_armed_periods",
    "FluxObjective",
]


@dataclass(frozen=True)
class LogLikResult:
    """Log-likelihood value (nats) and gradient (d/dS, d/dB, d/dz)."""

    value: float
    grad: np.ndarray


def _as_events(data, cfg: AcquisitionConfig):
    """Normalize data to (relative times, weights, armed_periods, N)."""
    if isinstance(data, DetectionSet):
        x = data.relative_times
        return x, np.ones_like(x), data.armed_periods, data.count
    if isinstance(data, Histogram):
        if data.n_bins != cfg.n_bins:
            raise ValueError(
                f"histogram has {data.n_bins} bins but config implies {cfg.n_bins}"
            )
        nz = np.flatnonzero(data.counts)
        x = (nz + 0.5) * data.bin_size
        return x, data.counts[nz].astype(float), data.armed_periods, data.total
    raise TypeError(f"unsupported data type {type(data).__name__}")


def count_armed_periods(data, cfg: AcquisitionConfig) -> int:
    """Armed periods n_r - #{x_i >= rep_period - dead_time} from the data."""
    x, weights, _, _ = _as_events(data, cfg)
    spill = float(weights[x >= cfg.rep_period - cfg.dead_time].sum())
    return int(round(cfg.n_pulses - spill))


def _pulse_terms(params: SceneParams, cfg: AcquisitionConfig, x):
    tau = params.time_of_flight
    f = cfg.pulse.pdf(x - tau)
    lam = params.signal_flux * f + params.background_rate(cfg)
    if np.any(lam <= 0.0):
        raise NonFiniteLikelihood(
            "zero intensity at a detection time; likelihood diverges"
        )
    return f, lam


def loglik_ideal(params: SceneParams, cfg: AcquisitionConfig, data) -> LogLikResult:
    x, w, _, _ = _as_events(data, cfg)
    n_r = cfg.n_pulses
    if x.size == 0:
        return LogLikResult(-n_r * params.total_flux, np.array([-n_r, -n_r, 0.0]))
    f, lam = _pulse_terms(params, cfg, x)
    tau = params.time_of_flight
    value = -n_r * params.total_flux + float(w @ np.log(lam))
    inv = w / lam
    d_s = -n_r + float(inv @ f)
    d_b = -n_r + float(inv.sum()) / cfg.rep_period
    d_z = -(2.0 / SPEED_OF_LIGHT) * params.signal_flux * float(inv @ cfg.pulse.pdf_derivative(x - tau))
    return LogLikResult(value, np.array([d_s, d_b, d_z]))


def loglik_sync(params: SceneParams, cfg: AcquisitionConfig, data,
                armed_periods: "int | None" = None) -> LogLikResult:
    x, w, data_armed, n = _as_events(data, cfg)
    armed = armed_periods if armed_periods is not None else data_armed
    if armed is None:
        raise MissingArmedCount(
            "synchronous likelihood needs the armed-period count; pass "
            "armed_periods= or use count_armed_periods()"
        )
    lead = armed - n
    if x.size == 0:
        return LogLikResult(-lead * params.total_flux, np.array([-lead, -lead, 0.0]))
    f, lam = _pulse_terms(params, cfg, x)
    tau = params.time_of_flight
    big_f = cfg.pulse.cdf(x - tau)
    b_rate = params.background_rate(cfg)
    value = -lead * params.total_flux + float(
        w @ (np.log(lam) - params.signal_flux * big_f - b_rate * x)
    )
    inv = w / lam
    two_c = 2.0 / SPEED_OF_LIGHT
    d_s = -lead + float(inv @ f) - float(w @ big_f)
    d_b = -lead + float(inv.sum()) / cfg.rep_period - float(w @ x) / cfg.rep_period
    # d/dz chains through both f and F; the -(2/c) factor comes from tau = 2z/c.
    d_z = -two_c * params.signal_flux * float(inv @ cfg.pulse.pdf_derivative(x - tau)) \
        + two_c * params.signal_flux * float(w @ f)
    return LogLikResult(value, np.array([d_s, d_b, d_z]))


def loglik_free(params: SceneParams, cfg: AcquisitionConfig, data) -> LogLikResult:
    x, w, _, _ = _as_events(data, cfg)
    n_r, t_r = cfg.n_pulses, cfg.rep_period
    if x.size == 0:
        return LogLikResult(-n_r * params.total_flux, np.array([-n_r, -n_r, 0.0]))
    f, lam = _pulse_terms(params, cfg, x)
    tau = params.time_of_flight
    wrap = (x + cfg.dead_time >= t_r).astype(float)
    y = x + cfg.dead_time - wrap * t_r
    big_f_x = cfg.pulse.cdf(x - tau)
    big_f_y = cfg.pulse.cdf(y - tau)
    f_y = cfg.pulse.pdf(y - tau)
    b_rate = params.background_rate(cfg)
    s = params.signal_flux
    value = -n_r * params.total_flux + float(
        w @ (
            np.log(lam)
            + s * big_f_y + b_rate * y + wrap * params.total_flux
            - s * big_f_x - b_rate * x
        )
    )
    inv = w / lam
    two_c = 2.0 / SPEED_OF_LIGHT
    d_s = -n_r + float(inv @ f) + float(w @ (big_f_y + wrap - big_f_x))
    d_b = -n_r + float(inv.sum()) / t_r + float(w @ ((y - x) / t_r + wrap))
    d_z = -two_c * s * float(inv @ cfg.pulse.pdf_derivative(x - tau)) \
        + two_c * s * float(w @ (f - f_y))
    return LogLikResult(value, np.array([d_s, d_b, d_z]))


def loglik(params: SceneParams, cfg: AcquisitionConfig, data,
           mode: "DetectorMode | str | None" = None,
           armed_periods: "int | None" = None) -> LogLikResult:
    """Mode-dispatching log-likelihood."""
    mode = cfg.mode if mode is None else DetectorMode.parse(mode)
    if mode is DetectorMode.IDEAL:
        return loglik_ideal(params, cfg, data)
    if mode is DetectorMode.SYNCHRONOUS:
        return loglik_sync(params, cfg, data, armed_periods=armed_periods)
    return loglik_free(params, cfg, data)


class FluxObjective:
    """Log-likelihood as a function of (S, B) at fixed depth.

    Precomputes every depth-dependent pulse term once so that repeated
    evaluations inside the flux maximizer cost a handful of vector
    operations.  Matches loglik() exactly on the same inputs.
    """

    def __init__(self, cfg: AcquisitionConfig, data, depth: float,
                 mode: "DetectorMode | str | None" = None,
                 armed_periods: "int | None" = None):
        mode = cfg.mode if mode is None else DetectorMode.parse(mode)
        x, w, data_armed, n = _as_events(data, cfg)
        tau = 2.0 * depth / SPEED_OF_LIGHT
        self.mode = mode
        self.t_r = cfg.rep_period
        self.w = w
        self.n = n
        self.f = cfg.pulse.pdf(x - tau)
        if mode is DetectorMode.IDEAL:
            self.lead = cfg.n_pulses
            self.extra_s = np.zeros_like(x)
            self.extra_b = np.zeros_like(x)
        elif mode is DetectorMode.SYNCHRONOUS:
            armed = armed_periods if armed_periods is not None else data_armed
            if armed is None:
                raise MissingArmedCount("flux objective for sync mode needs armed_periods")
            self.lead = armed - n
            self.extra_s = -cfg.pulse.cdf(x - tau)
            self.extra_b = -x / self.t_r
        else:
            self.lead = cfg.n_pulses
            wrap = (x + cfg.dead_time >= self.t_r).astype(float)
            y = x + cfg.dead_time - wrap * self.t_r
            self.extra_s = cfg.pulse.cdf(y - tau) + wrap - cfg.pulse.cdf(x - tau)
            self.extra_b = (y - x) / self.t_r + wrap
        self._sum_extra_s = float(w @ self.extra_s)
        self._sum_extra_b = float(w @ self.extra_b)

    def value_and_grad(self, signal_flux: float, background_flux: float):
        lam = signal_flux * self.f + background_flux / self.t_r
        if np.any(lam <= 0.0):
            raise NonFiniteLikelihood("zero intensity inside flux objective")
        value = (
            -self.lead * (signal_flux + background_flux)
            + float(self.w @ np.log(lam))
            + signal_flux * self._sum_extra_s
            + background_flux * self._sum_extra_b
        )
        inv = self.w / lam
        d_s = -self.lead + float(inv @ self.f) + self._sum_extra_s
        d_b = -self.lead + float(inv.sum()) / self.t_r + self._sum_extra_b
        return value, np.array([d_s, d_b])
