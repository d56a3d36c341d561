"""Scene and acquisition model for single-photon lidar with dead time.

Photon arrivals at one scan location form an inhomogeneous Poisson process.
Within a repetition period of length ``rep_period`` the intensity is

    lam(t) = S * f(t - 2 z / c) + B / rep_period,    t in [0, rep_period),

where ``f`` is the (Gaussian) pulse profile, ``S`` the mean signal
detections per period, ``B`` the mean background detections per period and
``z`` the target depth.  Everything downstream (simulation, likelihoods,
matched filters, regularization) consumes the intensity and cumulative-flux
functions defined here.

Conventions fixed in this module:

* All times are seconds, depths are meters, ``SPEED_OF_LIGHT`` is exact.
* The cumulative pulse profile ``F`` is the Gaussian CDF centered at zero,
  so ``F(-inf) = 0`` and the per-period cumulative flux satisfies
  ``flux(rep_period) - flux(0) = S + B`` up to pulse-tail mass.
* Pulse tails are truncated at period boundaries, never wrapped.  A
  ``PulseTailWarning`` fires when the time of flight puts meaningful pulse
  mass outside the period (tau < 8 w or tau > rep_period - 8 w).

All types are immutable values and all functions are pure; they are safe to
use concurrently.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact by definition

#: Lower bound applied to flux estimates by initializers and optimizers so
#: that log terms stay finite.  Likelihood evaluation itself does not clamp.
FLUX_FLOOR = 1e-5

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class PulseTailWarning(UserWarning):
    """Meaningful pulse mass falls outside the repetition period."""


class DetectorMode(enum.Enum):
    """Detector reactivation policy."""

    IDEAL = "ideal"
    SYNCHRONOUS = "sync"
    FREE_RUNNING = "free"

    @classmethod
    def parse(cls, name: "str | DetectorMode") -> "DetectorMode":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {
            "ideal": cls.IDEAL,
            "sync": cls.SYNCHRONOUS,
            "synchronous": cls.SYNCHRONOUS,
            "free": cls.FREE_RUNNING,
            "free_running": cls.FREE_RUNNING,
            "freerunning": cls.FREE_RUNNING,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown detector mode {name!r}") from None


@dataclass(frozen=True)
class PulseProfile:
    """Gaussian laser pulse with RMS width ``width`` (seconds)."""

    width: float

    def __post_init__(self):
        if not (self.width > 0.0 and math.isfinite(self.width)):
            raise ValueError("pulse width must be a positive finite number of seconds")

    def pdf(self, t):
        """Pulse profile f(t) = exp(-t^2 / (2 w^2)) / (sqrt(2 pi) w)."""
        t = np.asarray(t, dtype=float)
        w = self.width
        return np.exp(-0.5 * (t / w) ** 2) / (_SQRT_2PI * w)

    def cdf(self, t):
        """Cumulative pulse profile F(t), the Gaussian CDF at scale ``width``."""
        t = np.asarray(t, dtype=float)
        return ndtr(t / self.width)

    def pdf_derivative(self, t):
        """d/dt f(t) = -(t / w^2) f(t); used by the analytic depth gradients."""
        t = np.asarray(t, dtype=float)
        return -(t / self.width**2) * self.pdf(t)


@dataclass(frozen=True)
class SceneParams:
    """Per-pixel unknowns: signal flux, background flux and depth.

    ``signal_flux`` and ``background_flux`` are mean detection counts per
    repetition period (dimensionless); ``depth`` is meters.
    """

    signal_flux: float
    background_flux: float
    depth: float

    def __post_init__(self):
        if not (self.signal_flux >= 0.0 and math.isfinite(self.signal_flux)):
            raise ValueError("signal_flux must be finite and >= 0")
        if not (self.background_flux >= 0.0 and math.isfinite(self.background_flux)):
            raise ValueError("background_flux must be finite and >= 0")
        if not (self.depth >= 0.0 and math.isfinite(self.depth)):
            raise ValueError("depth must be finite and >= 0")

    @property
    def time_of_flight(self) -> float:
        """Round-trip travel time tau = 2 z / c (seconds)."""
        return 2.0 * self.depth / SPEED_OF_LIGHT

    @property
    def total_flux(self) -> float:
        """Mean detections per period from signal plus background."""
        return self.signal_flux + self.background_flux

    @property
    def sbr(self) -> float:
        """Signal-to-background ratio S / B (background must be positive)."""
        if self.background_flux <= 0.0:
            raise ZeroDivisionError("SBR undefined for zero background flux")
        return self.signal_flux / self.background_flux

    def background_rate(self, cfg: "AcquisitionConfig") -> float:
        """Background intensity b = B / rep_period (1/seconds)."""
        return self.background_flux / cfg.rep_period


@dataclass(frozen=True)
class AcquisitionConfig:
    """System constants of one acquisition.

    ``bin_size`` must tile ``rep_period`` into an integer number of
    histogram bins.  ``gate_width`` optionally limits the synchronous
    detector's armed window within each period (hardware gating); ``None``
    means the detector is armed for the full period.
    """

    rep_period: float
    n_pulses: int
    dead_time: float
    mode: DetectorMode = DetectorMode.FREE_RUNNING
    bin_size: float = 1e-10
    pulse: PulseProfile = field(default_factory=lambda: PulseProfile(1e-10))
    gate_width: "float | None" = None

    def __post_init__(self):
        if not (self.rep_period > 0.0 and math.isfinite(self.rep_period)):
            raise ValueError("rep_period must be positive and finite")
        if not (isinstance(self.n_pulses, (int, np.integer)) and self.n_pulses >= 1):
            raise ValueError("n_pulses must be an integer >= 1")
        if not (0.0 <= self.dead_time < self.rep_period):
            raise ValueError("dead_time must satisfy 0 <= dead_time < rep_period")
        if not (self.bin_size > 0.0):
            raise ValueError("bin_size must be positive")
        m = round(self.rep_period / self.bin_size)
        if m < 1 or abs(m * self.bin_size - self.rep_period) > 8 * np.finfo(float).eps * self.rep_period:
            raise ValueError(
                f"bin_size {self.bin_size!r} does not tile rep_period {self.rep_period!r}"
            )
        if self.gate_width is not None and not (0.0 < self.gate_width <= self.rep_period):
            raise ValueError("gate_width must lie in (0, rep_period]")
        object.__setattr__(self, "mode", DetectorMode.parse(self.mode))

    @property
    def n_bins(self) -> int:
        """Number of histogram bins M = rep_period / bin_size."""
        return round(self.rep_period / self.bin_size)

    @property
    def max_depth(self) -> float:
        """Unambiguous depth z_max = c * rep_period / 2 (meters)."""
        return SPEED_OF_LIGHT * self.rep_period / 2.0

    @property
    def acquisition_time(self) -> float:
        return self.n_pulses * self.rep_period


def check_scene(params: SceneParams, cfg: AcquisitionConfig) -> None:
    """Validate a scene against an acquisition; warn on truncated pulse tails.

    Raises ValueError when the depth exceeds the unambiguous range.  Emits a
    PulseTailWarning when tau < 8 w or tau > rep_period - 8 w, where the
    truncated-tail convention starts to lose pulse mass.
    """
    if params.depth >= cfg.max_depth:
        raise ValueError(
            f"depth {params.depth} exceeds unambiguous range {cfg.max_depth}"
        )
    tau = params.time_of_flight
    w = cfg.pulse.width
    if params.signal_flux > 0.0 and not (8.0 * w <= tau <= cfg.rep_period - 8.0 * w):
        warnings.warn(
            "time of flight within 8 pulse widths of a period boundary; "
            "truncated pulse tails will bias the model",
            PulseTailWarning,
            stacklevel=2,
        )


def single_period_intensity(params: SceneParams, cfg: AcquisitionConfig, t):
    """Arrival intensity within one period, S f(t - tau) + B / rep_period.

    ``t`` must lie in [0, rep_period).  Strictly positive whenever the
    background flux is positive.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t >= cfg.rep_period):
        raise ValueError("t must lie in [0, rep_period)")
    return params.signal_flux * cfg.pulse.pdf(t - params.time_of_flight) + params.background_rate(cfg)


def single_period_flux(params: SceneParams, cfg: AcquisitionConfig, t):
    """Per-period cumulative flux  S F(t - tau) + (B / rep_period) t  for t >= 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("t must be >= 0")
    return (
        params.signal_flux * cfg.pulse.cdf(t - params.time_of_flight)
        + params.background_rate(cfg) * t
    )


def cumulative_flux(params: SceneParams, cfg: AcquisitionConfig, t):
    """Cumulative flux of the periodically extended intensity for any t >= 0.

    Splits t into whole periods plus remainder: full periods each contribute
    the total flux S + B, the remainder contributes the per-period flux.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("t must be >= 0")
    n_whole = np.floor(t / cfg.rep_period)
    remainder = t - n_whole * cfg.rep_period
    return n_whole * params.total_flux + single_period_flux(params, cfg, remainder)
