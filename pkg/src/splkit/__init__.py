"""Single-photon lidar toolkit: simulation, ML estimation, regularization."""

from .errors import (
    EmptyHistogram,
    FormatError,
    MissingArmedCount,
    NonFiniteLikelihood,
    NonPositiveDepth,
    ScoreModelFailure,
    SplkitError,
    ZeroRange,
)
from .model import (
    FLUX_FLOOR,
    SPEED_OF_LIGHT,
    AcquisitionConfig,
    DetectorMode,
    PulseProfile,
    PulseTailWarning,
    SceneParams,
    cumulative_flux,
    single_period_flux,
    single_period_intensity,
)
from .simulate import (
    DetectionSet,
    Histogram,
    RngSeed,
    detect,
    detect_free_running,
    detect_ideal,
    detect_synchronous,
    quantize,
    sample_arrivals,
    shift_histogram,
    simulate_detections,
)
from .likelihood import (
    LogLikResult,
    count_armed_periods,
    loglik,
    loglik_free,
    loglik_ideal,
    loglik_sync,
)
from .estimate import (
    CoatesResult,
    Estimate,
    InitConfig,
    coates_correction,
    coates_peak_depth,
    init_censored_ideal,
    init_censored_sync,
    joint_ml,
    maximize_flux,
    mf_depth_free,
    mf_depth_ideal,
    mf_depth_sync,
    refine_depth,
)

__version__ = "0.1.0"
