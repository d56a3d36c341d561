"""Estimator-style wrappers so the toolkit composes with scikit-learn.

``DepthFluxEstimator`` treats a histogram matrix of shape (n_pixels,
n_bins) as the design matrix: ``fit`` stores per-pixel estimates in
trailing-underscore attributes, ``predict`` maps histograms to depths.
``ScoreDepthRegularizer`` exposes the depth regularizer as a
``fit_transform`` over a SceneMeasurements bundle.  Both inherit
get_params/set_params from sklearn's BaseEstimator, so grid search and
cloning work as usual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .estimate import joint_ml
from .geometry import ScanGrid
from .model import AcquisitionConfig, DetectorMode
from .regularize import RegularizerConfig, regularize_depths
from .simulate import Histogram

__all__ = ["DepthFluxEstimator", "ScoreDepthRegularizer", "SceneMeasurements"]


@dataclass
class SceneMeasurements:
    """Multi-pixel measurement bundle fed to the regularizer.

    ``data`` is one DetectionSet or Histogram per pixel; ``estimates`` the
    pixelwise (signal flux, background flux, depth) arrays.
    """

    grid: ScanGrid
    config: AcquisitionConfig
    mode: DetectorMode
    data: list
    estimates: tuple
    ground_truth: "np.ndarray | None" = None


class DepthFluxEstimator(BaseEstimator):
    """Per-pixel joint ML estimation with an estimator interface.

    Parameters mirror joint_ml: detector ``mode``, the acquisition
    ``config``, outer iteration cap and the refinement switches.
    """

    def __init__(self, config=None, mode="free", n_outer=5, refine=True,
                 joint_refine=False):
        self.config = config
        self.mode = mode
        self.n_outer = n_outer
        self.refine = refine
        self.joint_refine = joint_refine

    def _validated(self, X):
        if self.config is None:
            raise ValueError("DepthFluxEstimator requires an AcquisitionConfig")
        X = check_array(X, ensure_2d=True, dtype=np.int64)
        if X.shape[1] != self.config.n_bins:
            raise ValueError(
                f"X has {X.shape[1]} bins but the config implies {self.config.n_bins}"
            )
        if X.min() < 0:
            raise ValueError("histogram counts must be non-negative")
        return X

    def _estimate_rows(self, X):
        mode = DetectorMode.parse(self.mode)
        out = []
        for row in X:
            hist = Histogram(row, self.config.bin_size)
            out.append(joint_ml(hist, self.config, mode, n_outer=self.n_outer,
                                refine=self.refine, joint_refine=self.joint_refine))
        return out

    def fit(self, X, y=None):
        """Estimate (S, B, z) for every histogram row of X."""
        X = self._validated(X)
        estimates = self._estimate_rows(X)
        self.signal_flux_ = np.array([e.signal_flux for e in estimates])
        self.background_flux_ = np.array([e.background_flux for e in estimates])
        self.depth_ = np.array([e.depth for e in estimates])
        self.objective_ = np.array([e.objective for e in estimates])
        self.n_iter_ = np.array([e.iterations for e in estimates])
        self.flags_ = [e.flags for e in estimates]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Depth estimates for histogram rows, without storing state."""
        X = self._validated(X)
        return np.array([e.depth for e in self._estimate_rows(X)])

    def fit_predict(self, X, y=None):
        return self.fit(X).depth_


class ScoreDepthRegularizer(BaseEstimator):
    """Score-guided depth-map refinement with a transformer interface."""

    def __init__(self, score_model=None, score_threshold=4.78e-3,
                 init_threshold=1.09e-3, step_size=3.74e-6, strength=9.70e6,
                 n_iter=200, n_neighbors=8, median_smoothing=True,
                 thresholding=True, noise=True, random_state=0):
        self.score_model = score_model
        self.score_threshold = score_threshold
        self.init_threshold = init_threshold
        self.step_size = step_size
        self.strength = strength
        self.n_iter = n_iter
        self.n_neighbors = n_neighbors
        self.median_smoothing = median_smoothing
        self.thresholding = thresholding
        self.noise = noise
        self.random_state = random_state

    def _config(self) -> RegularizerConfig:
        return RegularizerConfig(
            score_threshold=self.score_threshold,
            init_threshold=self.init_threshold,
            step_size=self.step_size,
            strength=self.strength,
            n_iter=self.n_iter,
            n_neighbors=self.n_neighbors,
            median_smoothing=self.median_smoothing,
            thresholding=self.thresholding,
            noise=self.noise,
        )

    def fit(self, scene: SceneMeasurements, y=None):
        if self.score_model is None:
            raise ValueError("ScoreDepthRegularizer requires a score model")
        depths, trace = regularize_depths(
            scene.grid, scene.data, scene.estimates, scene.config, scene.mode,
            self._config(), self.score_model, seed=self.random_state,
            ground_truth=scene.ground_truth,
        )
        self.depth_ = depths
        self.trace_ = trace
        return self

    def transform(self, scene: SceneMeasurements):
        check_is_fitted(self, "depth_")
        return self.depth_

    def fit_transform(self, scene: SceneMeasurements, y=None):
        return self.fit(scene).depth_
