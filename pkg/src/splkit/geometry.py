"""Scan-grid geometry: spherical scan angles vs. Cartesian point clouds.

A raster-scanning system sweeps polar angle theta and azimuth phi; a point
at depth z along the line of sight of pixel p sits at

    x1 = z sin(theta) cos(phi)
    x2 = z cos(theta)
    x3 = -z sin(theta) sin(phi)

relative to the detector.  Depth is the Euclidean distance from the
detector, so the transforms are mutual inverses for z > 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, ZeroRange

__all__ = ["ScanGrid", "PointCloud", "to_cartesian", "to_depth", "line_of_sight"]


@dataclass(frozen=True)
class ScanGrid:
    """Scan angles (radians) and detector position (meters, default origin)."""

    theta: np.ndarray
    phi: np.ndarray
    detector: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).ravel()
        phi = np.asarray(self.phi, dtype=float).ravel()
        det = np.asarray(self.detector, dtype=float).reshape(3)
        if theta.size != phi.size or theta.size < 1:
            raise ValueError("theta and phi must be equally sized and non-empty")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi)) and np.all(np.isfinite(det))):
            raise ValueError("angles and detector position must be finite")
        if np.any(theta < 0.0) or np.any(theta > np.pi):
            raise ValueError("polar angles must lie in [0, pi]")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "detector", det)

    @property
    def size(self) -> int:
        return int(self.theta.size)

    def subset(self, mask) -> "ScanGrid":
        return ScanGrid(self.theta[mask], self.phi[mask], self.detector)

    @classmethod
    def raster(cls, theta_range, phi_range, shape, detector=(0.0, 0.0, 0.0)) -> "ScanGrid":
        """Uniform sweep: ``shape`` = (n_theta, n_phi), row-major pixel order."""
        n_t, n_p = shape
        theta = np.linspace(theta_range[0], theta_range[1], n_t)
        phi = np.linspace(phi_range[0], phi_range[1], n_p)
        tt, pp = np.meshgrid(theta, phi, indexing="ij")
        return cls(tt.ravel(), pp.ravel(), np.asarray(detector, dtype=float))


@dataclass(frozen=True)
class PointCloud:
    """Per-point depths and the matching Cartesian coordinates."""

    depths: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=float))
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        if self.points.shape != (self.depths.size, 3):
            raise ValueError("points must have shape (n, 3) matching depths")


def line_of_sight(grid: ScanGrid) -> np.ndarray:
    """Unit direction of each pixel's scan ray, shape (P, 3)."""
    st, ct = np.sin(grid.theta), np.cos(grid.theta)
    return np.stack([st * np.cos(grid.phi), ct, -st * np.sin(grid.phi)], axis=1)


def to_cartesian(grid: ScanGrid, depths) -> PointCloud:
    """Place each pixel's point at its depth along the line of sight."""
    depths = np.asarray(depths, dtype=float)
    if depths.shape != grid.theta.shape:
        raise ValueError("depths must match the grid size")
    if np.any(depths <= 0.0):
        raise NonPositiveDepth("depths must be strictly positive")
    return PointCloud(depths, grid.detector + depths[:, None] * line_of_sight(grid))


def to_depth(grid: ScanGrid, cloud: "PointCloud | np.ndarray") -> np.ndarray:
    """Distance of each point from the detector (inverse of to_cartesian)."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    offsets = points - grid.detector
    depths = np.linalg.norm(offsets, axis=1)
    if np.any(depths <= 0.0):
        raise ZeroRange("a point coincides with the detector")
    return depths
