"""Multi-pixel ground-truth scenes for end-to-end simulation.

A scene assigns every scan-grid pixel a ground truth (signal flux,
background flux, depth).  Depths come either from closed-form surfaces
(plane, sphere, step) or from ray-casting a colored triangle mesh; mesh
colors set the signal flux as S = S_max * (r + g + b) / 3 interpolated at
the hit point.  Pixels whose ray misses the surface are flagged and
excluded downstream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import ScanGrid, line_of_sight
from .model import AcquisitionConfig, SceneParams
from .simulate import DetectionSet, RngSeed, sample_arrivals, detect

__all__ = [
    "TriangleMesh",
    "SceneSpec",
    "load_mesh",
    "raycast_scene",
    "parametric_scene",
    "simulate_scene",
    "save_scene_spec",
    "load_scene_file",
    "export_ground_truth",
]

_MIN_TRIANGLE_AREA = 1e-18  # m^2; smaller triangles are skipped as degenerate


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices (meters), triangle index triples, optional vertex RGB in [0, 1]."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: "np.ndarray | None" = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must have shape (n, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must have shape (k, 3)")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face indices out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=float)
            if c.shape != v.shape:
                raise ValueError("colors must match vertices in shape")
            if c.min() < 0.0 or c.max() > 1.0:
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", c)

    @property
    def n_triangles(self) -> int:
        return int(len(self.faces))


@dataclass(frozen=True)
class SceneSpec:
    """Scan grid plus per-pixel ground truth and a validity mask."""

    grid: ScanGrid
    signal_flux: np.ndarray
    background_flux: np.ndarray
    depths: np.ndarray
    valid: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.grid.size
        for name in ("signal_flux", "background_flux", "depths", "valid"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, arr)

    def pixel_params(self, p: int) -> SceneParams:
        return SceneParams(float(self.signal_flux[p]), float(self.background_flux[p]),
                           float(self.depths[p]))


# ---------------------------------------------------------------------------
# Mesh loading (OBJ with optional xyzrgb vertices, ASCII PLY with colors)


def _load_obj(path: Path) -> TriangleMesh:
    vertices, colors, faces = [], [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) not in (4, 7):
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 or 6 floats")
                vertices.append([float(v) for v in parts[1:4]])
                colors.append([float(v) for v in parts[4:7]] if len(parts) == 7 else None)
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) < 3:
                    raise FormatError(f"{path}:{lineno}: face needs at least 3 vertices")
                for i in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[i], idx[i + 1]])
    has_colors = all(c is not None for c in colors) and len(colors) > 0
    return TriangleMesh(
        np.asarray(vertices), np.asarray(faces, dtype=np.int64),
        np.asarray(colors, dtype=float) if has_colors else None,
    )


def _load_ply(path: Path) -> TriangleMesh:
    with path.open() as fh:
        if fh.readline().strip() != "ply":
            raise FormatError(f"{path}:1: not a PLY file")
        if "ascii" not in fh.readline():
            raise FormatError(f"{path}:2: only ASCII PLY is supported")
        n_vertex = n_face = 0
        properties: list[str] = []
        element = None
        for line in fh:
            tokens = line.split()
            if tokens[0] == "element":
                element = tokens[1]
                if element == "vertex":
                    n_vertex = int(tokens[2])
                elif element == "face":
                    n_face = int(tokens[2])
            elif tokens[0] == "property" and element == "vertex":
                properties.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
        cols = {name: i for i, name in enumerate(properties)}
        vertices = np.empty((n_vertex, 3))
        has_colors = {"red", "green", "blue"} <= set(cols)
        colors = np.empty((n_vertex, 3)) if has_colors else None
        for i in range(n_vertex):
            values = fh.readline().split()
            vertices[i] = [float(values[cols[a]]) for a in ("x", "y", "z")]
            if has_colors:
                rgb = [float(values[cols[a]]) for a in ("red", "green", "blue")]
                colors[i] = [v / 255.0 if v > 1.0 else v for v in rgb]
        faces = []
        for _ in range(n_face):
            values = fh.readline().split()
            count, idx = int(values[0]), [int(v) for v in values[1:]]
            for k in range(1, count - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriangleMesh(vertices, np.asarray(faces, dtype=np.int64), colors)


def load_mesh(path) -> TriangleMesh:
    """Load an OBJ (xyz or xyzrgb vertices) or ASCII PLY triangle mesh."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    raise FormatError(f"{path}: unsupported mesh format {path.suffix!r}")


# ---------------------------------------------------------------------------
# Scene generation


def _ray_mesh_hits(origin: np.ndarray, directions: np.ndarray, mesh: TriangleMesh):
    """Nearest hit per ray: returns (depths, face index, barycentric u, v).

    Moller-Trumbore over all (ray, triangle) pairs; misses get depth inf.
    Degenerate triangles (area below 1e-18 m^2) are skipped with a warning.
    """
    v0 = mesh.vertices[mesh.faces[:, 0]]
    edge1 = mesh.vertices[mesh.faces[:, 1]] - v0
    edge2 = mesh.vertices[mesh.faces[:, 2]] - v0
    area2 = np.linalg.norm(np.cross(edge1, edge2), axis=1)
    keep = area2 > 2.0 * _MIN_TRIANGLE_AREA
    if not np.all(keep):
        warnings.warn(f"skipping {int((~keep).sum())} degenerate triangle(s)", RuntimeWarning)
        v0, edge1, edge2 = v0[keep], edge1[keep], edge2[keep]
    face_ids = np.flatnonzero(keep)

    n_rays = directions.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_face = np.full(n_rays, -1, dtype=np.int64)
    best_uv = np.zeros((n_rays, 2))
    if len(v0) == 0:
        return best_t, best_face, best_uv

    # Chunk rays to bound the (rays x triangles) temporaries.
    chunk = max(1, int(4_000_000 // max(len(v0), 1)))
    for start in range(0, n_rays, chunk):
        d = directions[start:start + chunk]  # (r, 3)
        pvec = np.cross(d[:, None, :], edge2[None, :, :])  # (r, k, 3)
        det = np.einsum("kj,rkj->rk", edge1, pvec)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_det = np.where(np.abs(det) > 1e-14, 1.0 / det, np.nan)
            tvec = origin[None, None, :] - v0[None, :, :]
            u = np.einsum("rkj,rkj->rk", np.broadcast_to(tvec, pvec.shape), pvec) * inv_det
            qvec = np.cross(np.broadcast_to(tvec, (d.shape[0], len(v0), 3)), edge1[None, :, :])
            v = np.einsum("rj,rkj->rk", d, qvec) * inv_det
            t = np.einsum("kj,rkj->rk", edge2, qvec) * inv_det
        hit = (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12) & (t > 1e-12)
        t = np.where(hit, t, np.inf)
        local_best = np.argmin(t, axis=1)
        rows = np.arange(t.shape[0])
        t_best = t[rows, local_best]
        improved = t_best < best_t[start:start + chunk]
        sl = slice(start, start + chunk)
        best_t[sl] = np.where(improved, t_best, best_t[sl])
        best_face[sl] = np.where(improved, face_ids[local_best], best_face[sl])
        best_uv[sl] = np.where(improved[:, None],
                               np.stack([u[rows, local_best], v[rows, local_best]], axis=1),
                               best_uv[sl])
    return best_t, best_face, best_uv


def raycast_scene(mesh: TriangleMesh, grid: ScanGrid, flux_scale: float,
                  background_flux: float) -> SceneSpec:
    """Cast one pencil ray per pixel; nearest triangle hit sets the depth.

    Signal flux is flux_scale * mean(RGB) barycentrically interpolated at
    the hit (flux_scale everywhere for uncolored meshes).  Missed pixels are
    marked invalid.
    """
    directions = line_of_sight(grid)
    depths, faces, uv = _ray_mesh_hits(grid.detector, directions, mesh)
    valid = np.isfinite(depths)
    signal = np.full(grid.size, float(flux_scale))
    if mesh.colors is not None and valid.any():
        tri = mesh.faces[faces[valid]]
        u, v = uv[valid, 0], uv[valid, 1]
        weights = np.stack([1.0 - u - v, u, v], axis=1)
        rgb = np.einsum("pk,pkj->pj", weights, mesh.colors[tri])
        signal[valid] = flux_scale * rgb.mean(axis=1)
    signal[~valid] = 0.0
    out_depths = np.where(valid, depths, np.nan)
    return SceneSpec(grid, signal, np.full(grid.size, float(background_flux)),
                     out_depths, valid, metadata={"generator": "mesh"})


def parametric_scene(kind: str, grid: ScanGrid, params: dict) -> SceneSpec:
    """Closed-form scenes: ``plane``, ``sphere`` or ``step``.

    plane:  {normal, offset, signal_flux, background_flux}; depth solves
            <normal, detector + z * ray> = offset.
    sphere: {center, radius, signal_flux, background_flux}; nearest
            quadratic root along each ray.
    step:   {phi_split, depth_near, depth_far, signal_flux,
            background_flux}; fronto-parallel split in azimuth (depths are
            plain per-pixel ranges).
    """
    directions = line_of_sight(grid)
    n = grid.size
    signal = np.full(n, float(params.get("signal_flux", 1.0)))
    background = np.full(n, float(params.get("background_flux", 1.0)))

    if kind == "plane":
        normal = np.asarray(params["normal"], dtype=float)
        normal = normal / np.linalg.norm(normal)
        offset = float(params["offset"])
        along = directions @ normal
        with np.errstate(divide="ignore"):
            depths = (offset - grid.detector @ normal) / along
        valid = np.isfinite(depths) & (depths > 0.0)
    elif kind == "sphere":
        center = np.asarray(params["center"], dtype=float)
        radius = float(params["radius"])
        rel = grid.detector - center
        b_half = directions @ rel
        c_term = rel @ rel - radius**2
        disc = b_half**2 - c_term
        valid = disc >= 0.0
        sqrt_disc = np.sqrt(np.where(valid, disc, 0.0))
        near = -b_half - sqrt_disc
        far = -b_half + sqrt_disc
        depths = np.where(near > 0.0, near, far)
        valid &= depths > 0.0
    elif kind == "step":
        split = float(params["phi_split"])
        depths = np.where(grid.phi < split, float(params["depth_near"]),
                          float(params["depth_far"]))
        valid = np.ones(n, dtype=bool)
    else:
        raise ValueError(f"unknown parametric scene kind {kind!r}")

    depths = np.where(valid, depths, np.nan)
    signal[~valid] = 0.0
    meta = {"generator": f"parametric:{kind}", "params": dict(params)}
    return SceneSpec(grid, signal, background, depths, valid, metadata=meta)


def simulate_scene(spec: SceneSpec, cfg: AcquisitionConfig, seed: int,
                   mode=None) -> "list[DetectionSet]":
    """Independent per-pixel acquisition; pixel p uses stream (seed, p).

    Invalid pixels produce empty detection sets.
    """
    out = []
    empty = np.empty(0)
    for p in range(spec.grid.size):
        if not spec.valid[p]:
            out.append(detect(empty, cfg, mode))
            continue
        arrivals = sample_arrivals(spec.pixel_params(p), cfg, RngSeed(seed, p))
        out.append(detect(arrivals, cfg, mode))
    return out


# ---------------------------------------------------------------------------
# Scene files


def save_scene_spec(path, generator: str, theta_range, phi_range, counts,
                    flux_scale: float, background_flux: float,
                    mesh_path=None, extra=None) -> None:
    """Write the JSON scene description consumed by the CLI."""
    doc = {
        "generator": generator,
        "grid": {"theta_range": list(theta_range), "phi_range": list(phi_range),
                 "counts": list(counts)},
        "flux": {"S_max": flux_scale, "B": background_flux},
    }
    if mesh_path is not None:
        doc["mesh_path"] = str(mesh_path)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_scene_file(path) -> SceneSpec:
    """Build a SceneSpec from a JSON scene description."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        grid_doc = doc["grid"]
        counts = grid_doc["counts"]
        grid = ScanGrid.raster(grid_doc["theta_range"], grid_doc["phi_range"],
                               (int(counts[0]), int(counts[1])))
        flux = doc["flux"]
        s_max, background = float(flux["S_max"]), float(flux["B"])
        generator = doc["generator"]
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid scene file ({exc})") from exc

    if generator == "mesh":
        mesh_path = Path(doc["mesh_path"])
        if not mesh_path.is_absolute():
            mesh_path = path.parent / mesh_path
        return raycast_scene(load_mesh(mesh_path), grid, s_max, background)
    if generator.startswith("parametric:"):
        kind = generator.split(":", 1)[1]
        params = dict(doc.get("params", {}))
        params.setdefault("signal_flux", s_max)
        params.setdefault("background_flux", background)
        return parametric_scene(kind, grid, params)
    raise FormatError(f"{path}: unknown generator {generator!r}")


def export_ground_truth(spec: SceneSpec, path) -> None:
    """CSV dump: pixel,theta,phi,S,B,z (invalid pixels get empty depth)."""
    lines = ["pixel,theta,phi,S,B,z"]
    for p in range(spec.grid.size):
        z = "" if not spec.valid[p] else f"{spec.depths[p]:.17g}"
        lines.append(f"{p},{spec.grid.theta[p]:.17g},{spec.grid.phi[p]:.17g},"
                     f"{spec.signal_flux[p]:.17g},{spec.background_flux[p]:.17g},{z}")
    Path(path).write_text("\n".join(lines) + "\n")
