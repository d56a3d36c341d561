import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splkit.errors import NonPositiveDepth, ScoreModelFailure, ZeroRange
from splkit.geometry import ScanGrid, line_of_sight, to_cartesian, to_depth
from splkit.model import AcquisitionConfig, PulseProfile, SceneParams
from splkit.regularize import (
    PixelwiseDepthGradient,
    RegularizerConfig,
    SubprocessScoreModel,
    analytic_plane_score,
    depth_score,
    median_smooth_init,
    regularize_depths,
    save_point_cloud,
    threshold_scores,
)
from splkit.likelihood import loglik
from splkit.simulate import RngSeed, quantize, simulate_detections

NS = 1e-9


def make_cfg(**kw):
    defaults = dict(rep_period=100 * NS, n_pulses=100, dead_time=20 * NS,
                    bin_size=0.1 * NS, pulse=PulseProfile(0.1 * NS))
    defaults.update(kw)
    return AcquisitionConfig(**defaults)


def small_grid(n_theta=6, n_phi=6):
    return ScanGrid.raster((np.pi / 3, 2 * np.pi / 3), (np.pi / 3, 2 * np.pi / 3),
                           (n_theta, n_phi))


class TestTransforms:
    def test_equator_axis_case(self):
        grid = ScanGrid(np.array([np.pi / 2]), np.array([0.0]))
        cloud = to_cartesian(grid, np.array([1.0]))
        np.testing.assert_allclose(cloud.points[0], [1.0, 0.0, 0.0], atol=1e-15)

    def test_pole_case(self):
        grid = ScanGrid(np.array([0.0]), np.array([1.234]))
        cloud = to_cartesian(grid, np.array([2.0]))
        np.testing.assert_allclose(cloud.points[0], [0.0, 2.0, 0.0], atol=1e-15)

    @settings(deadline=None, max_examples=40)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        n = 17
        grid = ScanGrid(rng.uniform(0.05, np.pi - 0.05, n), rng.uniform(0, np.pi, n))
        depths = rng.uniform(0.5, 12.0, n)
        recovered = to_depth(grid, to_cartesian(grid, depths))
        np.testing.assert_allclose(recovered, depths, rtol=1e-12)

    def test_nonpositive_depth_rejected(self):
        grid = small_grid()
        depths = np.full(grid.size, 1.0)
        depths[3] = 0.0
        with pytest.raises(NonPositiveDepth):
            to_cartesian(grid, depths)

    def test_depth_is_distance_from_detector(self):
        grid = ScanGrid(np.array([1.0]), np.array([2.0]), detector=np.array([1.0, -2.0, 0.5]))
        cloud = to_cartesian(grid, np.array([3.0]))
        assert np.linalg.norm(cloud.points[0] - grid.detector) == pytest.approx(3.0, rel=1e-12)


class TestDepthScore:
    def test_orthogonal_score_projects_to_zero(self):
        grid = ScanGrid(np.array([np.pi / 2]), np.array([0.0]))
        cloud = to_cartesian(grid, np.array([2.0]))  # point on +x
        sigma = depth_score(cloud, grid, np.array([[0.0, 3.0, -1.0]]))
        assert sigma[0] == pytest.approx(0.0, abs=1e-15)

    def test_parallel_score_projects_to_norm(self):
        grid = ScanGrid(np.array([np.pi / 2]), np.array([0.0]))
        cloud = to_cartesian(grid, np.array([2.0]))
        sigma = depth_score(cloud, grid, cloud.points - grid.detector)
        assert sigma[0] == pytest.approx(2.0, rel=1e-12)

    def test_zero_range_raises(self):
        grid = ScanGrid(np.array([np.pi / 2]), np.array([0.0]))
        with pytest.raises(ZeroRange):
            depth_score(np.zeros((1, 3)), grid, np.ones((1, 3)))

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(3)
        grid = small_grid()
        depths = rng.uniform(1, 5, grid.size)
        cloud = to_cartesian(grid, depths)
        scores = rng.standard_normal((grid.size, 3))
        sigma = depth_score(cloud, grid, scores)
        from scipy.spatial.transform import Rotation

        rot = Rotation.random(random_state=7).as_matrix()
        rotated_grid = ScanGrid(grid.theta, grid.phi, detector=rot @ grid.detector)
        sigma_rot = depth_score(cloud.points @ rot.T, rotated_grid, scores @ rot.T)
        np.testing.assert_allclose(sigma_rot, sigma, atol=1e-12)

    def test_plane_prior_depth_score_identity(self):
        # closed-form <n, r_hat> (offset - <n, x>) / blur^2 from substitution
        rng = np.random.default_rng(4)
        grid = small_grid()
        depths = rng.uniform(1, 6, grid.size)
        cloud = to_cartesian(grid, depths)
        normal = np.array([0.0, 0.0, 1.0])
        model = analytic_plane_score(normal, offset=-2.0, blur=0.7)
        sigma = depth_score(cloud, grid, model(cloud.points))
        rays = line_of_sight(grid)
        expected = (rays @ normal) * (-2.0 - cloud.points @ normal) / 0.7**2
        np.testing.assert_allclose(sigma, expected, atol=1e-12)

    def test_spherical_log_density_derivative_identity(self):
        # d/dz log(prior in spherical coordinates) = 2/z + sigma, checked
        # against finite differences of log(z^2 sin(theta) * pi(x(z)))
        rng = np.random.default_rng(5)
        model = analytic_plane_score(np.array([0.0, 0.0, 1.0]), offset=-3.0, blur=0.9)
        checked = 0
        while checked < 1000:
            theta = rng.uniform(0.2, np.pi - 0.2)
            phi = rng.uniform(0.0, np.pi)
            z = rng.uniform(0.5, 8.0)
            grid = ScanGrid(np.array([theta]), np.array([phi]))
            cloud = to_cartesian(grid, np.array([z]))
            sigma = depth_score(cloud, grid, model(cloud.points))[0]
            analytic = 2.0 / z + sigma
            if abs(analytic) < 1e-3:
                continue

            def log_density(zv):
                pts = to_cartesian(grid, np.array([zv])).points
                return float(model.log_density(pts)[0]) + 2 * np.log(zv) + np.log(np.sin(theta))

            h = 1e-6
            numeric = (log_density(z + h) - log_density(z - h)) / (2 * h)
            assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), abs(numeric))
            checked += 1


class TestPlaneScoreModel:
    def test_zero_on_plane(self):
        model = analytic_plane_score([0, 0, 1], offset=2.0, blur=0.5)
        points = np.array([[3.0, -1.0, 2.0], [0.0, 0.0, 2.0]])
        np.testing.assert_allclose(model(points), 0.0, atol=1e-15)

    def test_parallel_to_normal_with_expected_magnitude(self):
        normal = np.array([0.6, 0.8, 0.0])
        model = analytic_plane_score(normal, offset=1.0, blur=2.0)
        point = np.array([[2.0, 1.0, 5.0]])
        score = model(point)[0]
        residual = point[0] @ normal - 1.0
        np.testing.assert_allclose(score, -(residual / 4.0) * normal, rtol=1e-12)

    def test_requires_unit_normal(self):
        with pytest.raises(ValueError):
            analytic_plane_score([0, 0, 2.0], offset=0.0, blur=1.0)


class TestThreshold:
    def test_boundary_is_zeroed(self):
        eps = 0.25
        np.testing.assert_array_equal(threshold_scores(np.array([eps, -eps]), eps), [0.0, 0.0])

    def test_mixed_vector(self):
        eps = 0.5
        out = threshold_scores(np.array([-2 * eps, eps / 2, 3 * eps]), eps)
        np.testing.assert_array_equal(out, [-2 * eps, 0.0, 3 * eps])

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=32),
           st.floats(1e-6, 5.0))
    def test_idempotent(self, values, eps):
        sigma = np.asarray(values)
        once = threshold_scores(sigma, eps)
        np.testing.assert_array_equal(threshold_scores(once, eps), once)


class TestMedianSmoothing:
    def test_identity_without_outliers(self):
        grid = small_grid()
        depths = np.linspace(1, 2, grid.size)
        out = median_smooth_init(grid, depths, np.zeros(grid.size), 0.1, 4)
        np.testing.assert_array_equal(out, depths)

    def test_single_outlier_on_constant_grid(self):
        grid = small_grid()
        depths = np.full(grid.size, 3.0)
        depths[10] = 9.0
        sigma = np.zeros(grid.size)
        sigma[10] = 1.0
        out = median_smooth_init(grid, depths, sigma, 0.1, 4)
        assert out[10] == 3.0
        untouched = np.delete(out, 10)
        np.testing.assert_array_equal(untouched, np.delete(depths, 10))

    def test_output_within_observed_range(self):
        rng = np.random.default_rng(8)
        grid = small_grid()
        depths = rng.uniform(1, 4, grid.size)
        sigma = rng.standard_normal(grid.size)
        out = median_smooth_init(grid, depths, sigma, 0.5, 5)
        assert out.min() >= depths.min() and out.max() <= depths.max()

    def test_outlier_rate_reduction_on_plane(self):
        # 5% uniform outliers on a fronto-parallel plane scene
        rng = np.random.default_rng(9)
        grid = ScanGrid.raster((np.pi / 2 - 0.2, np.pi / 2 + 0.2),
                               (np.pi / 2 - 0.2, np.pi / 2 + 0.2), (16, 16))
        rays = line_of_sight(grid)
        normal = np.array([0.0, 0.0, -1.0])  # plane faces the detector
        true_depths = 5.0 / (rays @ normal)
        noisy = true_depths + rng.normal(0, 0.002, grid.size)
        outliers = rng.random(grid.size) < 0.05
        noisy[outliers] = rng.uniform(0.5, 14.0, outliers.sum())
        model = analytic_plane_score(normal, offset=5.0, blur=2.0)
        cloud = to_cartesian(grid, noisy)
        sigma = depth_score(cloud, grid, model(cloud.points))
        smoothed = median_smooth_init(grid, noisy, sigma, 1e-3, 8)
        mae_before = np.mean(np.abs(noisy - true_depths))
        mae_after = np.mean(np.abs(smoothed - true_depths))
        assert mae_after < mae_before

    def test_neighbor_count_validation(self):
        grid = small_grid(2, 2)
        with pytest.raises(ValueError):
            median_smooth_init(grid, np.ones(4), np.ones(4), 0.1, 4)


class TestPixelwiseGradient:
    @pytest.mark.parametrize("mode", ["ideal", "sync", "free"])
    def test_matches_per_pixel_loglik(self, mode):
        cfg = make_cfg()
        rng = np.random.default_rng(11)
        n = 12
        data, s_arr, b_arr, z_arr = [], [], [], []
        for p in range(n):
            params = SceneParams(rng.uniform(0.3, 2), rng.uniform(0.3, 2),
                                 rng.uniform(0.2, 0.8) * cfg.max_depth)
            data.append(simulate_detections(params, cfg, RngSeed(500, p), mode))
            s_arr.append(params.signal_flux)
            b_arr.append(params.background_flux)
            z_arr.append(params.depth * rng.uniform(0.999, 1.001))
        grad = PixelwiseDepthGradient(data, cfg, mode, np.array(s_arr), np.array(b_arr))
        vector = grad(np.array(z_arr))
        for p in range(n):
            ref = loglik(SceneParams(s_arr[p], b_arr[p], z_arr[p]), cfg, data[p],
                         mode, armed_periods=data[p].armed_periods).grad[2]
            assert vector[p] == pytest.approx(ref, rel=1e-9, abs=1e-9)

    def test_accepts_histograms(self):
        cfg = make_cfg()
        params = SceneParams(1.0, 1.0, 7.5)
        d = simulate_detections(params, cfg, RngSeed(501, 0), "free")
        h = quantize(d, cfg)
        grad = PixelwiseDepthGradient([h], cfg, "free", np.array([1.0]), np.array([1.0]))
        ref = loglik(SceneParams(1.0, 1.0, 7.5), cfg, h, "free").grad[2]
        assert grad(np.array([7.5]))[0] == pytest.approx(ref, rel=1e-9)


def _plane_scene(cfg, rng_seed=13, shape=(12, 12), signal=0.5, background=1.0, plane_depth=6.0):
    grid = ScanGrid.raster((np.pi / 2 - 0.25, np.pi / 2 + 0.25),
                           (np.pi / 2 - 0.25, np.pi / 2 + 0.25), shape)
    rays = line_of_sight(grid)
    normal = np.array([0.0, 0.0, -1.0])  # plane <n, x> = plane_depth facing the detector
    depths = plane_depth / (rays @ normal)
    data = [simulate_detections(SceneParams(signal, background, z), cfg,
                                RngSeed(rng_seed, p), "free")
            for p, z in enumerate(depths)]
    return grid, normal, depths, data


class TestRegularizeDepths:
    def test_degenerate_step_keeps_depths(self):
        cfg = make_cfg()
        grid, normal, depths, data = _plane_scene(cfg, shape=(4, 4))
        model = analytic_plane_score(normal, offset=6.0, blur=4.6)
        reg = RegularizerConfig(step_size=1e-12, strength=1e-12, n_iter=3,
                                n_neighbors=4, median_smoothing=False, noise=False)
        out, trace = regularize_depths(grid, data, (np.full(grid.size, 0.5),
                                                    np.full(grid.size, 1.0), depths),
                                       cfg, "free", reg, model, seed=0)
        np.testing.assert_allclose(out, depths, atol=1e-9)
        assert len(trace) == 3

    def test_deterministic_given_seed(self):
        cfg = make_cfg()
        grid, normal, depths, data = _plane_scene(cfg, shape=(5, 5))
        model = analytic_plane_score(normal, offset=6.0, blur=4.6)
        reg = RegularizerConfig(n_iter=10, n_neighbors=6)
        estimates = (np.full(grid.size, 0.5), np.full(grid.size, 1.0), depths)
        a, _ = regularize_depths(grid, data, estimates, cfg, "free", reg, model, seed=42)
        b, _ = regularize_depths(grid, data, estimates, cfg, "free", reg, model, seed=42)
        np.testing.assert_array_equal(a, b)
        c, _ = regularize_depths(grid, data, estimates, cfg, "free", reg, model, seed=43)
        assert not np.array_equal(a, c)

    def test_score_model_failure_carries_partial(self):
        cfg = make_cfg()
        grid, normal, depths, data = _plane_scene(cfg, shape=(4, 4))
        calls = {"n": 0}

        def flaky(points):
            calls["n"] += 1
            if calls["n"] > 3:
                raise RuntimeError("backend gone")
            return np.zeros_like(points)

        reg = RegularizerConfig(n_iter=10, n_neighbors=4)
        with pytest.raises(ScoreModelFailure) as info:
            regularize_depths(grid, data, (np.full(grid.size, 0.5),
                                           np.full(grid.size, 1.0), depths),
                              cfg, "free", reg, flaky, seed=0)
        assert hasattr(info.value, "partial_depths")
        assert info.value.partial_depths.shape == (grid.size,)


class TestPointCloudExport:
    def test_ply_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        points = rng.normal(size=(9, 3))
        s, b, sigma = rng.random(9), rng.random(9), rng.standard_normal(9)
        path = tmp_path / "cloud.ply"
        save_point_cloud(path, points, s, b, sigma)
        lines = path.read_text().splitlines()
        assert lines[0] == "ply" and "end_header" in lines
        header_end = lines.index("end_header")
        assert lines[2] == "element vertex 9"
        body = np.array([[float(v) for v in ln.split()] for ln in lines[header_end + 1:]])
        np.testing.assert_allclose(body[:, :3], points, rtol=1e-6)
        np.testing.assert_allclose(body[:, 5], sigma, rtol=1e-6)


BRIDGE_STUB = textwrap.dedent("""
    import json, sys
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        pts = req["points"]
        scores = [[-(p[2] + 6.0) * v for v in (0.0, 0.0, 1.0)] for p in pts]
        sys.stderr.write("diagnostic noise\\n")
        print(json.dumps({"id": req["id"], "scores": scores}), flush=True)
""")


class TestSubprocessScoreModel:
    def test_round_trip_against_stub(self):
        with SubprocessScoreModel([sys.executable, "-c", BRIDGE_STUB], timeout=20) as model:
            points = np.array([[0.0, 0.0, -2.0], [1.0, 2.0, -8.0]])
            scores = model(points)
            expected = np.stack([-(points[:, 2] + 6.0) * 0.0,
                                 -(points[:, 2] + 6.0) * 0.0,
                                 -(points[:, 2] + 6.0) * 1.0], axis=1)
            np.testing.assert_allclose(scores, expected, rtol=1e-12)

    def test_timeout_raises(self):
        stall = "import time, sys\nsys.stdin.readline()\ntime.sleep(60)"
        with SubprocessScoreModel([sys.executable, "-c", stall], timeout=0.5) as model:
            with pytest.raises(ScoreModelFailure):
                model(np.zeros((2, 3)))

    def test_error_reply_raises(self):
        erroring = ("import json, sys\n"
                    "for line in sys.stdin:\n"
                    "    req = json.loads(line)\n"
                    "    print(json.dumps({'id': req['id'], 'error': 'nope'}), flush=True)\n")
        with SubprocessScoreModel([sys.executable, "-c", erroring], timeout=10) as model:
            with pytest.raises(ScoreModelFailure):
                model(np.zeros((2, 3)))
