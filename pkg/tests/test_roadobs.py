import math

import numpy as np
import pytest

from stereovis.roadobs import (
    RoadModel,
    RoadObsParams,
    RoadPath,
    StereoGeometry,
    VDisparity,
    back_project,
    build_road_model,
    classify_small_object,
    extract_obstacle_rois,
    fit_plane,
    radon_line,
    road_region_mask,
    road_viterbi,
    signed_height,
    udisparity,
    vdisparity,
)
from stereovis.viterbi import DisparityMap


def _map(arr, d_max, valid=None):
    arr = np.asarray(arr, dtype=np.int32)
    if valid is None:
        valid = np.ones(arr.shape, dtype=bool)
    return DisparityMap(arr, valid, d_max)


def make_ground_plane_map(height=65, width=33, geometry=None, camera_height=1.5):
    """Noise-free road map: u = y_c * B / H for rows below the horizon.

    With B == camera height and an odd image height the ground-truth
    disparity is exactly the integer row offset from center.
    """
    geometry = geometry or StereoGeometry(focal_px=400.0, baseline_m=camera_height)
    cy = (height - 1) // 2
    rows = np.arange(height)
    y_c = rows - cy
    u_row = np.round(y_c * geometry.baseline_m / camera_height).astype(np.int32)
    disp = np.tile(u_row[:, None], (1, width))
    valid = disp > 0
    disp[~valid] = 0
    return _map(disp, int(u_row.max()), valid), geometry


class TestHistograms:
    def test_vdisparity_uniform(self):
        disp = _map(np.full((5, 7), 3), d_max=4)
        v = vdisparity(disp)
        assert v.counts.shape == (5, 5)
        assert np.all(v.counts[3] == 7)
        v.counts[3] = 0
        assert not v.counts.any()

    def test_vdisparity_staircase(self):
        h, w = 40, 16
        rows = np.arange(h)
        u = np.round(0.1 * rows).astype(np.int32)
        disp = _map(np.tile(u[:, None], (1, w)), d_max=8)
        v = vdisparity(disp)
        for j in range(h):
            assert v.counts[u[j], j] == w
        assert v.counts.sum() == h * w

    def test_vdisparity_all_invalid(self):
        disp = _map(np.zeros((4, 4)), 4, valid=np.zeros((4, 4), bool))
        assert not vdisparity(disp).counts.any()

    def test_udisparity_uniform(self):
        disp = _map(np.full((5, 7), 2), d_max=4)
        u = udisparity(disp)
        assert u.counts.shape == (5, 7)
        assert np.all(u.counts[2] == 5)

    def test_udisparity_column_band(self):
        arr = np.zeros((20, 12), dtype=np.int32)
        arr[4:16, 3:6] = 7  # vertical obstacle: constant disparity band
        disp = _map(arr, d_max=8)
        u = udisparity(disp)
        assert np.all(u.counts[7, 3:6] == 12)
        assert u.counts[7, 0] == 0

    def test_conservation(self):
        rng = np.random.default_rng(6)
        arr = rng.integers(0, 9, size=(18, 23))
        valid = rng.random((18, 23)) > 0.3
        disp = _map(arr, 8, valid)
        assert vdisparity(disp).counts.sum() == valid.sum()
        assert udisparity(disp).counts.sum() == valid.sum()


def radon_oracle(counts, d_bins, phi_bins):
    """Direct per-(d, phi) accumulation with the same nearest-bin rule."""
    ii, jj = np.nonzero(counts)
    mass = counts[ii, jj].astype(float)
    rho_min = -float(counts.shape[0])
    rho_max = float(math.hypot(counts.shape[0], counts.shape[1]))
    width = (rho_max - rho_min) / d_bins
    acc = np.zeros((d_bins, phi_bins))
    for k in range(phi_bins):
        phi = k * math.pi / phi_bins
        for c, (i, j) in enumerate(zip(ii, jj)):
            rho = i * math.cos(phi) + j * math.sin(phi)
            b = int(np.floor((rho - rho_min) / width + 0.5))
            b = min(max(b, 0), d_bins - 1)
            acc[b, k] += mass[c]
    return acc, rho_min, width


class TestRadon:
    def test_analytic_line_recovered(self):
        # cells on i + j = 25, i.e. phi = 45 deg, d = 25/sqrt(2)
        counts = np.zeros((32, 40), dtype=np.int64)
        for i in range(5, 21):
            counts[i, 25 - i] = 4
        d, phi, score = radon_line(VDisparity(counts))
        assert score == pytest.approx(4 * 16)
        assert abs(phi - math.pi / 4) <= math.radians(1.0) + 1e-12
        assert abs(d - 25 / math.sqrt(2)) <= 1.1  # within one d bin

    def test_uniform_disparity_vertical_line(self):
        disp = _map(np.full((30, 20), 6), d_max=10)
        v = vdisparity(disp)
        d, phi, score = radon_line(v)
        assert score == pytest.approx(30 * 20)
        assert phi <= math.radians(1.0) + 1e-12  # vertical line: phi ~ 0
        assert abs(d - 6) <= 1.1

    def test_single_cell(self):
        counts = np.zeros((8, 8), dtype=np.int64)
        counts[3, 5] = 9
        _, _, score = radon_line(VDisparity(counts))
        assert score == 9.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            radon_line(VDisparity(np.zeros((4, 4), dtype=np.int64)))

    def test_argmax_matches_exhaustive_scan(self):
        rng = np.random.default_rng(44)
        counts = (rng.random((64, 64)) > 0.92).astype(np.int64) * rng.integers(
            1, 6, size=(64, 64)
        )
        counts[np.arange(10, 40), np.arange(10, 40)] = 12  # dominant line
        v = VDisparity(counts)
        d, phi, score = radon_line(v, phi_bins=60)
        rho_max = float(math.hypot(64, 64))
        d_bins = int(math.ceil(rho_max + 64)) + 1
        acc, rho_min, width = radon_oracle(counts, d_bins, 60)
        assert score == pytest.approx(acc.max())
        # the returned cell attains the oracle maximum
        db = int(np.floor((d - rho_min) / width + 0.5))
        pb = int(round(phi / (math.pi / 60)))
        assert acc[db, pb] == pytest.approx(score)


class TestRoadViterbi:
    def test_dominant_staircase_recovered(self):
        counts = np.zeros((10, 64), dtype=np.int64)
        truth = 3 * np.arange(10) + 2
        counts[np.arange(10), truth] = 10
        counts[5, 40] = 2  # distractor
        path = road_viterbi(VDisparity(counts), straightness=5)
        assert path.d_lo == 0
        assert np.array_equal(path.rows, truth)

    def test_heavier_of_two_parallel_lines_wins(self):
        counts = np.zeros((8, 40), dtype=np.int64)
        light = 2 * np.arange(8) + 3
        heavy = 2 * np.arange(8) + 10
        counts[np.arange(8), light] = 3
        counts[np.arange(8), heavy] = 6
        path = road_viterbi(VDisparity(counts), straightness=4)
        assert np.array_equal(path.rows, heavy)

    def test_all_equal_counts_minimal_staircase(self):
        counts = np.ones((6, 12), dtype=np.int64)
        path = road_viterbi(VDisparity(counts), straightness=4)
        assert np.array_equal(path.rows, np.arange(6))

    def test_infeasible_short_image(self):
        counts = np.ones((10, 6), dtype=np.int64)
        with pytest.raises(ValueError, match="infeasible"):
            road_viterbi(VDisparity(counts), straightness=4)

    def test_unit_straightness_rejected(self):
        counts = np.ones((3, 10), dtype=np.int64)
        with pytest.raises(ValueError):
            road_viterbi(VDisparity(counts), straightness=1)

    def test_path_beats_any_straight_line(self):
        # the DP dominates every feasible path, in particular the best
        # straight line evaluated one row per disparity bin
        rng = np.random.default_rng(7)
        counts = rng.integers(0, 4, size=(12, 50)).astype(np.int64)
        counts[np.arange(12), 3 * np.arange(12) + 1] += 8
        v = VDisparity(counts)
        path = road_viterbi(v, straightness=6)
        path_score = counts[np.arange(12), path.rows].sum()
        i = np.arange(12)
        best_line = 0
        for intercept in range(40):
            for slope in [1, 2, 3, 4, 5]:
                rows = intercept + slope * i
                if rows.max() >= 50:
                    continue
                best_line = max(best_line, counts[i, rows].sum())
        assert path_score >= best_line

    def test_row_band_confines_path(self):
        counts = np.zeros((5, 30), dtype=np.int64)
        truth = 2 * np.arange(5) + 4
        counts[np.arange(5), truth] = 5
        counts[np.arange(5), truth + 15] = 50  # heavier but outside the band
        lo = truth - 2
        hi = truth + 2
        path = road_viterbi(VDisparity(counts), 4, (0, 4), (lo, hi))
        assert np.array_equal(path.rows, truth)


class TestPlaneFit:
    def test_horizontal_plane_recovered_exactly(self):
        disp, geom = make_ground_plane_map()
        v = vdisparity(disp)
        path = road_viterbi(v, straightness=3)
        a, b, c, d_off = fit_plane(path, geom, disp)
        assert (a, c) == pytest.approx((0.0, 0.0), abs=1e-9)
        assert b == pytest.approx(1.0, abs=1e-9)
        assert d_off == pytest.approx(1.5, abs=1e-9)

    def test_path_matches_staircase_exactly(self):
        disp, geom = make_ground_plane_map()
        path = road_viterbi(vdisparity(disp), straightness=3)
        cy = (disp.height - 1) // 2
        expected_rows = cy + np.arange(path.d_lo, path.d_hi + 1)
        assert np.array_equal(path.rows, expected_rows)

    def test_fronto_wall_gives_c_dominant_normal(self):
        # a wall has one disparity everywhere: the fit degenerates on rows
        # unless we hand it the line profile; feed a fake vertical profile
        arr = np.full((20, 20), 5, dtype=np.int32)
        disp = _map(arr, 8)
        geom = StereoGeometry(300.0, 0.2)
        plane = fit_plane(RoadPath(5, np.array([9])), geom, disp, tol=0.5)
        a, b, c, d_off = plane
        assert abs(c) > abs(a)

    def test_too_few_samples(self):
        arr = np.zeros((10, 10), dtype=np.int32)
        valid = np.zeros((10, 10), dtype=bool)
        disp = _map(arr, 5, valid)
        geom = StereoGeometry(300.0, 0.2)
        with pytest.raises(ValueError, match="3 road samples"):
            fit_plane(RoadPath(1, np.array([4])), geom, disp)

    def test_collinear_samples_rejected(self):
        arr = np.zeros((10, 10), dtype=np.int32)
        valid = np.zeros((10, 10), dtype=bool)
        arr[4, :] = 3
        valid[4, 2:8] = True  # six samples on one image row: collinear in 3D
        disp = _map(arr, 5, valid)
        geom = StereoGeometry(300.0, 0.2)
        with pytest.raises(ValueError, match="collinear"):
            fit_plane(RoadPath(3, np.array([4])), geom, disp, tol=0.25)

    def test_round_trip_forward_project(self):
        # forward-project a plane to disparity, fit, compare within 1e-2
        disp, geom = make_ground_plane_map(height=81, width=41)
        plane = fit_plane(road_viterbi(vdisparity(disp), 3), geom, disp)
        normal = np.array(plane[:3])
        angle = math.degrees(math.acos(np.clip(normal @ [0, 1, 0], -1, 1)))
        assert angle <= 1.0
        assert abs(plane[3] - 1.5) <= 1e-2


class TestSmallObject:
    def _setup(self):
        geom = StereoGeometry(focal_px=400.0, baseline_m=0.5)
        plane = (0.0, 1.0, 0.0, 1.5)
        region = np.ones((64, 64), dtype=bool)
        return geom, plane, region

    def test_point_on_plane_false(self):
        geom, plane, region = self._setup()
        # pick a pixel and the disparity that puts it exactly on the plane:
        # Y = y_c * B / u = 1.5  =>  u = y_c * B / 1.5
        y, x = 50, 20
        y_c = y - 31.5
        u = y_c * geom.baseline_m / 1.5
        assert classify_small_object(x, y, u, plane, geom, 0.05, region) is False

    def test_lifted_point_heights_classify_correctly(self):
        # along the ray of pixel (x, y) the signed height is K/u - d_off
        # with K = (a*x_c + b*y_c + c*f) * B, so u = K / (d_off + h) puts a
        # point at exactly height h above the plane
        geom, plane, region = self._setup()
        s_h = 0.05
        a, b, c, d_off = plane
        y, x = 50, 20
        k = (a * (x - 31.5) + b * (y - 31.5) + c * geom.focal_px) * geom.baseline_m
        for h, expect in [(0.0, False), (s_h / 2, True), (2 * s_h, False)]:
            u = k / (d_off + h)
            got = classify_small_object(x, y, u, plane, geom, s_h, region)
            assert got is expect

    def test_zero_disparity_rejected(self):
        geom, plane, region = self._setup()
        with pytest.raises(ValueError):
            classify_small_object(5, 5, 0.0, plane, geom, 0.05, region)

    def test_outside_road_region_false(self):
        geom, plane, _ = self._setup()
        region = np.zeros((64, 64), dtype=bool)
        assert classify_small_object(20, 50, 3.0, plane, geom, 0.05, region) is False

    def test_scale_invariance(self):
        geom, plane, region = self._setup()
        scaled = tuple(7.3 * v for v in plane)
        for y, u in [(40, 2.0), (55, 9.0), (60, 4.5)]:
            a = classify_small_object(10, y, u, plane, geom, 0.05, region)
            b = classify_small_object(10, y, u, scaled, geom, 0.05, region)
            assert a == b


def make_road_scene_map(obstacles, height=192, width=128, f=500.0, B=0.12, H=1.5):
    """Direct disparity map of a road plus fronto-parallel obstacle boxes.

    obstacles: list of (distance_m, center_col, box_w, box_h).  Boxes rest
    on the road contact row for their distance.
    """
    geom = StereoGeometry(f, B)
    cy = (height - 1) / 2.0
    rows = np.arange(height)
    u_road = np.round((rows - cy) * B / H).astype(np.int32)
    disp = np.tile(u_road[:, None], (1, width))
    valid = disp >= 1
    disp[~valid] = 0
    d_max = int(disp.max())
    for dist, cx, bw, bh in obstacles:
        u_obs = int(round(f * B / dist))
        contact = int(round(cy + u_obs * H / B))
        y1 = min(contact, height)
        y0 = max(y1 - bh, 0)
        x0 = max(cx - bw // 2, 0)
        x1 = min(x0 + bw, width)
        disp[y0:y1, x0:x1] = u_obs
        valid[y0:y1, x0:x1] = True
        d_max = max(d_max, u_obs)
    return _map(disp, d_max, valid), geom


class TestObstacleRois:
    def test_pure_road_empty(self):
        disp, geom = make_road_scene_map([])
        model = build_road_model(disp, geom)
        assert model.plane is not None
        rois = extract_obstacle_rois(disp, model, udisparity(disp))
        assert rois == []

    def test_single_obstacle_at_10m(self):
        disp, geom = make_road_scene_map([(10.0, 64, 48, 48)])
        model = build_road_model(disp, geom)
        rois = extract_obstacle_rois(disp, model, udisparity(disp))
        assert len(rois) == 1
        roi = rois[0]
        assert abs(roi.distance - 10.0) <= 0.5
        assert roi.mean_disparity == pytest.approx(6.0, abs=0.3)

    def test_two_separated_obstacles(self):
        disp, geom = make_road_scene_map([(10.0, 30, 30, 40), (12.0, 98, 30, 40)])
        model = build_road_model(disp, geom)
        rois = extract_obstacle_rois(disp, model, udisparity(disp))
        assert len(rois) == 2
        a, b = sorted(rois, key=lambda r: r.x)
        assert a.x + a.w <= b.x  # disjoint boxes

    def test_road_region_mask_covers_road(self):
        disp, geom = make_road_scene_map([])
        model = build_road_model(disp, geom)
        mask = road_region_mask(disp, model.path)
        assert mask[disp.valid].mean() > 0.9


class TestRoadModelSerialization:
    def test_to_dict_round_values(self):
        disp, geom = make_ground_plane_map()
        model = build_road_model(disp, geom, RoadObsParams(straightness=3.0))
        d = model.to_dict()
        assert set(d) == {"line", "plane", "path", "geometry"}
        assert d["plane"]["b"] == pytest.approx(1.0, abs=1e-6)
