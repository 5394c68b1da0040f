import itertools

import numpy as np
import pytest

from stereovis.cost import CostParams
from stereovis.imgio import GrayImage, StereoPair
from stereovis.viterbi import (
    PathDirection,
    PenaltyParams,
    SweepStats,
    TrellisLayer,
    backtrack_path,
    merge_bidirectional,
    run_mpv,
    tv_penalty,
    viterbi_sweep_direct,
    viterbi_sweep_fast,
)


def exhaustive_min_energy(costs, weight, up_mult=1.0):
    """Oracle: minimum path energy over all m^len disparity sequences."""
    n, m = costs.shape
    best = np.inf
    best_seq = None
    for seq in itertools.product(range(m), repeat=n):
        e = costs[0, seq[0]]
        for p in range(1, n):
            du = seq[p] - seq[p - 1]
            pen = weight * abs(du) * (up_mult if du > 0 else 1.0)
            e += pen + costs[p, seq[p]]
        if e < best - 1e-12:
            best = e
            best_seq = seq
    return best, best_seq


class TestTvPenalty:
    def test_zero_change_is_free(self):
        assert tv_penalty(4, 4, 1.7, PenaltyParams(lam=3.0)) == 0.0

    def test_unit_gradient_free_case(self):
        assert tv_penalty(5, 2, 0.0, PenaltyParams(lam=1.0)) == pytest.approx(3.0)

    def test_huge_gradient_kills_penalty(self):
        assert tv_penalty(0, 9, 1e9, PenaltyParams(lam=1.0)) == pytest.approx(0.0)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            PenaltyParams(lam=-1)
        with pytest.raises(ValueError):
            PenaltyParams(occlusion_asymmetry=0.5)


class TestDirectSweep:
    def test_all_zero_costs_all_zero_energy(self):
        layer = viterbi_sweep_direct(np.zeros((5, 4)), PenaltyParams(lam=1.0))
        assert np.all(layer.energies == 0.0)

    def test_hand_example(self):
        # path length 2, m=3: e(1,2) = min(0+2, 5+1, 5+0) + 0 = 2
        costs = np.array([[0.0, 5.0, 5.0], [5.0, 5.0, 0.0]])
        layer = viterbi_sweep_direct(costs, PenaltyParams(lam=1.0), gradients=[0.0, 0.0])
        assert layer.energies[1, 2] == pytest.approx(2.0)
        assert layer.energies[1, 0] == pytest.approx(5.0)  # min(0, 6, 7) + 5

    def test_single_pixel_path_is_base_case(self):
        costs = np.array([[3.0, 1.0, 4.0]])
        layer = viterbi_sweep_direct(costs, PenaltyParams())
        assert np.array_equal(layer.energies, costs)

    def test_init_prior_enters_base_case(self):
        costs = np.zeros((1, 3))
        layer = viterbi_sweep_direct(costs, PenaltyParams(), init=[5.0, 0.0, 2.0])
        assert layer.energies.tolist() == [[5.0, 0.0, 2.0]]

    def test_empty_path_rejected(self):
        with pytest.raises(ValueError):
            viterbi_sweep_direct(np.zeros((0, 3)), PenaltyParams())


class TestFastSweep:
    @pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("asym", [False, True])
    def test_matches_direct_on_randoms(self, lam, asym):
        rng = np.random.default_rng(hash((lam, asym)) % 2**32)
        penalty = PenaltyParams(lam=lam, occlusion_asymmetry=2.0)
        for _ in range(60):
            n = int(rng.integers(1, 9))
            m = int(rng.integers(1, 9))
            costs = rng.uniform(0, 255, size=(n, m))
            grads = rng.choice([0.0, 1.0], size=n)
            direct = viterbi_sweep_direct(costs, penalty, grads, asymmetric=asym)
            fast = viterbi_sweep_fast(costs, penalty, grads, asymmetric=asym)
            assert np.max(np.abs(direct.energies - fast.energies)) <= 1e-9

    def test_zero_costs(self):
        layer = viterbi_sweep_fast(np.zeros((6, 5)), PenaltyParams(lam=1.0))
        assert np.all(layer.energies == 0.0)

    def test_lambda_zero_reproduces_global_min_behavior(self):
        rng = np.random.default_rng(77)
        costs = rng.uniform(0, 255, size=(7, 6))
        penalty = PenaltyParams(lam=0.0)
        direct = viterbi_sweep_direct(costs, penalty)
        fast = viterbi_sweep_fast(costs, penalty)
        assert np.allclose(direct.energies, fast.energies, atol=1e-9)
        # with no penalty each row's energy is prev global min + node cost
        run = costs[0].min()
        for p in range(1, 7):
            assert np.allclose(fast.energies[p], run + costs[p])
            run = fast.energies[p].min()

    def test_operation_count_is_2m_per_pixel(self):
        stats = SweepStats()
        n, m = 10, 13
        viterbi_sweep_fast(np.zeros((n, m)), PenaltyParams(), stats=stats)
        assert stats.pixels == n - 1
        assert stats.min_ops == (n - 1) * 2 * m

    def test_prior_matches_direct(self):
        rng = np.random.default_rng(5)
        costs = rng.uniform(0, 10, size=(4, 5))
        init = rng.uniform(0, 20, size=5)
        penalty = PenaltyParams(lam=1.5)
        d = viterbi_sweep_direct(costs, penalty, init=init)
        f = viterbi_sweep_fast(costs, penalty, init=init)
        assert np.allclose(d.energies, f.energies, atol=1e-9)


class TestBacktrack:
    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(123)
        for _ in range(40):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(1, 5))
            lam = float(rng.choice([0.5, 1.0, 2.0]))
            costs = rng.uniform(0, 255, size=(n, m))
            penalty = PenaltyParams(lam=lam)
            layer = viterbi_sweep_fast(costs, penalty)
            path = backtrack_path(layer, costs, penalty)
            got = costs[0, path[0]]
            for p in range(1, n):
                got += lam * abs(int(path[p]) - int(path[p - 1])) + costs[p, path[p]]
            best, _ = exhaustive_min_energy(costs, lam)
            assert got == pytest.approx(best, abs=1e-9)
            assert layer.energies[-1].min() == pytest.approx(best, abs=1e-9)


class TestMerge:
    def _layer(self, value):
        return TrellisLayer(np.full((3, 4), float(value)))

    def test_idempotent(self):
        a = TrellisLayer(np.arange(12, dtype=float).reshape(3, 4))
        for pair in ("horizontal", "vertical", "diagonal", "antidiagonal"):
            merged = merge_bidirectional(a, a, pair)
            assert np.array_equal(merged.energies, a.energies)

    def test_horizontal_min_rule(self):
        merged = merge_bidirectional(self._layer(3), self._layer(7), "horizontal")
        assert np.all(merged.energies == 3.0)

    def test_vertical_mean_rule(self):
        merged = merge_bidirectional(self._layer(3), self._layer(7), "vertical")
        assert np.all(merged.energies == 5.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            merge_bidirectional(self._layer(1), TrellisLayer(np.zeros((2, 2))), "vertical")

    def test_pair_names(self):
        assert PathDirection.LEFT_TO_RIGHT.pair_name == "horizontal"
        assert PathDirection.UP_RIGHT.pair_name == "antidiagonal"
        pairs = {d.pair_name for d in PathDirection}
        assert pairs == {"horizontal", "vertical", "diagonal", "antidiagonal"}


def make_shifted_pair(width, height, k, seed=0, lo=0, hi=256):
    """Right image equals left shifted right by k columns (disparity k).

    right(x) = left(x + k); fresh texture fills the right-edge columns that
    have no source.
    """
    rng = np.random.default_rng(seed)
    left = rng.integers(lo, hi, size=(height, width)).astype(np.uint8)
    right = np.empty_like(left)
    right[:, : width - k] = left[:, k:]
    right[:, width - k :] = rng.integers(lo, hi, size=(height, k))
    return StereoPair(GrayImage(left), GrayImage(right))


class TestRunMpv:
    def test_identical_images_zero_map(self):
        rng = np.random.default_rng(31)
        px = rng.integers(0, 256, size=(24, 24)).astype(np.uint8)
        pair = StereoPair(GrayImage(px), GrayImage(px.copy()))
        disp = run_mpv(pair, d_max=6)
        assert np.all(disp.disparity == 0)
        assert np.all(disp.valid)

    def test_fronto_parallel_plane_recovered(self):
        k = 5
        pair = make_shifted_pair(48, 32, k, seed=10)
        disp = run_mpv(pair, d_max=10, cost_params=CostParams(window=5))
        interior = disp.disparity[4:-4, k + 4 : -4]
        assert np.mean(interior == k) >= 0.99

    def test_slanted_plane_gradient(self):
        # disparity u(x) = round(slope*x + 2); recovered mean horizontal
        # gradient must land within 0.1 of the slope
        slope = 0.125
        h, w = 40, 64
        rng = np.random.default_rng(3)
        left = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
        gt = np.round(slope * np.arange(w) + 2).astype(int)
        right = np.empty_like(left)
        filled = np.zeros((h, w), dtype=bool)
        for u in range(gt.min(), gt.max() + 1):
            cols = np.nonzero(gt == u)[0]
            src = cols[cols - u >= 0]
            right[:, src - u] = left[:, src]
            filled[:, src - u] = True
        right[~filled] = rng.integers(0, 256, size=int((~filled).sum()))
        pair = StereoPair(GrayImage(left), GrayImage(right))
        disp = run_mpv(pair, d_max=12, cost_params=CostParams(window=5))
        inner = disp.disparity[4:-4, 12:-4].astype(float)
        grads = (inner[:, -1] - inner[:, 0]) / (inner.shape[1] - 1)
        assert abs(grads.mean() - slope) <= 0.1

    def test_monotone_energy_upper_bound(self):
        # e(p, u) can never exceed the stay-at-u path: e(p-1, u) + cost(p, u)
        rng = np.random.default_rng(17)
        costs = rng.uniform(0, 50, size=(12, 7))
        layer = viterbi_sweep_fast(costs, PenaltyParams(lam=2.0))
        e = layer.energies
        for p in range(1, 12):
            assert np.all(e[p] <= e[p - 1] + costs[p] + 1e-12)

    def test_lambda_zero_winner_take_all(self):
        pair = make_shifted_pair(30, 20, 3, seed=9)
        penalty = PenaltyParams(lam=0.0)
        disp = run_mpv(pair, d_max=6, cost_params=CostParams(window=3), penalty=penalty)
        from stereovis.cost import build_patch_stats, ssim_cost_volume

        params = CostParams(window=3)
        sl = build_patch_stats(pair.left, params)
        sr = build_patch_stats(pair.right, params)
        vol = ssim_cost_volume(sl, sr, range(7), params)
        assert np.array_equal(disp.disparity, np.argmin(vol, axis=2).astype(np.int32))

    def test_invalid_dmax(self):
        pair = make_shifted_pair(16, 16, 1)
        with pytest.raises(ValueError):
            run_mpv(pair, d_max=0)
