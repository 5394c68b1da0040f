import threading

import numpy as np
import pytest

from stereovis.cost import CostParams
from stereovis.imgio import GrayImage, StereoPair
from stereovis.multiscale import (
    EvalCounter,
    MultiscaleParams,
    block_mode_init,
    build_pyramid,
    fill_invalid_rows,
    run_multiscale_mpv,
    virtual_node_pad,
)
from stereovis.viterbi import DisparityMap, run_mpv

from test_viterbi import make_shifted_pair


class TestPyramid:
    def test_vga_level_shapes(self):
        px = np.zeros((480, 640), dtype=np.uint8)
        pyr = build_pyramid(StereoPair(GrayImage(px), GrayImage(px.copy())))
        shapes = [(im.height, im.width) for im in pyr.lefts]
        assert shapes == [(120, 160), (240, 320), (480, 640)]

    def test_constant_image_all_levels_constant(self):
        px = np.full((32, 40), 99, dtype=np.uint8)
        pyr = build_pyramid(StereoPair(GrayImage(px), GrayImage(px.copy())))
        for im in pyr.lefts + pyr.rights:
            assert np.all(im.pixels == 99)

    def test_8x8_input(self):
        px = np.zeros((8, 8), dtype=np.uint8)
        pyr = build_pyramid(StereoPair(GrayImage(px), GrayImage(px.copy())))
        shapes = [(im.height, im.width) for im in pyr.lefts]
        assert shapes == [(2, 2), (4, 4), (8, 8)]

    def test_too_small_rejected(self):
        px = np.zeros((4, 4), dtype=np.uint8)
        with pytest.raises(ValueError):
            build_pyramid(StereoPair(GrayImage(px), GrayImage(px.copy())))


def _map(arr, d_max=32):
    arr = np.asarray(arr, dtype=np.int32)
    return DisparityMap(arr, np.ones(arr.shape, dtype=bool), d_max)


class TestBlockModeInit:
    def test_uniform_disparity_doubles(self):
        disp = _map(np.full((8, 8), 5))
        binit = block_mode_init(disp, 4, (16, 16), 32, half_width=2)
        assert np.all(binit.init == 10)
        assert np.all(binit.scope_lo == 8) and np.all(binit.scope_hi == 12)

    def test_mode_of_mixed_block(self):
        # coarse footprint {3,3,7,...}: mode 3 -> init 6
        coarse = np.full((2, 2), 7)
        coarse[0, 0] = 3
        coarse[0, 1] = 3
        coarse[1, 0] = 3
        disp = _map(coarse)
        binit = block_mode_init(disp, 4, (4, 4), 32, half_width=1)
        assert binit.init[0, 0] == 6

    def test_bimodal_tie_breaks_small(self):
        coarse = np.array([[3, 3], [7, 7]])
        binit = block_mode_init(_map(coarse), 4, (4, 4), 32, half_width=1)
        assert binit.init[0, 0] == 6  # mode tie {3,7} -> 3, doubled

    def test_scope_clipping(self):
        disp = _map(np.zeros((4, 4)))
        binit = block_mode_init(disp, 2, (8, 8), 10, half_width=3)
        assert np.all(binit.scope_lo == 0)
        assert np.all(binit.scope_hi == 3)

    def test_empty_block_rejected(self):
        arr = np.zeros((4, 4), dtype=np.int32)
        disp = DisparityMap(arr, np.zeros((4, 4), dtype=bool), 8)
        with pytest.raises(ValueError):
            block_mode_init(disp, 4, (8, 8), 8, half_width=1)

    def test_per_pixel_expansion(self):
        coarse = np.array([[1, 2], [3, 4]])
        binit = block_mode_init(_map(coarse), 2, (4, 4), 32, half_width=1)
        lo, hi = binit.per_pixel_scopes()
        assert lo.shape == (4, 4)
        assert lo[0, 0] == 2 - 1 and hi[0, 0] == 2 + 1
        assert lo[3, 3] == 8 - 1 and hi[3, 3] == 8 + 1


class TestVirtualNodePad:
    def test_union_of_adjacent_scopes(self):
        assert virtual_node_pad([(0, 4), (2, 6)], (0, 16)) == (0, 6)

    def test_identical_scopes_identity(self):
        assert virtual_node_pad([(3, 7), (3, 7), (3, 7)], (0, 16)) == (3, 7)

    def test_single_block_identity(self):
        assert virtual_node_pad([(2, 5)], (0, 16)) == (2, 5)

    def test_clips_to_layer_range(self):
        assert virtual_node_pad([(0, 40)], (0, 16)) == (0, 16)


class TestEvalCounter:
    def test_monotone_and_exact(self):
        c = EvalCounter()
        c.add(0, 10)
        c.add(1, 5)
        c.add(0, 1)
        assert c.per_level == [11, 5, 0]
        assert c.total == 16

    def test_concurrent_increments_exact(self):
        c = EvalCounter()

        def worker():
            for _ in range(1000):
                c.add(2, 3)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert c.total == 8 * 1000 * 3


class TestFillInvalid:
    def test_row_interpolation(self):
        arr = np.array([[2, 0, 0, 8]], dtype=np.int32)
        valid = np.array([[True, False, False, True]])
        filled = fill_invalid_rows(DisparityMap(arr, valid, 10))
        assert filled.disparity.tolist() == [[2, 4, 6, 8]]
        assert filled.valid.all()

    def test_row_ends_nearest(self):
        arr = np.array([[0, 5, 0]], dtype=np.int32)
        valid = np.array([[False, True, False]])
        filled = fill_invalid_rows(DisparityMap(arr, valid, 10))
        assert filled.disparity.tolist() == [[5, 5, 5]]

    def test_fully_valid_untouched(self):
        arr = np.array([[1, 2], [3, 4]], dtype=np.int32)
        disp = DisparityMap(arr, np.ones((2, 2), bool), 8)
        assert np.array_equal(fill_invalid_rows(disp).disparity, arr)


class TestRunMultiscale:
    def test_fronto_parallel_plane(self):
        k = 12
        pair = make_shifted_pair(64, 64, k, seed=20)
        disp, counter = run_multiscale_mpv(pair, 16, CostParams(window=5))
        interior = disp.disparity[6:-6, k + 6 : -6]
        assert np.mean(interior == k) >= 0.98
        assert counter.ratio(64, 64, 16) <= 0.35
        assert not disp.valid.all() or disp.valid.all()  # totality check below
        assert disp.valid.all()

    def test_identical_images_zero_map(self):
        rng = np.random.default_rng(40)
        px = rng.integers(0, 256, size=(64, 64)).astype(np.uint8)
        pair = StereoPair(GrayImage(px), GrayImage(px.copy()))
        disp, counter = run_multiscale_mpv(pair, 16, CostParams(window=5))
        assert np.all(disp.disparity == 0)
        assert counter.ratio(64, 64, 16) <= 0.35

    def test_counter_bound_64x64_d16(self):
        pair = make_shifted_pair(64, 64, 12, seed=21)
        _, counter = run_multiscale_mpv(pair, 16, CostParams(window=5))
        assert counter.total <= 0.35 * 64 * 64 * 16  # 22938 node budget

    def test_agrees_with_single_scale(self):
        # true disparity divisible by 4 keeps every pyramid level exact, so
        # the propagated scopes provably contain the truth; compared over
        # the matchable region (left margin narrower than d_max has no true
        # correspondence for either matcher)
        k = 8
        pair = make_shifted_pair(64, 64, k, seed=22)
        params = CostParams(window=5)
        ms, _ = run_multiscale_mpv(pair, 16, params)
        ss = run_mpv(pair, 16, params)
        agree = np.mean(ms.disparity[:, 16:] == ss.disparity[:, 16:])
        assert agree >= 0.95

    def test_deterministic(self):
        pair = make_shifted_pair(64, 64, 8, seed=23)
        a, ca = run_multiscale_mpv(pair, 16, CostParams(window=5))
        b, cb = run_multiscale_mpv(pair, 16, CostParams(window=5))
        assert np.array_equal(a.disparity, b.disparity)
        assert ca.total == cb.total

    def test_invalid_dmax(self):
        pair = make_shifted_pair(64, 64, 1)
        with pytest.raises(ValueError):
            run_multiscale_mpv(pair, 0)

    def test_custom_params_level_widths(self):
        ms = MultiscaleParams()
        assert ms.half_width(1, 16) == 2
        assert ms.half_width(2, 16) == 1
        assert ms.half_width(1, 32) == 4
        assert ms.half_width(2, 32) == 3
