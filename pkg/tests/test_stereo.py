"""Cost volume, semi-global aggregation, LR check, subpixel refinement."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uwstereo.pfm import INVALID
from uwstereo.stereo import (CostVolume, INVALID_COST, StereoParams,
                             cost_volume_from_descriptors, dilate_mask,
                             lr_check, match_descriptors, parabola_offset,
                             right_volume_from_left, sgm_aggregate,
                             subpixel_refine, winner_take_all)


def full_volume(cost):
    return CostVolume(cost=np.asarray(cost, np.float32),
                      valid=np.ones(np.shape(cost), bool))


def dyadic_costs(rng, shape):
    """Costs on a 1/64 grid: float sums stay exact, so SGM can be compared
    with the brute-force oracle for strict equality."""
    return (rng.integers(0, 64, size=shape) / 64.0).astype(np.float32)


def brute_force_directional(cost, p1, p2, step):
    """Min over all disparity sequences along each ray ending at (y, x, d):
    sum of cell costs plus 0/p1/p2 transition penalties. ``step`` is the
    (dy, dx) direction of travel."""
    h, w, dc = cost.shape
    out = np.zeros_like(cost)
    dy, dx = step
    for y0 in range(h):
        for x0 in range(w):
            # walk backwards to the ray start
            ray = [(y0, x0)]
            while True:
                py, px = ray[-1][0] - dy, ray[-1][1] - dx
                if 0 <= py < h and 0 <= px < w:
                    ray.append((py, px))
                else:
                    break
            ray = ray[::-1]
            if len(ray) > 10:
                raise AssertionError("oracle is exponential; keep rays short")
            best = np.full(dc, np.inf)
            for seq in itertools.product(range(dc), repeat=len(ray)):
                total = sum(cost[p[0], p[1], d] for p, d in zip(ray, seq))
                for a, b in zip(seq, seq[1:]):
                    if a != b:
                        total += p1 if abs(a - b) == 1 else p2
                d_end = seq[-1]
                best[d_end] = min(best[d_end], total)
            out[y0, x0] = best
    return out


class TestCostVolume:
    def test_identical_descriptors_match_at_zero(self, rng):
        desc = rng.standard_normal((6, 10, 14)).astype(np.float32)
        full = np.ones((10, 14), bool)
        vol = cost_volume_from_descriptors(desc, desc, full, full, d_max=6)
        disp, ok = winner_take_all(vol)
        assert np.all(disp[ok] == 0)
        assert np.allclose(vol.cost[:, :, 0], 0.0, atol=1e-6)

    def test_shifted_descriptors_recover_shift(self, rng):
        c, h, w, shift = 8, 16, 40, 7
        right = rng.standard_normal((c, h, w)).astype(np.float32)
        left = np.empty_like(right)
        left[:, :, shift:] = right[:, :, :w - shift]
        left[:, :, :shift] = rng.standard_normal((c, h, shift))
        full = np.ones((h, w), bool)
        vol = cost_volume_from_descriptors(left, right, full, full, d_max=12)
        disp, ok = winner_take_all(vol)
        interior = np.zeros((h, w), bool)
        interior[:, shift:] = True
        assert np.mean(disp[interior & ok] == shift) > 0.99

    def test_all_masked_out_leaves_no_valid_cells(self, rng):
        desc = rng.standard_normal((4, 6, 8)).astype(np.float32)
        empty = np.zeros((6, 8), bool)
        vol = cost_volume_from_descriptors(desc, desc, empty, empty, d_max=4)
        assert not vol.valid.any()
        disp, ok = winner_take_all(vol)
        assert not ok.any()

    def test_right_mask_constrains_cells(self, rng):
        desc = rng.standard_normal((4, 4, 10)).astype(np.float32)
        ml = np.ones((4, 10), bool)
        mr = np.ones((4, 10), bool)
        mr[:, :5] = False  # right half-plane masked off
        vol = cost_volume_from_descriptors(desc, desc, ml, mr, d_max=4)
        # left pixel x=6, d=3 -> right x=3 which is masked: invalid
        assert not vol.valid[0, 6, 3]
        assert vol.valid[0, 6, 1]

    def test_shape_mismatch_rejected(self, rng):
        a = rng.standard_normal((4, 6, 8)).astype(np.float32)
        b = rng.standard_normal((4, 6, 9)).astype(np.float32)
        with pytest.raises(ValueError, match="disagree"):
            cost_volume_from_descriptors(a, b, np.ones((6, 8), bool),
                                         np.ones((6, 8), bool), 4)

    def test_right_volume_reindexes_left(self, rng):
        desc_l = rng.standard_normal((4, 5, 12)).astype(np.float32)
        desc_r = rng.standard_normal((4, 5, 12)).astype(np.float32)
        full = np.ones((5, 12), bool)
        vol = cost_volume_from_descriptors(desc_l, desc_r, full, full, d_max=5)
        vol_r = right_volume_from_left(vol)
        for d in range(6):
            np.testing.assert_array_equal(vol_r.cost[:, :12 - d, d],
                                          vol.cost[:, d:, d])
            assert not vol_r.valid[:, 12 - d:, d].any() or d == 0


class TestSgm:
    def test_single_path_equals_exhaustive_dp(self, rng):
        cost = dyadic_costs(rng, (3, 8, 4))
        agg = sgm_aggregate(full_volume(cost), p1=0.25, p2=0.75, paths=1)
        oracle = brute_force_directional(cost, 0.25, 0.75, (0, 1))
        np.testing.assert_array_equal(agg.cost, oracle)

    def test_four_paths_equal_sum_of_directional_dps(self, rng):
        cost = dyadic_costs(rng, (4, 6, 3))
        agg = sgm_aggregate(full_volume(cost), p1=0.25, p2=0.5, paths=4)
        oracle = sum(brute_force_directional(cost, 0.25, 0.5, step)
                     for step in [(0, 1), (0, -1), (1, 0), (-1, 0)])
        np.testing.assert_array_equal(agg.cost, oracle)

    def test_eight_paths_include_diagonals(self, rng):
        cost = dyadic_costs(rng, (4, 5, 3))
        agg = sgm_aggregate(full_volume(cost), p1=0.25, p2=0.5, paths=8)
        steps = [(0, 1), (0, -1), (1, 0), (-1, 0),
                 (1, 1), (-1, -1), (1, -1), (-1, 1)]
        oracle = sum(brute_force_directional(cost, 0.25, 0.5, s) for s in steps)
        np.testing.assert_array_equal(agg.cost, oracle)

    def test_zero_penalties_preserve_raw_argmin(self, rng):
        vol = full_volume(rng.random((10, 12, 5)).astype(np.float32))
        agg = sgm_aggregate(vol, 0.0, 0.0, paths=8)
        np.testing.assert_array_equal(winner_take_all(agg)[0],
                                      winner_take_all(vol)[0])

    def test_constant_volume_ties_break_to_smallest_disparity(self):
        vol = full_volume(np.full((4, 6, 5), 0.5, np.float32))
        agg = sgm_aggregate(vol, 0.1, 0.4, paths=4)
        disp, ok = winner_take_all(agg)
        assert ok.all()
        assert np.all(disp == 0)

    def test_invalid_cells_never_serve_as_predecessors(self):
        # scanline with an all-invalid middle column: the DP must restart
        # after it instead of dragging the sentinel forward
        cost = np.full((1, 5, 3), 0.25, np.float32)
        valid = np.ones((1, 5, 3), bool)
        cost[0, 2] = INVALID_COST
        valid[0, 2] = False
        agg = sgm_aggregate(CostVolume(cost=cost, valid=valid), 0.25, 0.5, paths=1)
        # column 3 restarts: its aggregated cost equals its raw cost
        np.testing.assert_array_equal(agg.cost[0, 3], cost[0, 3])
        assert agg.cost[0, 4, 0] == pytest.approx(0.5)

    def test_penalty_validation(self):
        vol = full_volume(np.zeros((2, 2, 2), np.float32))
        with pytest.raises(ValueError):
            sgm_aggregate(vol, p1=0.5, p2=0.1)
        with pytest.raises(ValueError):
            sgm_aggregate(vol, p1=0.1, p2=0.5, paths=3)

    @given(seed=st.integers(0, 200), p2=st.floats(0.0, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_larger_p2_never_increases_total_variation(self, seed, p2):
        rng = np.random.default_rng(seed)
        cost = rng.random((1, 10, 4)).astype(np.float32)
        vol = full_volume(cost)

        def tv(p):
            agg = sgm_aggregate(vol, p1=0.0, p2=p, paths=1)
            d, _ = winner_take_all(agg)
            return int(np.abs(np.diff(d[0])).sum())

        assert tv(p2 + 0.5) <= tv(p2)


class TestLrCheck:
    def test_consistent_maps_fully_kept(self):
        # right map built from the left one: dr(x - d) = d
        h, w = 6, 20
        dl = np.full((h, w), 4.0, np.float32)
        dl[:, :4] = INVALID
        dr = np.full((h, w), 4.0, np.float32)
        out = lr_check(dl, dr, tol=1.0)
        np.testing.assert_array_equal(np.isfinite(out), np.isfinite(dl))

    def test_disagreement_beyond_tol_invalidated(self):
        dl = np.full((2, 12), 5.0, np.float32)
        dr = np.full((2, 12), 9.0, np.float32)
        out = lr_check(dl, dr, tol=1.0)
        assert not np.isfinite(out[:, 5:]).any()

    def test_within_tolerance_kept(self):
        dl = np.full((2, 12), 5.0, np.float32)
        dr = np.full((2, 12), 5.6, np.float32)
        out = lr_check(dl, dr, tol=1.0)
        assert np.isfinite(out[:, 5:]).all()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lr_check(np.zeros((2, 3)), np.zeros((3, 2)))

    @given(seed=st.integers(0, 100))
    @settings(max_examples=20, deadline=None)
    def test_synthetic_consistent_pair_survives(self, seed):
        # non-increasing disparities give collision-free counterparts, so
        # the constructed pair is exactly consistent and nothing is rejected
        rng = np.random.default_rng(seed)
        w = 24
        cols = np.sort(rng.integers(0, 6, w))[::-1].astype(np.float32)
        dl = np.broadcast_to(cols, (4, w)).copy()
        dr = np.full((4, w), INVALID, np.float32)
        for x in range(w):
            xr = x - int(dl[0, x])
            if xr >= 0:
                dr[:, xr] = dl[:, x]
            else:
                dl[:, x] = INVALID
        out = lr_check(dl, dr, tol=0.5)
        valid = np.isfinite(dl)
        np.testing.assert_array_equal(np.isfinite(out), valid)
        np.testing.assert_array_equal(out[valid], dl[valid])


class TestSubpixel:
    def test_symmetric_costs_give_zero_offset(self):
        assert parabola_offset(2.0, 1.0, 2.0) == 0.0

    def test_vertex_formula_example(self):
        # (3, 1, 2) at d=10 -> 10 + (3-2)/(2*(3+2-2)) = 10.1666..
        cost = np.full((1, 1, 20), 5.0, np.float32)
        cost[0, 0, 9:12] = [3.0, 1.0, 2.0]
        vol = full_volume(cost)
        disp = np.array([[10]], np.int32)
        ok = np.array([[True]])
        out = subpixel_refine(vol, disp, ok)
        assert out[0, 0] == pytest.approx(10 + 1.0 / 6.0, abs=1e-6)

    def test_boundary_disparities_unrefined(self):
        cost = np.zeros((1, 2, 4), np.float32)
        vol = full_volume(cost)
        disp = np.array([[0, 3]], np.int32)
        ok = np.array([[True, True]])
        out = subpixel_refine(vol, disp, ok)
        np.testing.assert_array_equal(out, [[0.0, 3.0]])

    @given(cm=st.floats(0.1, 5), c0=st.floats(0.0, 4.9), cp=st.floats(0.1, 5))
    @settings(max_examples=50, deadline=None)
    def test_offset_always_within_half_pixel(self, cm, c0, cp):
        if c0 >= min(cm, cp):
            return
        off = float(parabola_offset(cm, c0, cp))
        assert -0.5 <= off <= 0.5
        # vertex of the interpolating parabola really is the minimum
        a = (cm + cp - 2 * c0) / 2
        b = (cp - cm) / 2
        assert off == pytest.approx(-b / (2 * a), abs=1e-6)


class TestPipeline:
    def test_mask_constraint_holds_in_output(self, rng):
        desc = rng.standard_normal((6, 20, 30)).astype(np.float32)
        ml = np.zeros((20, 30), bool)
        ml[5:15, 8:25] = True
        mr = np.ones((20, 30), bool)
        res = match_descriptors(desc, desc, ml, mr,
                                StereoParams(d_max=8, mask_dilation=3))
        assert not np.isfinite(res.disp[~ml]).any()

    def test_self_match_gives_zero_disparity(self, rng):
        desc = rng.standard_normal((6, 16, 24)).astype(np.float32)
        full = np.ones((16, 24), bool)
        res = match_descriptors(desc, desc, full, full, StereoParams(d_max=6))
        finite = np.isfinite(res.disp)
        assert finite.mean() > 0.95
        assert np.allclose(res.disp[finite], 0.0, atol=0.01)

    def test_dilate_mask_grows_by_margin(self):
        m = np.zeros((9, 9), bool)
        m[4, 4] = True
        d = dilate_mask(m, 2)
        assert d[4, 2] and d[2, 4] and not d[4, 1]

    def test_params_validation(self):
        with pytest.raises(ValueError):
            StereoParams(d_max=0).validate()
        with pytest.raises(ValueError):
            StereoParams(p1=0.5, p2=0.1).validate()
        with pytest.raises(ValueError):
            StereoParams(paths=5).validate()
