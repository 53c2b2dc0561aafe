import math

import numpy as np
import pytest

from emm import (
    ExampleSpec,
    InvalidGrid,
    analytic_oracles,
    build_example_tree,
    check_density,
    cond_expectation,
    divergence_sweep,
    localization_sequence,
    localization_suite,
    martingale_residuals,
    verify_localization,
)


class TestBuild:
    def test_two_point_grid(self):
        ex = build_example_tree(ExampleSpec("one_jump", 2))
        np.testing.assert_array_equal(ex.spec.u, [0.25, 0.75])
        assert float(np.mean(2 * ex.spec.u)) == 1.0
        assert len(ex.tree) == 1 + 2 + 4

    @pytest.mark.parametrize("bad", [ExampleSpec("one_jump", 3), ExampleSpec("one_jump", 0),
                                     ExampleSpec("three_jump", 4), ExampleSpec("two_jump", 4, 0.0)])
    def test_invalid(self, bad):
        with pytest.raises(InvalidGrid):
            build_example_tree(bad)

    @pytest.mark.parametrize("variant", ["one_jump", "two_jump"])
    @pytest.mark.parametrize("N", [2, 16, 64])
    def test_processes_are_martingales(self, variant, N):
        ex = build_example_tree(ExampleSpec(variant, N))
        assert martingale_residuals(ex.tree, ex.S_one).max_residual == 0.0
        # the extra jump is added before differencing: (1/u + s) - s rounds
        rep = martingale_residuals(ex.tree, ex.S)
        assert rep.max_residual <= 4 * np.finfo(float).eps * rep.scale

    def test_values(self):
        ex = build_example_tree(ExampleSpec("two_jump", 4))
        t = ex.tree
        leaf = t.index["u0+"]
        assert ex.S[leaf, 0] == 1 / 0.125 - 1
        assert ex.S[t.index["u3"], 0] == 1.0
        assert ex.S_one[t.index["u3"], 0] == 0.0

    @pytest.mark.parametrize("N", [2, 8, 64])
    def test_paper_density_is_martingale(self, N):
        ex = build_example_tree(ExampleSpec("two_jump", N))
        check_density(ex.tree, ex.Z_paper)
        # Z S is a martingale, Z S' is not
        ZS = ex.Z_paper[:, None] * ex.S_one
        assert martingale_residuals(ex.tree, ZS).max_residual == 0.0
        ZS2 = ex.Z_paper[:, None] * ex.S
        gap = float(cond_expectation(ex.tree, ZS2, 0)[0, 0])
        assert abs(gap - 0.5) <= 2 / N

    @pytest.mark.parametrize("eps", [0.1, 0.5, 1.0])
    def test_capped_density(self, eps):
        N = 64
        ex = build_example_tree(ExampleSpec("two_jump", N, eps))
        mean = float(np.mean(np.minimum(ex.spec.u, eps))) / (eps - eps * eps / 2)
        # midpoint rule on a piecewise-linear integrand: error O(1/N^2)
        assert abs(mean - 1.0) <= 1.0 / N ** 2
        assert np.max(ex.Z_hat) <= min(1.0, eps) / (eps - eps * eps / 2) + 1e-15


class TestOracles:
    @pytest.mark.parametrize("N", [2, 4, 16, 64, 256])
    def test_table(self, N):
        o = analytic_oracles(ExampleSpec("two_jump", N))
        assert o["a_EZ2_absS2"]["value"] == pytest.approx(2.0, abs=1e-12)
        assert abs(o["b_EZ1_S1prime"]["value"] - 0.5) <= 2 / N
        assert o["d_EZ2_S2"]["value"] == 0.0
        assert o["c_E_absS2"]["value"] == pytest.approx(o["c_E_absS2"]["mean_inverse_u"], rel=1e-14)

    def test_first_moment_grows_like_log(self):
        vals = [analytic_oracles(ExampleSpec("one_jump", N))["c_E_absS2"]["value"] for N in (16, 64, 256)]
        # mean of 1/u at midpoints is log N + log 4 + gamma + o(1)
        for N, v in zip((16, 64, 256), vals):
            assert v - math.log(N) == pytest.approx(math.log(4) + 0.5772156649, abs=0.01)


class TestLocalization:
    def test_four_point_count(self):
        tau = localization_sequence(ExampleSpec("one_jump", 4), 2)
        assert tau.marked == frozenset({"u0", "u1"})

    def test_beyond_grid_marks_nothing(self):
        spec = ExampleSpec("one_jump", 8)
        assert not localization_sequence(spec, 16).marked

    def test_suite_ends_unmarked(self):
        suite = localization_suite(ExampleSpec("one_jump", 64))
        assert not suite[-1].marked
        sizes = [len(t.marked) for t in suite]
        assert sizes == sorted(sizes, reverse=True)

    def test_verify(self):
        spec = ExampleSpec("two_jump", 64)
        ex = build_example_tree(spec)
        rep = verify_localization(ex.tree, ex.S, localization_suite(spec))
        assert rep.passed and rep.monotone

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            localization_sequence(ExampleSpec(), 0.5)


class TestSweep:
    def test_p_column_increases(self):
        rows = divergence_sweep("two_jump", [4, 8, 16], 0.5)
        p = [r["log_EP_exp_S2"] for r in rows]
        assert p[0] < p[1] < p[2]
        for r in rows:
            assert r["sup_Z"] <= 1.5 + 1e-12
            assert math.isfinite(r["EQ_abs_S2"])

    def test_measure_tv(self):
        rows = divergence_sweep("two_jump", [16, 32], 0.5, via_measure=True)
        assert all(r["tv"] <= 0.5 for r in rows)

    def test_rejects_unsorted(self):
        with pytest.raises(InvalidGrid):
            divergence_sweep("two_jump", [8, 4], 0.5)
