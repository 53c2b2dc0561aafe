import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emm import (
    ExampleSpec,
    StoppingTime,
    build_example_tree,
    exponential_moment,
    expectation,
    generalized_martingale_check,
    local_implies_generalized,
    localization_suite,
    martingale_residuals,
    never_stop,
    stop_anchor,
    stopped_process,
    verify_localization,
)
from emm.errors import NotLocalizing
from emm.martingale import increment_scale

from conftest import martingale_instances, random_trees


class TestResiduals:
    def test_zero_process(self, two_period):
        rep = martingale_residuals(two_period, np.zeros(len(two_period)))
        assert rep.max_residual == 0.0 and rep.is_martingale

    def test_coin(self, coin):
        rep = martingale_residuals(coin, [0.0, 1.0, -1.0])
        assert rep.max_residual == 0.0

    def test_thirds(self, third):
        assert martingale_residuals(third, [0.0, 2.0, -1.0]).max_residual <= 1e-15
        bad = martingale_residuals(third, [0.0, 2.0, 0.0])
        assert bad.max_residual == pytest.approx(2 / 3, abs=1e-15)
        assert not bad.is_martingale
        assert bad.worst_atom == (0, "r")

    def test_threshold_is_relative(self, third):
        S = np.array([0.0, 2.0, -1.0]) * 1e6
        S[1] += 1e-6  # drift 1/3e-6, scale 2e6
        rep = martingale_residuals(third, S)
        assert rep.is_martingale
        assert rep.scale == pytest.approx(2e6, rel=1e-9)

    def test_report_serializes(self, two_period):
        rep = martingale_residuals(two_period, np.arange(len(two_period), dtype=float))
        d = rep.to_dict()
        assert set(d["residuals"]) == {"0", "1"}
        assert d["worst_atom"] is not None


class TestGeneralized:
    def test_failing_instance(self, third):
        rep = generalized_martingale_check(third, [0.0, 2.0, 0.0])
        assert not rep.is_generalized
        assert rep.max_residual == pytest.approx(2 / 3)

    def test_example_grows_but_is_martingale(self):
        vals = []
        for N in (16, 64, 256):
            ex = build_example_tree(ExampleSpec("one_jump", N))
            rep = generalized_martingale_check(ex.tree, ex.S)
            assert rep.is_generalized and rep.max_residual == 0.0
            vals.append(rep.l1_norms[2])
        assert vals[0] < vals[1] < vals[2]
        # Riemann sum of 1/u at the midpoints
        assert vals[1] == pytest.approx(np.mean(1 / ExampleSpec("one_jump", 64).u), rel=1e-14)

    @given(martingale_instances())
    def test_verdicts_coincide_on_martingales(self, inst):
        tree, S = inst
        plain = martingale_residuals(tree, S)
        gen = generalized_martingale_check(tree, S)
        assert plain.is_martingale and gen.is_generalized
        assert gen.truncation_gap <= 1e-12 * (1 + np.max(np.abs(S)))

    @given(martingale_instances(), st.integers(0, 2**32 - 1))
    def test_verdicts_coincide_with_drift(self, inst, seed):
        tree, S = inst
        rng = np.random.default_rng(seed)
        S = S + rng.normal(size=S.shape) * 0.1
        plain = martingale_residuals(tree, S)
        gen = generalized_martingale_check(tree, S)
        assert plain.is_martingale == gen.is_generalized


class TestExponentialMoment:
    def test_zero(self, two_period):
        assert exponential_moment(two_period, np.zeros(len(two_period)), 2) == 0.0

    def test_coin(self, coin):
        val = exponential_moment(coin, [0.0, 1.0, -1.0], 1)
        assert val == pytest.approx(math.log(0.5 * math.e + 0.5 * math.e), abs=1e-15)

    def test_no_overflow(self, coin):
        val = exponential_moment(coin, [0.0, 1e6, -1e6], 1)
        assert val == pytest.approx(1e6, rel=1e-15)

    def test_example_dominated_by_max_term(self):
        ex = build_example_tree(ExampleSpec("one_jump", 256))
        val = exponential_moment(ex.tree, ex.S, 2)
        top = 2 * 256
        assert math.isfinite(val)
        assert top - math.log(256) - 1 <= val <= top

    @given(martingale_instances())
    def test_jensen(self, inst):
        tree, S = inst
        for t in range(tree.horizon + 1):
            mean = np.linalg.norm(expectation(tree, S, t))
            assert exponential_moment(tree, S, t) >= mean - 1e-12


class TestStoppedResidualIdentity:
    @given(random_trees(), st.integers(0, 2**32 - 1))
    def test_identity(self, tree, seed):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=len(tree))
        # mark a random antichain: pick nodes top-down, skipping descendants of marks
        marks, blocked = set(), np.zeros(len(tree), dtype=bool)
        for i in range(1, len(tree)):
            blocked[i] = blocked[tree.parent[i]] or tree.ids[tree.parent[i]] in marks
            if not blocked[i] and rng.random() < 0.3:
                marks.add(tree.ids[i])
        tau = StoppingTime(frozenset(marks))
        X = stopped_process(tree, S, tau)
        base = martingale_residuals(tree, S)
        stopped = martingale_residuals(tree, X)
        anchor = stop_anchor(tree, tau)
        for t in range(tree.horizon):
            alive = anchor[tree.levels[t]] == tree.levels[t]
            alive &= ~np.isin(tree.levels[t], tau.positions(tree))
            expect = np.where(alive[:, None], base.residuals[t], 0.0)
            # frozen atoms give S_g (sum p - 1): zero up to rounding
            np.testing.assert_allclose(stopped.residuals[t], expect,
                                       rtol=0, atol=1e-15 * (1 + np.max(np.abs(S))))
            np.testing.assert_array_equal(stopped.residuals[t][alive], base.residuals[t][alive])


class TestLocalization:
    def test_never_stopping_martingale(self, coin):
        S = [0.0, 1.0, -1.0]
        rep = verify_localization(coin, S, [never_stop()])
        assert rep.passed and rep.exhaustion_mass == [0.0]

    def test_example_sequence(self):
        spec = ExampleSpec("one_jump", 64)
        ex = build_example_tree(spec)
        rep = verify_localization(ex.tree, ex.S, localization_suite(spec))
        assert rep.passed and rep.monotone
        assert max(rep.stopped_residuals) == 0.0
        assert rep.exhaustion_mass[-1] == 0.0

    def test_root_stop_never_exhausts(self, coin):
        root = StoppingTime(frozenset({"r"}))
        with pytest.raises(NotLocalizing) as err:
            verify_localization(coin, [0.0, 1.0, -1.0], [root, root])
        assert err.value.location == (1, None, None)

    def test_drift_located(self, third):
        with pytest.raises(NotLocalizing) as err:
            verify_localization(third, [0.0, 2.0, 0.0], [never_stop()])
        assert err.value.location == (0, 0, "r")

    def test_root_mark_zeroes_process(self, third):
        # drifting S is harmless at n = 0 when the root is marked
        root = StoppingTime(frozenset({"r"}))
        with pytest.raises(NotLocalizing) as err:
            verify_localization(third, [0.0, 2.0, 0.0], [root, never_stop()])
        assert err.value.location[0] == 1

    def test_proposition(self):
        spec = ExampleSpec("two_jump", 64)
        ex = build_example_tree(spec)
        rep = local_implies_generalized(ex.tree, ex.S, localization_suite(spec))
        assert rep.holds
        assert rep.to_dict()["generalized"]["is_generalized"]

    @given(martingale_instances())
    def test_proposition_on_generated(self, inst):
        tree, S = inst
        assert local_implies_generalized(tree, S, [never_stop()]).holds

    def test_increment_scale(self, third):
        assert increment_scale(third, [0.0, 2.0, -1.0]) == 2.0
