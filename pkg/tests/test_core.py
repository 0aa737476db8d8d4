import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from crpslearn.core import (ExpertPanel, MarginalGrid, ObservationSeries, ProbGrid, ValidationError,
                            WeightField, crps_from_quantiles, quantile_loss,
                            quantile_loss_subgradient, sort_quantiles, validate_panel)

from oracles import pinball

probs_st = st.floats(0.001, 0.999)
reals = st.floats(-1e3, 1e3, allow_nan=False)


class TestQuantileLoss:
    @pytest.mark.parametrize("p, pred, y, expected", [
        (0.5, 0.0, 0.0, 0.0),
        (0.5, 0.0, 1.0, 0.5),
        (0.9, 2.0, 1.0, 0.1),
    ])
    def test_examples(self, p, pred, y, expected):
        assert quantile_loss(p, pred, y) == pytest.approx(expected, abs=1e-15)

    @given(probs_st, reals, reals)
    def test_matches_scalar_definition(self, p, pred, y):
        assert quantile_loss(p, pred, y) == pytest.approx(pinball(p, pred, y), rel=1e-12, abs=1e-12)

    @given(probs_st, reals, reals)
    def test_nonnegative_and_zero_only_at_y(self, p, pred, y):
        v = quantile_loss(p, pred, y)
        assert v >= 0
        assert (v == 0) == (pred == y)

    @given(probs_st, reals, reals, reals, st.floats(0, 1))
    def test_convex_in_prediction(self, p, a, b, y, lam):
        mid = lam * a + (1 - lam) * b
        lhs = quantile_loss(p, mid, y)
        rhs = lam * quantile_loss(p, a, y) + (1 - lam) * quantile_loss(p, b, y)
        assert lhs <= rhs + 1e-9 * (1 + abs(rhs))

    def test_vectorised(self):
        p = np.array([0.1, 0.5, 0.9])
        out = quantile_loss(p, np.array([0.0, 1.0, 2.0]), 1.0)
        np.testing.assert_allclose(out, [0.1, 0.0, 0.1])

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            quantile_loss(0.5, bad, 0.0)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_rejects_bad_probability(self, p):
        with pytest.raises(ValueError):
            quantile_loss(p, 0.0, 1.0)


class TestSubgradient:
    @pytest.mark.parametrize("p, pred, y, expected", [
        (0.5, 2.0, 1.0, 0.5),
        (0.5, 0.0, 1.0, -0.5),
        (0.3, 1.0, 1.0, -0.3),
    ])
    def test_examples(self, p, pred, y, expected):
        assert quantile_loss_subgradient(p, pred, y) == pytest.approx(expected)

    @given(probs_st, reals, reals)
    def test_matches_finite_difference_away_from_kink(self, p, pred, y):
        # piecewise linear: a central difference inside one piece is exact up to rounding
        h = 1e-3
        if abs(pred - y) <= 2 * h:
            return
        fd = (quantile_loss(p, pred + h, y) - quantile_loss(p, pred - h, y)) / (2 * h)
        assert quantile_loss_subgradient(p, pred, y) == pytest.approx(fd, abs=1e-8)


class TestCRPS:
    def test_perfect_forecast_is_zero(self):
        pg = ProbGrid()
        assert crps_from_quantiles(np.full(99, 1.7), 1.7, pg) == 0.0

    def test_standard_normal_at_zero(self):
        pg = ProbGrid()
        q = stats.norm.ppf(pg.probs)
        exact = (math.sqrt(2) - 1) / math.sqrt(math.pi)
        assert exact == pytest.approx(0.2337, abs=1e-4)
        approx = crps_from_quantiles(q, 0.0, pg, scale2=True)
        assert abs(approx - exact) / exact < 0.01

    def test_default_halves_textbook_scaling(self):
        q = stats.norm.ppf(ProbGrid().probs)
        a = crps_from_quantiles(q, 0.3)
        assert crps_from_quantiles(q, 0.3, scale2=True) == pytest.approx(2 * a, rel=1e-15)

    def test_approximation_improves_with_resolution(self):
        # uniform(0,1) at y=0.3: CRPS = y^2 - y + 1/3
        exact = 0.3**2 - 0.3 + 1 / 3
        errs = []
        for P in (9, 19, 39, 79, 159):
            pg = ProbGrid.equidistant(P)
            errs.append(abs(crps_from_quantiles(pg.probs, 0.3, pg, scale2=True) - exact))
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_matches_brute_force(self, rng):
        pg = ProbGrid.equidistant(5)
        preds = rng.normal(size=5)
        y = 0.4
        brute = sum(pinball(p, q, y) for p, q in zip(pg.probs, preds)) / 5
        assert crps_from_quantiles(preds, y, pg) == pytest.approx(brute, rel=1e-14)

    def test_worse_forecast_scores_higher(self):
        pg = ProbGrid.equidistant(9)
        good = stats.norm.ppf(pg.probs)
        assert crps_from_quantiles(good + 2.0, 0.0, pg) > crps_from_quantiles(good + 1.0, 0.0, pg)

    def test_batched_axes(self, rng):
        pg = ProbGrid.equidistant(7)
        preds = rng.normal(size=(4, 3, 7))
        y = rng.normal(size=(4, 3))
        out = crps_from_quantiles(preds, y, pg)
        assert out.shape == (4, 3)
        assert out[2, 1] == pytest.approx(crps_from_quantiles(preds[2, 1], y[2, 1], pg))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            crps_from_quantiles(np.zeros(5), 0.0, ProbGrid.equidistant(4))


class TestSorting:
    def test_examples(self):
        np.testing.assert_array_equal(sort_quantiles([1, 2, 3]), [1, 2, 3])
        np.testing.assert_array_equal(sort_quantiles([2, 1, 3]), [1, 2, 3])

    @given(st.lists(reals, min_size=1, max_size=30))
    def test_sorted_permutation_and_idempotent(self, xs):
        out = sort_quantiles(xs)
        assert np.all(np.diff(out) >= 0)
        assert sorted(xs) == list(out)
        np.testing.assert_array_equal(sort_quantiles(out), out)

    @given(st.lists(st.floats(-10, 10), min_size=9, max_size=9), st.floats(-10, 10))
    def test_rearrangement_never_hurts(self, xs, y):
        pg = ProbGrid.equidistant(9)
        raw = crps_from_quantiles(np.array(xs), y, pg)
        assert crps_from_quantiles(sort_quantiles(xs), y, pg) <= raw + 1e-12


class TestContainers:
    def test_default_grid_is_percentiles(self):
        pg = ProbGrid()
        assert len(pg) == 99
        assert pg.probs[0] == 0.01 and pg.probs[-1] == 0.99

    @pytest.mark.parametrize("bad", [[], [0.0, 0.5], [0.5, 1.0], [0.3, 0.2], [0.2, 0.2]])
    def test_invalid_prob_grid(self, bad):
        with pytest.raises(ValueError):
            ProbGrid(np.array(bad))

    def test_invalid_marginal_grid(self):
        with pytest.raises(ValueError):
            MarginalGrid(np.array([1.0, 1.0]))

    def test_unit_coordinates(self):
        np.testing.assert_allclose(MarginalGrid.range(5).unit_coordinates(), np.linspace(0, 1, 5))
        np.testing.assert_allclose(MarginalGrid(np.array([3.0])).unit_coordinates(), [0.5])

    def test_arrays_are_read_only(self):
        panel = ExpertPanel(np.zeros((1, 1, 1, 2)))
        with pytest.raises(ValueError):
            panel.values[0, 0, 0, 0] = 1.0

    def test_weight_field_sums_to_one(self):
        WeightField(np.full((2, 3, 4), 0.25))
        with pytest.raises(ValueError):
            WeightField(np.full((2, 3, 4), 0.3))


class TestValidatePanel:
    def _bundle(self, T=3, D=2, P=5, K=2):
        return (np.zeros((T, D, P, K)), np.zeros((T, D)),
                ProbGrid.equidistant(P), MarginalGrid.range(D))

    def test_consistent_bundle(self):
        values, obs, pg, dg = self._bundle()
        b = validate_panel(ExpertPanel(values), ObservationSeries(obs), pg, dg)
        assert b.dims == (3, 2, 5, 2)

    def test_time_axis_mismatch(self):
        values, _, pg, dg = self._bundle()
        with pytest.raises(ValidationError) as exc:
            validate_panel(values, np.zeros((2, 2)), pg, dg)
        assert any("time axis" in p for p in exc.value.problems)

    def test_nan_location_is_reported(self):
        values, obs, pg, dg = self._bundle()
        values[1, 0, 2, 1] = np.nan
        with pytest.raises(ValidationError) as exc:
            validate_panel(values, obs, pg, dg)
        assert "(t=1, d=0, p=2, k=1)" in str(exc.value)

    def test_collects_every_problem(self):
        values, _, pg, _ = self._bundle()
        values[0, 0, 0, 0] = np.inf
        with pytest.raises(ValidationError) as exc:
            validate_panel(values, np.zeros((2, 3)), pg, MarginalGrid.range(4))
        assert len(exc.value.problems) >= 3
