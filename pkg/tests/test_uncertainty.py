"""
Tests for quantile forecasts

Tests cover:
- The shipped factor table and applying it to median grids
- Level-12 and level-11 statistical corrections
- Factor fitting on synthetic distributions
- Submission layout and parsing
"""

import logging

import numpy as np
import pytest

from errors import MissingSeriesError, ValidationError
from forecast import ForecastGrid
from hierarchy import N_LEVELS
from metrics import QUANTILES, HierarchicalScorer
from uncertainty import (FactorProblem, QuantileFactorTable, QuantileGrid, StatQuantiles, apply_factors,
                         assemble_submission, correct_level11, correct_level12, level11_stats,
                         optimize_factors, probabilistic_forecast, read_quantile_submission,
                         statistical_quantiles)

SHIPPED_TABLE = "config/quantile_factors.csv"


@pytest.fixture
def shipped_table(request):
    return QuantileFactorTable.from_csv(request.config.rootpath / SHIPPED_TABLE)


def constant_medians(index, value=10.0, horizon=28):
    return {level: ForecastGrid(level, index.levels[level].keys, 113,
                                np.full((len(index.levels[level]), horizon), value))
            for level in range(1, N_LEVELS + 1)}


def single_problem(level, medians, actuals, weight=None):
    n = medians.shape[0]
    weight = np.full(n, 1.0 / n) if weight is None else weight
    return FactorProblem({level: medians}, {level: actuals}, {level: weight}, {level: np.ones(n)})


@pytest.mark.unit
class TestFactorTable:
    """Test loading and applying quantile factors"""

    def test_shipped_spot_values(self, shipped_table):
        assert shipped_table.factor(1, 0.005) == 0.890
        assert shipped_table.factor(12, 0.995) == 4.066
        np.testing.assert_array_equal(shipped_table.extra, np.ones(N_LEVELS))

    def test_apply_to_constant_median(self, shipped_table, toy_index):
        """Every quantile is median x factor; median 10 gives 40.66 at level 12, u=0.995"""
        grids = apply_factors(constant_medians(toy_index), shipped_table)
        assert grids[12].values[0, 0, 8] == pytest.approx(40.66, abs=1e-12)
        assert grids[1].values[0, 5, 0] == pytest.approx(8.90, abs=1e-12)
        for level in range(1, N_LEVELS + 1):
            np.testing.assert_allclose(grids[level].values[0, 0], 10 * shipped_table.factors[level - 1],
                                       rtol=0, atol=1e-12)
            assert grids[level].is_monotone()
            np.testing.assert_array_equal(grids[level].values[:, :, 4], 10.0)

    def test_extra_multiplier_on_last_quantile(self, toy_index):
        extra = np.ones(N_LEVELS)
        extra[11] = 1.03
        table = QuantileFactorTable(np.ones((N_LEVELS, 9)), extra)
        grids = apply_factors(constant_medians(toy_index), table)
        assert grids[12].values[0, 0, 8] == pytest.approx(10.3)
        assert grids[12].values[0, 0, 7] == 10.0

    def test_identity_leaves_median(self, toy_index):
        grids = apply_factors(constant_medians(toy_index, 3.0), QuantileFactorTable.identity())
        np.testing.assert_array_equal(grids[5].values, 3.0)

    def test_missing_level(self, shipped_table, toy_index):
        medians = constant_medians(toy_index)
        del medians[7]
        with pytest.raises(MissingSeriesError):
            apply_factors(medians, shipped_table)

    def test_validation(self, tmp_path):
        """Median factor 1, non-negative factors, monotone rows, complete files"""
        factors = np.ones((N_LEVELS, 9))
        factors[0, 4] = 1.1
        with pytest.raises(ValidationError, match="median"):
            QuantileFactorTable(factors, np.ones(N_LEVELS))
        factors = np.ones((N_LEVELS, 9))
        factors[2, 0] = 1.2
        with pytest.raises(ValidationError, match="level 3"):
            QuantileFactorTable(factors, np.ones(N_LEVELS)).check_monotone()
        with pytest.raises(ValidationError, match="not found"):
            QuantileFactorTable.from_csv(tmp_path / "absent.csv")

    def test_csv_round_trip(self, shipped_table, tmp_path):
        path = shipped_table.to_csv(tmp_path / "factors.csv")
        back = QuantileFactorTable.from_csv(path)
        np.testing.assert_array_equal(back.factors, shipped_table.factors)

    def test_incomplete_csv(self, shipped_table, tmp_path):
        frame = shipped_table.to_frame()
        frame[frame["level"] != 4].to_csv(tmp_path / "f.csv", index=False)
        with pytest.raises(ValidationError, match="one row per level"):
            QuantileFactorTable.from_csv(tmp_path / "f.csv")


@pytest.mark.unit
class TestCorrections:
    """Test the statistical corrections for levels 12 and 11"""

    def test_level12_example(self):
        """Estimate 10 with daily stats 8 and weekly stats 6 becomes 8.2"""
        estimate = np.array([0, 0, 0, 0, 5, 10, 10, 10, 10], dtype=float)
        grid = QuantileGrid(12, ["A_CA_1"], 113, estimate[None, None, :])
        upper = np.array([[0, 0, 0, 0, 8, 8, 8, 8]], dtype=float)
        weekly = np.array([[0, 0, 0, 0, 6, 6, 6, 6]], dtype=float)
        stats = {"daily_long": StatQuantiles(upper, 364, False), "daily_short": StatQuantiles(upper, 28, False),
                 "weekly_long": StatQuantiles(weekly, 364, True), "weekly_short": StatQuantiles(weekly, 84, True)}
        corrected = correct_level12(grid, stats)
        np.testing.assert_allclose(corrected.values[0, 0], [0, 0, 0, 0, 5, 8.2, 8.2, 8.2, 8.2],
                                   rtol=0, atol=1e-12)

    def test_level12_needs_all_windows(self):
        grid = QuantileGrid(12, ["A_CA_1"], 113, np.ones((1, 1, 9)))
        with pytest.raises(MissingSeriesError):
            correct_level12(grid, {"daily_long": StatQuantiles(np.ones((1, 8)), 364, False)})

    def test_level11_example(self):
        """Estimate 100 with a stats blend of 80 becomes 98.2"""
        estimate = np.array([0, 0, 0, 0, 50, 100, 100, 100, 100], dtype=float)
        grid = QuantileGrid(11, ["A_CA"], 113, estimate[None, None, :])
        stats = np.array([[0, 0, 0, 0, 80, 80, 80, 80]], dtype=float)
        corrected = correct_level11(grid, stats, stats)
        np.testing.assert_allclose(corrected.values[0, 0], [0, 0, 0, 0, 50, 98.2, 98.2, 98.2, 98.2],
                                   rtol=0, atol=1e-12)

    def test_level11_shape_check(self):
        grid = QuantileGrid(11, ["A_CA", "B_CA"], 113, np.ones((2, 1, 9)))
        with pytest.raises(MissingSeriesError):
            correct_level11(grid, np.ones((1, 8)), np.ones((1, 8)))

    def test_corrected_cells_are_sorted(self):
        """A correction that crosses quantiles is re-sorted"""
        grid = QuantileGrid(11, ["A_CA"], 113, np.linspace(0, 8, 9)[None, None, :])
        stats = np.array([[100, 0, 0, 0, 0, 0, 0, 0]], dtype=float)
        assert correct_level11(grid, stats, stats).is_monotone()


@pytest.mark.unit
class TestStatisticalQuantiles:
    """Test empirical quantiles over trailing windows"""

    def test_daily_matches_numpy(self):
        history = np.arange(1.0, 41.0)[None, :]
        stats = statistical_quantiles(history, 40, 28)
        expected = np.quantile(np.arange(13.0, 41.0), [0.005, 0.025, 0.165, 0.25, 0.75, 0.835, 0.975, 0.995])
        np.testing.assert_allclose(stats.values[0], expected, rtol=1e-12)

    def test_weekly_sums(self):
        """Weekly mode uses 7-day sums divided by 7"""
        history = np.repeat([0.0, 7.0, 14.0, 21.0], 7)[None, :]
        stats = statistical_quantiles(history, 28, 28, weekly=True)
        assert stats.window == 28
        expected = np.quantile([7.0, 14.0, 21.0, 0.0], [0.005, 0.025, 0.165, 0.25, 0.75, 0.835, 0.975, 0.995])
        np.testing.assert_allclose(stats.values[0], expected, rtol=1e-12)

    def test_window_shrinks(self, caplog):
        with caplog.at_level(logging.WARNING):
            stats = statistical_quantiles(np.ones((2, 50)), 50, 364)
        assert stats.window == 50
        assert "shrunk" in caplog.text

    def test_inactive_rows_give_zero(self):
        history = np.full((2, 30), np.nan)
        history[1] = 3.0
        stats = statistical_quantiles(history, 30, 28)
        np.testing.assert_array_equal(stats.values[0], 0.0)
        np.testing.assert_array_equal(stats.values[1], 3.0)

    def test_weekly_needs_a_week(self):
        with pytest.raises(ValidationError):
            statistical_quantiles(np.ones((1, 5)), 5, 84, weekly=True)

    def test_level11_strategies_agree_for_single_members(self, toy_panel, toy_index):
        """With one store per state both strategies give the same statistics"""
        summed = level11_stats(toy_panel.history, toy_index, 112, "summed-members")
        direct = level11_stats(toy_panel.history, toy_index, 112, "direct")
        np.testing.assert_allclose(summed[0], direct[0])
        np.testing.assert_allclose(summed[1], direct[1])
        with pytest.raises(ValueError):
            level11_stats(toy_panel.history, toy_index, 112, "pooled")


@pytest.mark.unit
class TestOptimizeFactors:
    """Test fitting factors by minimizing the weighted scaled pinball loss"""

    def test_recovers_lognormal_quantiles(self):
        """Fitted tail factors match the true quantile ratios of a log-normal"""
        rng = np.random.default_rng(0)
        medians = np.full((200, 28), 10.0)
        actuals = 10.0 * np.exp(0.1 * rng.standard_normal((200, 28)))
        problem = single_problem(12, medians, actuals)
        table, report = optimize_factors(problem, symmetric_levels=())
        effective = table.effective()[11]
        assert effective[8] == pytest.approx(np.exp(0.1 * 2.5758), abs=0.05)
        assert effective[0] == pytest.approx(np.exp(-0.1 * 2.5758), abs=0.05)
        assert effective[4] == 1.0
        assert (np.diff(effective) >= 0).all()
        assert problem.wspl(table) <= problem.wspl(QuantileFactorTable.identity())
        assert len(report) == 9
        assert (report["loss"] <= report["loss_identity"] + 1e-12).all()

    def test_symmetric_levels_fit_mirrored_pairs(self):
        """Symmetric levels move each (u, 1-u) pair by the same amount"""
        rng = np.random.default_rng(1)
        medians = np.full((200, 28), 10.0)
        actuals = medians + rng.normal(0, 1.0, size=medians.shape)
        table, _ = optimize_factors(single_problem(1, medians, actuals))
        row = table.factors[0]
        for j in range(4):
            assert row[j] + row[8 - j] == pytest.approx(2.0, abs=1e-9)
        assert row[0] < row[3] < 1.0 < row[5] < row[8]

    def test_perfect_medians_keep_identity(self):
        """When actuals equal the medians no factor beats 1.0"""
        medians = np.random.default_rng(2).uniform(1, 5, size=(20, 28))
        table, _ = optimize_factors(single_problem(12, medians, medians.copy()))
        np.testing.assert_array_equal(table.factors, 1.0)
        np.testing.assert_array_equal(table.extra, 1.0)

    def test_scale_equivariance(self):
        """Scaling medians, actuals and scales together leaves the factors unchanged"""
        rng = np.random.default_rng(3)
        medians = rng.uniform(1, 5, size=(50, 28))
        actuals = medians * np.exp(0.3 * rng.standard_normal(medians.shape))
        base, _ = optimize_factors(single_problem(10, medians, actuals))
        scaled_problem = FactorProblem({10: 4 * medians}, {10: 4 * actuals}, {10: np.full(50, 0.02)},
                                       {10: np.full(50, 4.0)})
        scaled, _ = optimize_factors(scaled_problem)
        np.testing.assert_array_equal(base.factors, scaled.factors)

    def test_degenerate_level_skipped(self, caplog):
        medians = np.ones((3, 28))
        with caplog.at_level(logging.WARNING):
            table, _ = optimize_factors(single_problem(12, medians, np.zeros((3, 28))))
        assert "all-zero" in caplog.text
        np.testing.assert_array_equal(table.factors, 1.0)

    def test_needs_a_window(self):
        with pytest.raises(ValidationError):
            optimize_factors([])

    def test_from_scorer(self, toy_panel, toy_index):
        """Problems built from a scorer cover all levels and never fit worse than identity"""
        scorer = HierarchicalScorer(toy_panel, toy_index, 112)
        median = ForecastGrid(12, toy_index.series_keys, 113, np.full((2, 28), 2.0))
        problem = FactorProblem.from_scorer(scorer, median, 113)
        assert problem.levels == list(range(1, 13))
        np.testing.assert_array_equal(problem.medians[1], np.full((1, 28), 4.0))
        table, _ = optimize_factors(problem)
        assert problem.wspl(table) <= problem.wspl(QuantileFactorTable.identity())


@pytest.mark.unit
class TestProbabilisticForecast:
    """Test the end-to-end quantile pipeline and submission layout"""

    def test_toy_pipeline(self, toy_panel, toy_index, shipped_table):
        median = ForecastGrid(12, toy_index.series_keys, 113, np.full((2, 28), 2.0))
        grids = probabilistic_forecast(median, toy_panel, toy_index, shipped_table)
        assert sorted(grids) == list(range(1, 13))
        for level, grid in grids.items():
            assert grid.is_monotone()
            assert grid.values.shape == (len(toy_index.levels[level]), 28, 9)
        np.testing.assert_array_equal(grids[1].values[:, :, 4], 4.0)

    def test_submission_rows(self, toy_panel, toy_index, shipped_table, tmp_path):
        """15 series x 9 quantiles with '<series>_<u>' ids"""
        median = ForecastGrid(12, toy_index.series_keys, 113, np.full((2, 28), 2.0))
        grids = probabilistic_forecast(median, toy_panel, toy_index, shipped_table)
        frame = assemble_submission(grids)
        assert len(frame) == 135
        assert frame["id"].iloc[0] == "Total_X_0.005"
        assert frame["id"].iloc[8] == "Total_X_0.995"
        assert list(frame.columns) == ["id"] + [f"F{i}" for i in range(1, 29)]

        frame.to_csv(tmp_path / "q.csv", index=False)
        parsed = read_quantile_submission(tmp_path / "q.csv", toy_index)
        np.testing.assert_allclose(parsed[12], grids[12].values)

    def test_submission_rejects_crossing(self, toy_index):
        grids = apply_factors(constant_medians(toy_index), QuantileFactorTable.identity())
        grids[3] = QuantileGrid(3, grids[3].series_keys, 113, grids[3].values * np.arange(9)[::-1])
        with pytest.raises(ValidationError, match="monotone"):
            assemble_submission(grids)

    def test_parse_missing_series(self, toy_index, tmp_path):
        grids = apply_factors(constant_medians(toy_index), QuantileFactorTable.identity())
        frame = assemble_submission(grids)
        frame.iloc[:-1].to_csv(tmp_path / "q.csv", index=False)
        with pytest.raises(MissingSeriesError):
            read_quantile_submission(tmp_path / "q.csv", toy_index)


def test_quantile_levels_are_symmetric():
    assert all(a + b == pytest.approx(1.0) for a, b in zip(QUANTILES, reversed(QUANTILES)))
