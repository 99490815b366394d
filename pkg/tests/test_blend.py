"""
Tests for forecast blending and smoothing

Tests cover:
- Weighted geometric mean with the day-28 exponent set
- Zero flooring and group restriction
- Exponential smoothing in horizon and history modes
- Exponent grid search
"""

import logging

import numpy as np
import pytest

from blend import BlendSpec, exponential_smooth, geometric_blend, grid_search_weights
from errors import ConfigError, MissingSeriesError
from forecast import ForecastGrid
from settings import BlendConfig

KEYS = ["FOODS_1_001_CA_1", "FOODS_1_002_CA_1"]
GROUPS = ("lgb_nas", "lgb_cos", "keras_nas", "fastai_cos")


def grid(values, keys=KEYS):
    values = np.asarray(values, dtype=float)
    return ForecastGrid(12, list(keys), 1, values)


def constant_grids(**levels):
    return {name: grid(np.full((2, 28), levels.get(name, 1.0))) for name in GROUPS}


@pytest.fixture
def spec():
    return BlendSpec.from_config(BlendConfig())


@pytest.mark.unit
class TestGeometricBlend:
    """Test the two-branch weighted geometric mean"""

    def test_main_branch_example(self, spec):
        """lgb_nas at 2 and the rest at 1 blend to 2^(3.5/6) on days 1-27"""
        blended = geometric_blend(constant_grids(lgb_nas=2.0), spec)
        np.testing.assert_allclose(blended.values[:, :27], 2 ** (3.5 / 6), rtol=1e-12)
        assert blended.values[0, 0] == pytest.approx(1.4983, abs=1e-4)

    def test_day_28_branch_ignores_zero_exponent(self, spec):
        """The keras group has exponent 0 on day 28, so its value there is irrelevant"""
        grids = constant_grids(lgb_nas=2.0)
        grids["keras_nas"] = grid(np.full((2, 28), 1.0))
        grids["keras_nas"].values[:, 27] = 100.0
        blended = geometric_blend(grids, spec)
        np.testing.assert_allclose(blended.values[:, 27], 2 ** (3.0 / 5), rtol=1e-12)

    def test_identical_inputs_are_fixed_points(self, spec):
        values = np.random.default_rng(0).uniform(0.5, 4.0, size=(2, 28))
        blended = geometric_blend({name: grid(values) for name in GROUPS}, spec)
        np.testing.assert_allclose(blended.values, values, rtol=1e-12)

    def test_zeros_floored(self, spec):
        """A zero in every group blends to epsilon rather than failing on log(0)"""
        blended = geometric_blend(constant_grids(lgb_nas=0.0, lgb_cos=0.0, keras_nas=0.0, fastai_cos=0.0), spec)
        np.testing.assert_allclose(blended.values, 1e-6, rtol=1e-9)

    def test_short_horizon_uses_main_only(self, spec):
        grids = {name: grid(np.full((2, 7), 2.0 if name == "lgb_nas" else 1.0)) for name in GROUPS}
        blended = geometric_blend(grids, spec)
        np.testing.assert_allclose(blended.values, 2 ** (3.5 / 6), rtol=1e-12)

    def test_missing_group(self, spec):
        grids = constant_grids()
        del grids["lgb_cos"]
        with pytest.raises(MissingSeriesError):
            geometric_blend(grids, spec)

    def test_misaligned_grids(self, spec):
        grids = constant_grids()
        grids["lgb_cos"] = grid(np.ones((2, 28)), keys=list(reversed(KEYS)))
        with pytest.raises(ValueError, match="share"):
            geometric_blend(grids, spec)

    def test_negative_forecast_rejected(self, spec):
        grids = constant_grids()
        grids["lgb_cos"].values[0, 0] = -1.0
        with pytest.raises(ValueError, match="negative"):
            geometric_blend(grids, spec)


@pytest.mark.unit
class TestBlendSpec:
    """Test exponent validation and restriction"""

    def test_invalid_exponents(self):
        with pytest.raises(ConfigError):
            BlendSpec(main={"a": -1.0}, last_day={"a": 1.0})
        with pytest.raises(ConfigError):
            BlendSpec(main={"a": 0.0}, last_day={"a": 1.0})
        with pytest.raises(ConfigError):
            BlendSpec(main={"a": 1.0}, last_day={"a": 1.0}, epsilon=0.0)

    def test_restricted_drops_disabled_groups(self, spec, caplog):
        with caplog.at_level(logging.WARNING):
            restricted = spec.restricted(["lgb_nas", "keras_nas"])
        assert restricted.groups == ["keras_nas", "lgb_nas"]
        assert restricted.last_day == {"lgb_nas": 3.0, "keras_nas": 0.0}
        assert "not enabled" in caplog.text

    def test_restricted_without_weights_falls_back_to_equal(self):
        spec = BlendSpec(main={"a": 1.0, "b": 0.0}, last_day={"a": 1.0})
        restricted = spec.restricted(["b"])
        assert restricted.main == {"b": 1.0}
        assert restricted.last_day == {"b": 1.0}


@pytest.mark.unit
class TestSmoothing:
    """Test exponential smoothing"""

    def test_alpha_one_is_identity(self):
        values = np.random.default_rng(1).uniform(0, 5, size=(2, 28))
        np.testing.assert_array_equal(exponential_smooth(grid(values), 1.0).values, values)

    def test_half_alpha_example(self):
        """[1, 2] with alpha 0.5 becomes [1, 1.5]"""
        smoothed = exponential_smooth(grid([[1.0, 2.0], [4.0, 0.0]]), 0.5)
        np.testing.assert_allclose(smoothed.values, [[1.0, 1.5], [4.0, 2.0]])

    def test_history_mode_starts_on_history(self):
        """The recursion seeds on the trailing history; only horizon days come back"""
        smoothed = exponential_smooth(grid([[2.0, 2.0], [1.0, 1.0]]), 0.5, mode="history",
                                      history=np.array([[0.0], [np.nan]]))
        np.testing.assert_allclose(smoothed.values, [[1.0, 1.5], [0.5, 0.75]])

    def test_invalid_arguments(self):
        g = grid(np.ones((2, 3)))
        with pytest.raises(ValueError):
            exponential_smooth(g, 0.0)
        with pytest.raises(ValueError, match="history"):
            exponential_smooth(g, 0.5, mode="history")
        with pytest.raises(ValueError):
            exponential_smooth(g, 0.5, mode="centered")


@pytest.mark.unit
class TestGridSearch:
    """Test exponent grid search"""

    def test_picks_the_group_matching_truth(self, spec):
        """With one group exactly right, the search puts all weight on it"""
        truth = np.full((2, 28), 3.0)
        splits = [{"lgb_nas": grid(truth), "lgb_cos": grid(np.full((2, 28), 1.0))}] * 2
        base = BlendSpec(main={"lgb_nas": 1.0, "lgb_cos": 1.0}, last_day={"lgb_nas": 1.0, "lgb_cos": 0.0})

        def score(_, blended):
            return float(np.sqrt(np.mean((blended.values - truth) ** 2)))

        best, table = grid_search_weights(splits, score, {"lgb_nas": [0.0, 1.0], "lgb_cos": [0.0, 1.0]}, base)
        assert best.main == {"lgb_cos": 0.0, "lgb_nas": 1.0}
        assert len(table) == 3
        assert table["mean_wrmsse"].min() == pytest.approx(0.0)

    def test_no_positive_candidate(self, spec):
        with pytest.raises(ConfigError):
            grid_search_weights([], lambda i, g: 0.0, {"lgb_nas": [0.0]}, spec)
