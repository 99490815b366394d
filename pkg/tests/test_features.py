"""
Tests for feature engineering

Tests cover:
- Feature roster parsing and validation
- Training matrices (rows, lags, windows, prices, encodings)
- Recursive inference: no reads of forecast days with 28+ lags
- Parquet feature cache hits and tamper detection
"""

import logging

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq
import pytest

from errors import ConfigError, ValidationError
from features import (DEFAULT_FEATURES_PATH, FeatureBuilder, FeatureCache, FeatureSet, ForecastBuffer,
                      assemble_matrix, calendar_features, default_feature_set, lag_features,
                      load_feature_specs, price_features, rolling_features)

SERIES = "FOODS_1_001_CA_1"


@pytest.fixture
def feature_set():
    return default_feature_set()


@pytest.fixture
def builder(toy_panel, feature_set):
    return FeatureBuilder(toy_panel, feature_set, (1, 112))


@pytest.mark.unit
class TestFeatureSet:
    """Test the feature roster"""

    def test_default_roster(self, feature_set):
        """Codes, encodings, price, calendar, 14 lags and 16 window stats"""
        assert len(feature_set.names) == 55
        assert feature_set.names[:2] == ["item_id", "dept_id"]
        assert "te_store_id" in feature_set.names
        assert "lag_29" in feature_set.names and "lag_42" in feature_set.names
        assert "rstd_42_28" in feature_set.names
        assert feature_set.max_lookback == 83

    def test_yaml_matches_default(self, feature_set):
        """The shipped features.yaml is the default roster"""
        loaded = load_feature_specs(DEFAULT_FEATURES_PATH)
        assert loaded.names == feature_set.names
        assert loaded.schema_hash == feature_set.schema_hash

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_feature_specs(tmp_path / "features.yaml")

    def test_invalid_sections(self):
        """Unknown sections, bad snap modes and non-positive lags are config errors"""
        with pytest.raises(ConfigError, match="unknown sections"):
            FeatureSet.from_dict({"lags": {}, "weather": True})
        with pytest.raises(ConfigError, match="snap"):
            FeatureSet.from_dict({"calendar": {"snap": "none"}})
        with pytest.raises(ConfigError, match="positive"):
            FeatureSet.from_dict({"lags": {"offset": 0, "k": [0]}})
        with pytest.raises(ConfigError, match="empty"):
            FeatureSet.from_dict({})

    def test_duplicate_names(self):
        with pytest.raises(ConfigError, match="duplicate"):
            FeatureSet.from_dict({"lags": {"offset": 28, "k": [1], "extra": [29]}})

    def test_unknown_categorical(self):
        with pytest.raises(ConfigError, match="categorical"):
            FeatureSet.from_dict({"categorical": {"codes": ["color"]}})


@pytest.mark.unit
class TestTrainingMatrix:
    """Test training rows and feature values"""

    def test_rows_are_active_series_days(self, panel_factory, feature_set):
        """Days before a series' first priced week produce no rows"""
        sales = np.ones((2, 28), dtype=int)
        sales[1, :14] = 0
        panel = panel_factory(sales, release_weeks=[0, 2])
        matrix = FeatureBuilder(panel, feature_set, (1, 28)).training_matrix(1, 28)
        assert len(matrix) == 28 + 14
        assert matrix.days.min() == 1
        assert matrix.days[matrix.series_index == 1].min() == 15

    def test_lags_and_windows_match_history(self, toy_panel, builder):
        """Lag and rolling columns equal direct slices of the history"""
        matrix = builder.training_matrix(100, 100)
        history = np.asarray(toy_panel.history)
        row = matrix.values[0]
        assert matrix.series_index[0] == 0
        assert row[matrix.columns.index("lag_29")] == history[0, 100 - 29 - 1]
        window = history[0, 100 - 35:100 - 28]
        assert row[matrix.columns.index("rmean_28_7")] == pytest.approx(window.mean())
        assert row[matrix.columns.index("rstd_28_7")] == pytest.approx(window.std())
        assert matrix.target[0] == history[0, 99]

    def test_scalar_helpers_agree(self, toy_panel, builder):
        """Per-series helper functions reproduce the matrix columns"""
        matrix = builder.training_matrix(90, 90)
        row = dict(zip(matrix.columns, matrix.values[0]))
        for name, value in lag_features(toy_panel, SERIES, 90).items():
            assert row[name] == value
        for name, value in rolling_features(toy_panel, SERIES, 90).items():
            assert row[name] == pytest.approx(value)
        for name, value in price_features(toy_panel, SERIES, 90).items():
            assert row[name] == pytest.approx(value)
        calendar = calendar_features(toy_panel.calendar, 90, "CA")
        for name in ("wday", "month", "year", "snap", "snap_TX"):
            assert row[name] == calendar[name]

    def test_missing_history_is_nan(self, builder):
        """Early days lack the 29-day lag"""
        matrix = builder.training_matrix(1, 30)
        lag = matrix.column("lag_29")
        assert np.isnan(lag[matrix.days < 30]).all()
        assert not np.isnan(lag[matrix.days == 30]).any()

    def test_constant_price_stats(self, builder):
        """A constant price has zero spread and one distinct value"""
        matrix = builder.training_matrix(50, 50)
        np.testing.assert_array_equal(matrix.column("price"), [2.0, 3.0])
        np.testing.assert_array_equal(matrix.column("price_std"), [0.0, 0.0])
        np.testing.assert_array_equal(matrix.column("price_n_unique"), [1.0, 1.0])

    def test_codes_and_target_encoding(self, toy_panel, builder):
        """Codes are 1-based over sorted categories; encodings use the fit window only"""
        matrix = builder.training_matrix(10, 10)
        np.testing.assert_array_equal(matrix.column("item_id"), [1.0, 2.0])
        history = np.asarray(toy_panel.history)
        assert matrix.column("te_item_id")[0] == pytest.approx(history[0, :112].mean())
        assert matrix.column("te_store_id")[0] == pytest.approx(history[:, :112].mean())
        assert matrix.categorical["item_id"] == 2

    def test_range_outside_panel(self, builder):
        with pytest.raises(ValidationError):
            builder.training_matrix(100, 141)

    def test_unknown_mode(self, toy_panel, feature_set):
        with pytest.raises(ValueError):
            assemble_matrix(toy_panel, feature_set, (100, 101), mode="direct")
        with pytest.raises(ValueError, match="ForecastBuffer"):
            assemble_matrix(toy_panel, feature_set, (113, 114), mode="recursive-inference")


@pytest.mark.unit
class TestRecursiveInference:
    """Test buffer-based inference matrices"""

    def test_no_buffer_reads_with_28_day_lags(self, toy_panel, feature_set, builder):
        """With every sales feature at least 28 days back, forecasts are never read"""
        buffer = ForecastBuffer(toy_panel, 113)
        matrix = assemble_matrix(toy_panel, feature_set, (113, 140), mode="recursive-inference",
                                 buffer=buffer, builder=builder)
        assert matrix.buffer_reads == 0
        assert len(matrix) == 2 * 28

    def test_short_lag_reads_buffer(self, toy_panel):
        """A 1-day lag reads earlier forecasts and the reads are counted"""
        fs = FeatureSet.from_dict({"lags": {"offset": 0, "k": [1]}})
        builder = FeatureBuilder(toy_panel, fs, (1, 112))
        buffer = ForecastBuffer(toy_panel, 113)
        assert builder.inference_matrix(113, buffer).buffer_reads == 0
        assert builder.inference_matrix(114, buffer).buffer_reads == 2

    def test_recursive_equals_direct(self, toy_panel, builder):
        """Without buffer reads, inference rows equal the training rows for the same day"""
        buffer = ForecastBuffer(toy_panel, 113)
        for day in range(113, 141):
            inference = builder.inference_matrix(day, buffer)
            training = builder.training_matrix(day, day)
            np.testing.assert_array_equal(inference.series_index, training.series_index)
            np.testing.assert_array_equal(inference.values, training.values)

    def test_buffer_hides_future_actuals(self, toy_panel):
        """Days from the forecast start are empty until written"""
        buffer = ForecastBuffer(toy_panel, 113)
        assert np.isnan(buffer.values[:, 112:]).all()
        np.testing.assert_array_equal(buffer.values[:, :112], np.asarray(toy_panel.history)[:, :112])
        buffer.write(113, np.array([1.5, 0.5]))
        np.testing.assert_array_equal(buffer.forecasts()[:, 0], [1.5, 0.5])
        with pytest.raises(ValueError):
            buffer.write(141, np.zeros(2))

    def test_buffer_start_bounds(self, toy_panel):
        with pytest.raises(ValidationError):
            ForecastBuffer(toy_panel, toy_panel.n_days + 2)

    def test_beyond_calendar(self, toy_panel, builder):
        """Inference needs calendar rows for the target day"""
        buffer = ForecastBuffer(toy_panel, toy_panel.n_days + 1)
        with pytest.raises(ValidationError, match="beyond the calendar"):
            builder.inference_matrix(toy_panel.n_calendar_days + 1, buffer)


@pytest.mark.unit
class TestFeatureCache:
    """Test the parquet feature cache"""

    def test_second_build_hits(self, toy_panel, feature_set, tmp_path):
        """A rebuilt builder reads the cached matrix back unchanged"""
        cache = FeatureCache(tmp_path / "cache")
        first = FeatureBuilder(toy_panel, feature_set, (1, 112)).training_matrix(60, 112, cache)
        assert (cache.hits, cache.misses) == (0, 1)
        second = FeatureBuilder(toy_panel, feature_set, (1, 112)).training_matrix(60, 112, cache)
        assert (cache.hits, cache.misses) == (1, 1)
        assert second.columns == first.columns
        np.testing.assert_array_equal(second.values, first.values)
        np.testing.assert_array_equal(second.target, first.target)

    def test_tampered_file_rebuilds(self, toy_panel, feature_set, tmp_path, caplog):
        """A cache file whose content no longer matches its hash is ignored"""
        cache = FeatureCache(tmp_path / "cache")
        builder = FeatureBuilder(toy_panel, feature_set, (1, 112))
        builder.training_matrix(60, 112, cache)
        path = next((tmp_path / "cache").glob("features-*.parquet"))

        table = pq.read_table(path)
        metadata = table.schema.metadata
        i = table.schema.get_field_index("target")
        tampered = table.set_column(i, "target", pa.array(np.zeros(table.num_rows)))
        pq.write_table(tampered.replace_schema_metadata(metadata), path)

        with caplog.at_level(logging.WARNING):
            rebuilt = builder.training_matrix(60, 112, cache)
        assert "content hash" in caplog.text
        assert cache.hits == 0
        assert rebuilt.target.sum() > 0

    def test_unreadable_file_rebuilds(self, toy_panel, feature_set, tmp_path, caplog):
        cache = FeatureCache(tmp_path / "cache")
        builder = FeatureBuilder(toy_panel, feature_set, (1, 112))
        builder.training_matrix(60, 112, cache)
        path = next((tmp_path / "cache").glob("features-*.parquet"))
        path.write_bytes(b"not a parquet file")
        with caplog.at_level(logging.WARNING):
            builder.training_matrix(60, 112, cache)
        assert "unreadable" in caplog.text
        assert cache.misses == 2
