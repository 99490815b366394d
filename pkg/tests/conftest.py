"""
Pytest configuration and shared fixtures

This file provides:
- Import path setup for the flat scripts/ modules
- Panel builders (toy hierarchy, small synthetic panel)
- M5-format input files and a fast pipeline config for CLI tests
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

# Add scripts/ to path so tests import modules by bare name
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "scripts"))

from data_ingest import ID_COLUMNS, SalesWide, build_panel  # noqa: E402
from hierarchy import build_hierarchy  # noqa: E402
from settings import HORIZON, SyntheticConfig  # noqa: E402
from synthetic import FIRST_WEEK_ID, generate_panel, synthetic_calendar, write_panel  # noqa: E402

import pandas as pd  # noqa: E402


def make_panel(sales, series=None, prices=None, release_weeks=None):
    """
    Build a PanelDataset from a (n_series, n_days) sales array.

    ``series`` rows are (item_id, dept_id, cat_id, store_id, state_id); the
    default is the two-item, one-store toy hierarchy. Every series is priced
    from its release week (default week 0) at ``prices[i]`` (default 2.0).
    """
    sales = np.asarray(sales, dtype=np.int64)
    n_series, n_days = sales.shape
    if series is None:
        series = [("FOODS_1_001", "FOODS_1", "FOODS", "CA_1", "CA"),
                  ("FOODS_1_002", "FOODS_1", "FOODS", "CA_1", "CA")][:n_series]
    prices = [2.0] * n_series if prices is None else list(prices)
    release_weeks = [0] * n_series if release_weeks is None else list(release_weeks)

    frame = pd.DataFrame(series, columns=ID_COLUMNS)
    days = pd.DataFrame(sales, columns=[f"d_{i}" for i in range(1, n_days + 1)])
    wide = SalesWide(frame=pd.concat([frame, days], axis=1), n_days=n_days)

    calendar = synthetic_calendar(n_days + HORIZON, "2011-01-29")
    n_weeks = int(calendar["wm_yr_wk"].nunique())
    rows = []
    for i, (item, _, _, store, _) in enumerate(series):
        for w in range(release_weeks[i], n_weeks):
            rows.append((store, item, FIRST_WEEK_ID + w, float(prices[i])))
    price_frame = pd.DataFrame(rows, columns=["store_id", "item_id", "wm_yr_wk", "sell_price"])
    return build_panel(wide, calendar, price_frame)


@pytest.fixture
def panel_factory():
    """Fixture providing the make_panel builder"""
    return make_panel


@pytest.fixture
def toy_panel():
    """Two items in one store: a 15-series hierarchy over 140 days"""
    rng = np.random.default_rng(0)
    sales = rng.poisson([[3.0], [1.5]], size=(2, 140))
    return make_panel(sales, prices=[2.0, 3.0])


@pytest.fixture
def toy_index(toy_panel):
    return build_hierarchy(toy_panel)


SMALL_SYNTHETIC = SyntheticConfig(
    seed=11,
    n_days=400,
    stores_per_state={"CA": 1, "TX": 1},
    departments={"FOODS": 1, "HOBBIES": 1},
    items_per_department=4,
    late_release_share=0.15,
)


@pytest.fixture(scope="session")
def synthetic_panel():
    """16-series synthetic panel (8 items x 2 stores, 400 days)"""
    return generate_panel(SMALL_SYNTHETIC)


@pytest.fixture(scope="session")
def synthetic_index(synthetic_panel):
    return build_hierarchy(synthetic_panel)


@pytest.fixture
def m5_files(tmp_path):
    """Small synthetic dataset written as the three M5 CSV files"""
    return write_panel(SMALL_SYNTHETIC, tmp_path / "data")


FAST_GROUPS = {
    "lgb_cos": {
        "kind": "gbdt",
        "params": {"learning_rate": 0.2, "num_leaves": 7, "min_data_in_leaf": 20,
                   "max_bin": 16, "n_estimators": 5},
    },
    "lgb_nas": {
        "kind": "gbdt_per_store",
        "params": {"learning_rate": 0.2, "num_leaves": 5, "min_data_in_leaf": 20,
                   "max_bin": 16, "n_estimators": 4},
        "per_store_estimators": {"CA_1": 3, "TX_1": 5},
    },
    "keras_nas": {
        "kind": "mlp",
        "window_days": 112,
        "params": {"objective": "squared_error", "hidden": [8], "epochs": 2,
                   "snapshots_to_keep": 2, "batch_size": 256},
        "presets": [{"hidden": [8]}, {"hidden": [6], "rng_seed": 3}],
    },
    "fastai_cos": {
        "kind": "mlp",
        "params": {"objective": "tweedie", "hidden": [8], "epochs": 1,
                   "snapshots_to_keep": 1, "batch_size": 256, "learning_rate": 0.005},
    },
}


@pytest.fixture
def fast_config_dict(m5_files, tmp_path):
    """Raw pipeline config that trains all four groups in seconds"""
    return {
        "data": {"sales": str(m5_files["sales"]), "calendar": str(m5_files["calendar"]),
                 "prices": str(m5_files["prices"])},
        "features_path": str(project_root / "config" / "features.yaml"),
        "groups": FAST_GROUPS,
        "uncertainty": {"factor_path": str(project_root / "config" / "quantile_factors.csv")},
        "splits": {"use": [1, 2]},
        "output_dir": str(tmp_path / "runs"),
    }


@pytest.fixture
def fast_config_file(fast_config_dict, tmp_path):
    path = tmp_path / "pipeline.yaml"
    path.write_text(yaml.safe_dump(fast_config_dict), encoding="utf-8")
    return path
