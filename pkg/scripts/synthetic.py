"""
Synthetic M5-shaped data for tests, demos and smoke runs.

Sales are Poisson draws around an item x store rate shaped by a weekly
profile, SNAP days (FOODS only), calendar events, a mild trend and price
elasticity. Every series shares the calendar effects and only the Poisson
draws are independent, so summing series keeps the calendar signal and
averages the noise away. Every store stays open on every event day.
A share of items is released late: they have no price and no
sales before their release week. The calendar always extends 28 days past
the sales so a forecast window exists.
"""

import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from data_ingest import ID_COLUMNS, PanelDataset, SalesWide, build_panel
from settings import HORIZON, SyntheticConfig

logger = logging.getLogger(__name__)

# Configuration
FIRST_WEEK_ID = 11101
WEEKDAYS = ("Saturday", "Sunday", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday")
WEEKLY_PROFILE = np.array([1.30, 1.35, 0.90, 0.85, 0.85, 0.90, 1.00])
SNAP_DAYS = {
    "CA": set(range(1, 11)),
    "TX": {1, 3, 5, 6, 7, 9, 11, 12, 15},
    "WI": {2, 3, 5, 6, 8, 9, 11, 12, 14, 15},
}
SNAP_UPLIFT = 1.15
EVENTS = (
    ("02-07", "SuperBowl", "Sporting"),
    ("02-14", "ValentinesDay", "Cultural"),
    ("03-17", "StPatricksDay", "Cultural"),
    ("04-24", "OrthodoxEaster", "Religious"),
    ("06-05", "NBAFinalsEnd", "Sporting"),
    ("07-04", "IndependenceDay", "National"),
    ("10-31", "Halloween", "Cultural"),
    ("11-24", "Thanksgiving", "National"),
    ("12-25", "Christmas", "National"),
)
SECOND_EVENTS = (("04-24", "Easter", "Cultural"),)
EVENT_UPLIFT = 1.10
PRICE_ELASTICITY = -1.5
DISCOUNT_SHARE = 0.1
DISCOUNT = 0.85


def _hierarchy_frame(config: SyntheticConfig) -> pd.DataFrame:
    rows = []
    for cat, n_depts in config.departments.items():
        for d in range(1, n_depts + 1):
            dept = f"{cat}_{d}"
            for i in range(1, config.items_per_department + 1):
                item = f"{dept}_{i:03d}"
                for state, n_stores in config.stores_per_state.items():
                    for s in range(1, n_stores + 1):
                        rows.append((item, dept, cat, f"{state}_{s}", state))
    return pd.DataFrame(rows, columns=ID_COLUMNS)


def synthetic_calendar(n_days: int, start_date: str) -> pd.DataFrame:
    """Calendar of n_days rows in the M5 layout (date parsed, d_index added)."""
    dates = pd.date_range(start_date, periods=n_days, freq="D")
    offset = np.arange(n_days)
    calendar = pd.DataFrame({
        "date": dates,
        "wm_yr_wk": FIRST_WEEK_ID + offset // 7,
        "weekday": [WEEKDAYS[i % 7] for i in offset],
        "wday": offset % 7 + 1,
        "month": dates.month,
        "year": dates.year,
        "d": [f"d_{i + 1}" for i in offset],
    })
    month_day = dates.strftime("%m-%d")
    for slot, events in ((1, EVENTS), (2, SECOND_EVENTS)):
        lookup = {md: (name, kind) for md, name, kind in events}
        calendar[f"event_name_{slot}"] = [lookup.get(md, (None, None))[0] for md in month_day]
        calendar[f"event_type_{slot}"] = [lookup.get(md, (None, None))[1] for md in month_day]
    for state, days in SNAP_DAYS.items():
        calendar[f"snap_{state}"] = np.isin(dates.day, list(days)).astype(np.int64)
    calendar["d_index"] = offset + 1
    return calendar


def generate_frames(config: SyntheticConfig) -> Tuple[SalesWide, pd.DataFrame, pd.DataFrame]:
    """Sales, calendar and prices in the loaders' output format."""
    rng = np.random.default_rng(config.seed)
    n_days = config.n_days
    n_cal = n_days + HORIZON
    series = _hierarchy_frame(config)
    calendar = synthetic_calendar(n_cal, config.start_date)
    n_series = len(series)
    n_weeks = int(calendar["wm_yr_wk"].nunique())

    items = series["item_id"].unique()
    item_pos = series["item_id"].map({item: i for i, item in enumerate(items)}).to_numpy()
    stores = series["store_id"].unique()
    store_pos = series["store_id"].map({store: i for i, store in enumerate(stores)}).to_numpy()

    # level chosen so a typical series sits near the requested share of zero days
    base = -np.log(config.zero_share)
    item_rate = base * rng.lognormal(0.0, 0.8, len(items))
    store_rate = rng.lognormal(0.0, 0.3, len(stores))
    rate = item_rate[item_pos] * store_rate[store_pos]

    base_price = rng.lognormal(1.0, 0.6, len(items))
    week_factor = np.where(rng.random((len(items), n_weeks)) < DISCOUNT_SHARE, DISCOUNT, 1.0)
    drift = 1.0 + 0.02 * np.arange(n_weeks) / 52.0
    item_week_price = np.round(base_price[:, None] * week_factor * drift[None, :], 2)
    store_jitter = np.round(rng.uniform(-0.05, 0.05, len(stores)), 2)
    week_price = np.maximum(item_week_price[item_pos] + store_jitter[store_pos, None], 0.01)

    release_week = np.zeros(len(items), dtype=int)
    late = rng.random(len(items)) < config.late_release_share
    release_week[late] = rng.integers(int(0.1 * n_weeks), int(0.6 * n_weeks) + 1, late.sum())

    week_of_day = (calendar["wm_yr_wk"] - FIRST_WEEK_ID).to_numpy()[:n_days]
    price_daily = week_price[:, week_of_day]
    active = week_of_day[None, :] >= release_week[item_pos][:, None]

    weekly = WEEKLY_PROFILE[np.arange(n_days) % 7]
    trend = 1.0 + 0.0003 * np.arange(n_days)
    event_names = calendar["event_name_1"].to_numpy()[:n_days]
    events = np.array([EVENT_UPLIFT if isinstance(name, str) else 1.0
                       for name in event_names])
    snap = np.ones((n_series, n_days))
    is_food = (series["cat_id"] == "FOODS").to_numpy()
    for state in SNAP_DAYS:
        rows = is_food & (series["state_id"] == state).to_numpy()
        snap[rows] = np.where(calendar[f"snap_{state}"].to_numpy()[:n_days] == 1, SNAP_UPLIFT, 1.0)
    elasticity = (price_daily / base_price[item_pos][:, None]) ** PRICE_ELASTICITY

    lam = rate[:, None] * (weekly * trend * events)[None, :] * snap * elasticity
    sales = np.where(active, rng.poisson(lam), 0).astype(np.int64)

    day_frame = pd.DataFrame(sales, columns=[f"d_{i}" for i in range(1, n_days + 1)])
    frame = pd.concat([series, day_frame], axis=1)
    wide = SalesWide(frame=frame, n_days=n_days)

    listed = np.arange(n_weeks)[None, :] >= release_week[item_pos][:, None]
    rows, weeks = np.nonzero(listed)
    prices = pd.DataFrame({
        "store_id": series["store_id"].to_numpy()[rows],
        "item_id": series["item_id"].to_numpy()[rows],
        "wm_yr_wk": (FIRST_WEEK_ID + weeks).astype(np.int64),
        "sell_price": week_price[rows, weeks],
    })
    logger.info("Synthetic data: %d series x %d days, %.1f%% zero days, %d late releases",
                n_series, n_days, 100.0 * float((sales[active] == 0).mean()), int(late.sum()))
    return wide, calendar, prices


def generate_panel(config: SyntheticConfig = None) -> PanelDataset:
    wide, calendar, prices = generate_frames(config or SyntheticConfig())
    return build_panel(wide, calendar, prices)


def write_panel(config: SyntheticConfig, directory: Path) -> Dict[str, Path]:
    """Write sales_train.csv, calendar.csv and sell_prices.csv; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    wide, calendar, prices = generate_frames(config)

    sales = wide.frame.copy()
    sales.insert(0, "id", sales["item_id"] + "_" + sales["store_id"] + "_evaluation")
    paths = {
        "sales": directory / "sales_train.csv",
        "calendar": directory / "calendar.csv",
        "prices": directory / "sell_prices.csv",
    }
    sales.to_csv(paths["sales"], index=False)
    calendar.drop(columns=["d_index"]).to_csv(paths["calendar"], index=False, date_format="%Y-%m-%d")
    prices.to_csv(paths["prices"], index=False)
    logger.info("Wrote synthetic M5 files to %s", directory)
    return paths
