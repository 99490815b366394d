"""
Input parsing for the three M5-format files.

- sales: item_id, dept_id, cat_id, store_id, state_id (+ optional id), d_1..d_N
- calendar: date, wm_yr_wk, weekday, wday, month, year, d, event_name_1,
  event_type_1, event_name_2, event_type_2, snap_CA, snap_TX, snap_WI
- prices: store_id, item_id, wm_yr_wk, sell_price

Every loader validates what it reads and raises ValidationError with file/row
context. build_panel joins the three into an immutable PanelDataset.

Day indices are 1-based (d_1 is day 1).
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import ValidationError
from settings import HORIZON

logger = logging.getLogger(__name__)

# Configuration
ID_COLUMNS = ["item_id", "dept_id", "cat_id", "store_id", "state_id"]
CALENDAR_COLUMNS = [
    "date", "wm_yr_wk", "weekday", "wday", "month", "year", "d",
    "event_name_1", "event_type_1", "event_name_2", "event_type_2",
    "snap_CA", "snap_TX", "snap_WI",
]
SNAP_COLUMNS = ["snap_CA", "snap_TX", "snap_WI"]
EVENT_TYPES = ("Sporting", "Cultural", "National", "Religious")
PRICE_COLUMNS = ["store_id", "item_id", "wm_yr_wk", "sell_price"]
DAY_COLUMN = re.compile(r"^d_(\d+)$")


@dataclass(frozen=True)
class SalesWide:
    """Wide sales table: one row per (item, store), one column per day."""

    frame: pd.DataFrame
    n_days: int

    @property
    def day_columns(self) -> List[str]:
        return [f"d_{i}" for i in range(1, self.n_days + 1)]

    @property
    def series_keys(self) -> List[str]:
        return series_key(self.frame["item_id"], self.frame["store_id"]).tolist()


@dataclass(frozen=True)
class PanelDataset:
    """
    Long-format sales panel plus calendar and price side tables.

    series   -- one row per level-12 series (series_key + id columns), fixed order
    sales    -- long table (series_key, d_index, y) covering active days only
    calendar -- validated calendar (covers at least n_days + 28 days)
    prices   -- validated weekly prices
    first_active -- per series, first day with a recorded price (n_days + 1 or
                    later when the item is not on sale inside the history)
    history  -- dense (n_series, n_days) sales, NaN on inactive days
    price_grid -- dense (n_series, n_calendar_days) sell price, NaN when unpriced
    """

    series: pd.DataFrame
    sales: pd.DataFrame
    calendar: pd.DataFrame
    prices: pd.DataFrame
    n_days: int
    first_active: np.ndarray
    history: np.ndarray
    price_grid: np.ndarray

    @property
    def n_series_level12(self) -> int:
        return len(self.series)

    @property
    def n_calendar_days(self) -> int:
        return len(self.calendar)

    @property
    def series_keys(self) -> List[str]:
        return self.series["series_key"].tolist()

    def sales_matrix(self, fill_inactive: float = 0.0) -> np.ndarray:
        """Dense (n_series, n_days) copy of sales with inactive days filled."""
        out = self.history.copy()
        out[np.isnan(out)] = fill_inactive
        return out

    def active_mask(self, n_days: Optional[int] = None) -> np.ndarray:
        """Boolean (n_series, n_days) mask of active days (day >= first_active)."""
        n_days = self.n_days if n_days is None else n_days
        days = np.arange(1, n_days + 1)
        return days[None, :] >= self.first_active[:, None]

    def truncate(self, last_day: int) -> "PanelDataset":
        """Panel restricted to days 1..last_day (calendar and prices kept)."""
        if not 1 <= last_day <= self.n_days:
            raise ValidationError(f"cannot truncate a {self.n_days}-day panel to {last_day} days")
        history = self.history[:, :last_day].copy()
        history.setflags(write=False)
        sales = self.sales[self.sales["d_index"] <= last_day].reset_index(drop=True)
        return PanelDataset(
            series=self.series,
            sales=sales,
            calendar=self.calendar,
            prices=self.prices,
            n_days=last_day,
            first_active=self.first_active,
            history=history,
            price_grid=self.price_grid,
        )


def series_key(item_ids: pd.Series, store_ids: pd.Series) -> pd.Series:
    return item_ids.astype(str) + "_" + store_ids.astype(str)


def _read_csv(path: Path, **kwargs) -> pd.DataFrame:
    """Read a CSV, turning tokenizer errors into ValidationError with a row number."""
    path = Path(path)
    if not path.exists():
        raise ValidationError("file not found", path=str(path))
    try:
        frame = pd.read_csv(path, **kwargs)
    except pd.errors.EmptyDataError as exc:
        raise ValidationError("file is empty (header row missing)", path=str(path)) from exc
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        row = int(match.group(1)) if match else None
        raise ValidationError(f"malformed row: {exc}", path=str(path), row=row) from exc
    return frame


def _require_columns(frame: pd.DataFrame, required: List[str], path: Path):
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ValidationError(f"missing columns {missing}", path=str(path))


def _first_bad_row(mask: np.ndarray) -> int:
    """File line number (header is line 1) of the first True row in mask."""
    return int(np.flatnonzero(mask)[0]) + 2


def load_sales(path: Path) -> SalesWide:
    """Parse and validate the wide sales file."""
    path = Path(path)
    frame = _read_csv(path, dtype={c: str for c in ID_COLUMNS + ["id"]})
    _require_columns(frame, ID_COLUMNS, path)

    day_cols = [c for c in frame.columns if DAY_COLUMN.match(c)]
    if not day_cols:
        raise ValidationError("header has no d_<n> day columns", path=str(path))
    indices = sorted(int(DAY_COLUMN.match(c).group(1)) for c in day_cols)
    if indices != list(range(1, len(indices) + 1)):
        raise ValidationError("day columns must be d_1..d_N without gaps", path=str(path))
    n_days = len(indices)
    ordered = [f"d_{i}" for i in range(1, n_days + 1)]

    if frame[ID_COLUMNS].isna().any(axis=1).any():
        raise ValidationError("missing id value", path=str(path),
                              row=_first_bad_row(frame[ID_COLUMNS].isna().any(axis=1).to_numpy()))

    values = frame[ordered].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    malformed = np.isnan(values).any(axis=1)
    if malformed.any():
        raise ValidationError("malformed row: non-numeric or missing sales value",
                              path=str(path), row=_first_bad_row(malformed))
    negative = (values < 0).any(axis=1)
    if negative.any():
        raise ValidationError("negative sale", path=str(path), row=_first_bad_row(negative))
    fractional = (values != np.floor(values)).any(axis=1)
    if fractional.any():
        raise ValidationError("non-integral sale", path=str(path), row=_first_bad_row(fractional))

    duplicated = frame.duplicated(subset=["item_id", "store_id"]).to_numpy()
    if duplicated.any():
        raise ValidationError("duplicate (item_id, store_id) pair", path=str(path),
                              row=_first_bad_row(duplicated))

    clean = frame[ID_COLUMNS].copy()
    clean[ordered] = values.astype(np.int64)
    logger.info("Loaded %d sales rows x %d days from %s", len(clean), n_days, path)
    return SalesWide(frame=clean.reset_index(drop=True), n_days=n_days)


def load_calendar(path: Path) -> pd.DataFrame:
    """Parse and validate the calendar; rows come back sorted by d_index."""
    path = Path(path)
    frame = _read_csv(path, dtype={"event_name_1": str, "event_type_1": str,
                                   "event_name_2": str, "event_type_2": str})
    _require_columns(frame, CALENDAR_COLUMNS, path)

    parsed = frame["d"].astype(str).str.extract(DAY_COLUMN)[0]
    if parsed.isna().any():
        raise ValidationError("calendar 'd' values must look like d_<n>", path=str(path),
                              row=_first_bad_row(parsed.isna().to_numpy()))
    frame = frame.assign(d_index=parsed.astype(int))
    frame = frame.sort_values("d_index", kind="mergesort").reset_index(drop=True)

    expected = np.arange(1, len(frame) + 1)
    gaps = frame["d_index"].to_numpy() != expected
    if gaps.any():
        first = int(np.flatnonzero(gaps)[0])
        raise ValidationError(
            f"calendar d_index not contiguous from 1 (expected d_{expected[first]}, "
            f"found d_{frame['d_index'].iloc[first]})", path=str(path))

    for col in ("event_type_1", "event_type_2"):
        present = frame[col].dropna()
        unknown = present[~present.isin(EVENT_TYPES)]
        if len(unknown):
            raise ValidationError(f"unknown event type '{unknown.iloc[0]}' in {col}",
                                  path=str(path), row=int(unknown.index[0]) + 2)

    for col in SNAP_COLUMNS:
        bad = ~frame[col].isin([0, 1])
        if bad.any():
            raise ValidationError(f"{col} must be 0 or 1", path=str(path),
                                  row=_first_bad_row(bad.to_numpy()))

    frame["date"] = pd.to_datetime(frame["date"])
    for col in ["wm_yr_wk", "wday", "month", "year"] + SNAP_COLUMNS:
        frame[col] = frame[col].astype(np.int64)
    return frame


def load_prices(path: Path) -> pd.DataFrame:
    """Parse and validate weekly sell prices."""
    path = Path(path)
    frame = _read_csv(path, dtype={"store_id": str, "item_id": str})
    _require_columns(frame, PRICE_COLUMNS, path)

    price = pd.to_numeric(frame["sell_price"], errors="coerce")
    if price.isna().any():
        raise ValidationError("malformed sell_price", path=str(path),
                              row=_first_bad_row(price.isna().to_numpy()))
    non_positive = (price <= 0).to_numpy()
    if non_positive.any():
        raise ValidationError("sell_price must be > 0", path=str(path),
                              row=_first_bad_row(non_positive))

    duplicated = frame.duplicated(subset=["store_id", "item_id", "wm_yr_wk"]).to_numpy()
    if duplicated.any():
        raise ValidationError("duplicate (store_id, item_id, wm_yr_wk)", path=str(path),
                              row=_first_bad_row(duplicated))

    frame = frame[PRICE_COLUMNS].assign(sell_price=price.astype(float),
                                        wm_yr_wk=frame["wm_yr_wk"].astype(np.int64))
    return frame.reset_index(drop=True)


def load_inputs(sales_path: Path, calendar_path: Path, prices_path: Path,
                jobs: int = 3) -> Tuple[SalesWide, pd.DataFrame, pd.DataFrame]:
    """Parse the three files, concurrently when jobs > 1."""
    if jobs <= 1:
        return load_sales(sales_path), load_calendar(calendar_path), load_prices(prices_path)
    with ThreadPoolExecutor(max_workers=min(jobs, 3)) as pool:
        sales = pool.submit(load_sales, sales_path)
        calendar = pool.submit(load_calendar, calendar_path)
        prices = pool.submit(load_prices, prices_path)
        return sales.result(), calendar.result(), prices.result()


def _price_grid(series: pd.DataFrame, calendar: pd.DataFrame, prices: pd.DataFrame) -> np.ndarray:
    """Dense (n_series, n_calendar_days) price lookup; NaN where no price exists."""
    weeks = np.sort(calendar["wm_yr_wk"].unique())
    week_pos = {w: i for i, w in enumerate(weeks)}
    keyed = prices.assign(series_key=series_key(prices["item_id"], prices["store_id"]))
    row_pos = pd.Series(np.arange(len(series)), index=series["series_key"])
    keyed = keyed[keyed["series_key"].isin(row_pos.index) & keyed["wm_yr_wk"].isin(week_pos)]

    by_week = np.full((len(series), len(weeks)), np.nan)
    rows = row_pos.loc[keyed["series_key"]].to_numpy()
    cols = keyed["wm_yr_wk"].map(week_pos).to_numpy()
    by_week[rows, cols] = keyed["sell_price"].to_numpy()

    day_week = calendar["wm_yr_wk"].map(week_pos).to_numpy()
    return by_week[:, day_week]


def build_panel(sales: SalesWide, calendar: pd.DataFrame, prices: pd.DataFrame) -> PanelDataset:
    """
    Join sales, calendar and prices into a PanelDataset.

    A series is inactive before the first day of its first priced week;
    inactive days are dropped from the long table and hold NaN in history.
    """
    n_days = sales.n_days
    if len(calendar) < n_days + HORIZON:
        raise ValidationError(
            f"calendar covers {len(calendar)} days but sales need {n_days} + {HORIZON} "
            f"(forecast horizon)")

    series = sales.frame[ID_COLUMNS].copy()
    series.insert(0, "series_key", sales.series_keys)
    series = series.reset_index(drop=True)

    price_grid = _price_grid(series, calendar, prices)
    priced = ~np.isnan(price_grid)
    has_price = priced.any(axis=1)
    first_active = np.where(has_price, priced.argmax(axis=1) + 1, len(calendar) + 1).astype(np.int64)

    values = sales.frame[sales.day_columns].to_numpy(dtype=float)
    days = np.arange(1, n_days + 1)
    active = days[None, :] >= first_active[:, None]

    dropped = values[~active].sum()
    if dropped > 0:
        logger.warning("Dropped %d units sold on days before the first priced week", int(dropped))
    unpriced_active = (active & ~priced[:, :n_days]).sum()
    if unpriced_active:
        logger.warning("%d active series-days have no sell price (price features will be missing)",
                       int(unpriced_active))

    history = np.where(active, values, np.nan)

    rows, cols = np.nonzero(active)
    long = pd.DataFrame({
        "series_key": series["series_key"].to_numpy()[rows],
        "d_index": (cols + 1).astype(np.int64),
        "y": values[rows, cols].astype(np.int64),
    })

    history.setflags(write=False)
    price_grid.setflags(write=False)
    first_active.setflags(write=False)
    logger.info("Built panel: %d series, %d days, %d active rows", len(series), n_days, len(long))
    return PanelDataset(
        series=series,
        sales=long,
        calendar=calendar,
        prices=prices,
        n_days=n_days,
        first_active=first_active,
        history=history,
        price_grid=price_grid,
    )


def widen(panel: PanelDataset) -> pd.DataFrame:
    """Re-widen the long table into the SalesWide layout (inactive days as NaN)."""
    wide = panel.sales.pivot(index="series_key", columns="d_index", values="y")
    wide = wide.reindex(index=panel.series["series_key"], columns=range(1, panel.n_days + 1))
    wide.columns = [f"d_{i}" for i in wide.columns]
    return wide.reset_index()
