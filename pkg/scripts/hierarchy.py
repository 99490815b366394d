"""
The 12-level aggregation scheme and the dollar-sales series weights.

Level 12 (item x store) is the only level that is ever forecast; every other
level is the plain sum of its level-12 members. Aggregate series ids follow
the M5 submission convention ("Total_X", "CA_X", "CA_FOODS", "FOODS_1_001_CA",
...); level-12 ids are "<item_id>_<store_id>".
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from errors import MissingSeriesError, ValidationError

logger = logging.getLogger(__name__)

# Configuration
N_LEVELS = 12
WEIGHT_WINDOW = 28
FULL_SCALE_COUNTS = (1, 3, 10, 3, 7, 9, 21, 30, 70, 3049, 9147, 30490)


@dataclass(frozen=True)
class LevelSpec:
    level: int
    name: str
    keys: Tuple[str, ...]
    expected_count: int


LEVEL_SPECS: Tuple[LevelSpec, ...] = (
    LevelSpec(1, "Total", (), FULL_SCALE_COUNTS[0]),
    LevelSpec(2, "State", ("state_id",), FULL_SCALE_COUNTS[1]),
    LevelSpec(3, "Store", ("store_id",), FULL_SCALE_COUNTS[2]),
    LevelSpec(4, "Category", ("cat_id",), FULL_SCALE_COUNTS[3]),
    LevelSpec(5, "Department", ("dept_id",), FULL_SCALE_COUNTS[4]),
    LevelSpec(6, "State/Category", ("state_id", "cat_id"), FULL_SCALE_COUNTS[5]),
    LevelSpec(7, "State/Department", ("state_id", "dept_id"), FULL_SCALE_COUNTS[6]),
    LevelSpec(8, "Store/Category", ("store_id", "cat_id"), FULL_SCALE_COUNTS[7]),
    LevelSpec(9, "Store/Department", ("store_id", "dept_id"), FULL_SCALE_COUNTS[8]),
    LevelSpec(10, "Product", ("item_id",), FULL_SCALE_COUNTS[9]),
    LevelSpec(11, "Product/State", ("item_id", "state_id"), FULL_SCALE_COUNTS[10]),
    LevelSpec(12, "Product/Store", ("item_id", "store_id"), FULL_SCALE_COUNTS[11]),
)


@dataclass(frozen=True)
class LevelIndex:
    """Aggregate keys of one level and their level-12 member positions."""

    spec: LevelSpec
    keys: List[str]
    members: List[np.ndarray]
    summing: sparse.csr_matrix

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class HierarchyIndex:
    series_keys: List[str]
    levels: Dict[int, LevelIndex]

    @property
    def total_series(self) -> int:
        return sum(len(lvl) for lvl in self.levels.values())

    def counts(self) -> List[int]:
        return [len(self.levels[lvl]) for lvl in range(1, N_LEVELS + 1)]

    def members_of(self, level: int, key: str) -> List[str]:
        lvl = self.levels[level]
        pos = lvl.keys.index(key)
        return [self.series_keys[i] for i in lvl.members[pos]]

    def iter_series(self) -> Iterator[Tuple[int, str]]:
        """(level, series_id) pairs in canonical order (level 1 first)."""
        for level in range(1, N_LEVELS + 1):
            for key in self.levels[level].keys:
                yield level, key

    def level_of(self) -> Dict[str, int]:
        return {key: level for level, key in self.iter_series()}


def _aggregate_keys(series: pd.DataFrame, keys: Tuple[str, ...]) -> pd.Series:
    if not keys:
        return pd.Series(["Total_X"] * len(series), index=series.index)
    if len(keys) == 1:
        return series[keys[0]].astype(str) + "_X"
    return series[keys[0]].astype(str) + "_" + series[keys[1]].astype(str)


def build_hierarchy(panel) -> HierarchyIndex:
    """
    Materialize all 12 levels from the panel's level-12 series table.

    Accepts a PanelDataset or a bare series table with the id columns.
    """
    series = getattr(panel, "series", panel)
    if series is None or len(series) == 0:
        raise ValidationError("cannot build a hierarchy from an empty panel")

    series = series.reset_index(drop=True)
    series_keys = series["series_key"].tolist()
    n = len(series_keys)
    levels: Dict[int, LevelIndex] = {}
    for spec in LEVEL_SPECS:
        agg_keys = _aggregate_keys(series, spec.keys)
        keys = list(pd.unique(agg_keys))
        pos = {k: i for i, k in enumerate(keys)}
        rows = agg_keys.map(pos).to_numpy()
        summing = sparse.csr_matrix((np.ones(n), (rows, np.arange(n))), shape=(len(keys), n))
        members = [np.flatnonzero(rows == i) for i in range(len(keys))]
        levels[spec.level] = LevelIndex(spec=spec, keys=keys, members=members, summing=summing)

    index = HierarchyIndex(series_keys=series_keys, levels=levels)
    logger.info("Hierarchy built: %d series over 12 levels (%s)", index.total_series,
                ", ".join(str(c) for c in index.counts()))
    return index


def _level12_values(grid, index: HierarchyIndex) -> np.ndarray:
    """Values of a grid (or bare array) reordered to the hierarchy's level-12 order."""
    if isinstance(grid, np.ndarray):
        values = np.asarray(grid, dtype=float)
        if values.shape[0] != len(index.series_keys):
            raise MissingSeriesError(
                f"expected {len(index.series_keys)} level-12 rows, got {values.shape[0]}")
        return values

    keys = list(grid.series_keys)
    if keys == index.series_keys:
        return np.asarray(grid.values, dtype=float)
    pos = {k: i for i, k in enumerate(keys)}
    missing = [k for k in index.series_keys if k not in pos]
    if missing:
        raise MissingSeriesError(f"{len(missing)} level-12 series missing (first: {missing[0]})")
    return np.asarray(grid.values, dtype=float)[[pos[k] for k in index.series_keys]]


def aggregate(grid, index: HierarchyIndex, level: int):
    """
    Sum a level-12 grid up to the requested level.

    ``grid`` is either an ndarray whose rows follow ``index.series_keys`` or a
    ForecastGrid-like object (series_keys, values); the same type comes back.
    """
    if level not in index.levels:
        raise ValueError(f"level must be 1..12, got {level}")
    values = _level12_values(grid, index)
    lvl = index.levels[level]
    agg = values.copy() if level == 12 else np.asarray(lvl.summing @ values)

    if isinstance(grid, np.ndarray):
        return agg
    return dataclasses.replace(grid, level=level, series_keys=list(lvl.keys), values=agg)


def aggregate_all(grid, index: HierarchyIndex) -> Dict[int, object]:
    return {level: aggregate(grid, index, level) for level in range(1, N_LEVELS + 1)}


@dataclass(frozen=True)
class WeightTable:
    """Per-series weights; each level sums to 1/12 so the grand total is 1."""

    index: HierarchyIndex
    weights: Dict[int, np.ndarray]
    last_day: int

    def get(self, level: int, key: str) -> float:
        return float(self.weights[level][self.index.levels[level].keys.index(key)])

    def as_dict(self) -> Dict[Tuple[int, str], float]:
        return {(level, key): float(w)
                for level in range(1, N_LEVELS + 1)
                for key, w in zip(self.index.levels[level].keys, self.weights[level])}

    def total(self) -> float:
        return float(sum(self.weights[level].sum() for level in range(1, N_LEVELS + 1)))

    def to_frame(self) -> pd.DataFrame:
        rows = [(level, key, float(w))
                for level in range(1, N_LEVELS + 1)
                for key, w in zip(self.index.levels[level].keys, self.weights[level])]
        return pd.DataFrame(rows, columns=["level", "series_id", "weight"])

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def dollar_sales(panel, last_day: int) -> np.ndarray:
    """Level-12 dollar sales over the 28 days ending at last_day."""
    if last_day < WEIGHT_WINDOW:
        raise ValidationError(f"weighting window needs last_day >= {WEIGHT_WINDOW}, got {last_day}")
    if last_day > panel.n_days:
        raise ValidationError(f"last_day {last_day} is beyond the panel's {panel.n_days} days")

    start = last_day - WEIGHT_WINDOW  # zero-based column of day last_day - 27
    units = panel.history[:, start:last_day]
    units = np.where(np.isnan(units), 0.0, units)
    price = panel.price_grid[:, start:last_day]

    unpriced = (units > 0) & np.isnan(price)
    if unpriced.any():
        row, col = np.argwhere(unpriced)[0]
        raise ValidationError(
            f"missing sell price for {panel.series_keys[row]} on d_{start + col + 1} "
            f"inside the weighting window")
    return np.where(units > 0, units * np.nan_to_num(price), 0.0).sum(axis=1)


def compute_weights(panel, index: HierarchyIndex, last_day: int) -> WeightTable:
    """
    Dollar-sales weights for every series of every level.

    Weights are computed once per evaluation window and never updated.
    """
    if list(panel.series_keys) != index.series_keys:
        raise MissingSeriesError("panel and hierarchy disagree on level-12 series order")
    level12 = dollar_sales(panel, last_day)
    if level12.sum() <= 0:
        raise ValidationError(f"no dollar sales in the 28 days ending d_{last_day}")

    weights: Dict[int, np.ndarray] = {}
    for level in range(1, N_LEVELS + 1):
        dollars = aggregate(level12[:, None], index, level)[:, 0]
        weights[level] = dollars / dollars.sum() / N_LEVELS
    return WeightTable(index=index, weights=weights, last_day=last_day)
