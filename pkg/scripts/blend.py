"""
Ensembling of model-group forecasts and exponential-smoothing post-processing.

The blend is a weighted geometric mean per cell with two exponent sets:
one for horizon days 1-27 and one for day 28. Zeros are floored at epsilon
before taking logs.
"""

import dataclasses
import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError, MissingSeriesError

logger = logging.getLogger(__name__)

# Configuration
LAST_DAY = 28
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class BlendSpec:
    main: Dict[str, float] = field(hash=False)
    last_day: Dict[str, float] = field(hash=False)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        for branch, weights in (("main", self.main), ("last_day", self.last_day)):
            if any(w < 0 for w in weights.values()):
                raise ConfigError(f"blend.{branch}: exponents must be >= 0")
            if not any(w > 0 for w in weights.values()):
                raise ConfigError(f"blend.{branch}: at least one exponent must be positive")
        if self.epsilon <= 0:
            raise ConfigError("blend.epsilon must be positive")

    @property
    def groups(self) -> List[str]:
        return sorted(set(self.main) | set(self.last_day))

    @property
    def normalizers(self) -> Tuple[float, float]:
        return float(sum(self.main.values())), float(sum(self.last_day.values()))

    @classmethod
    def from_config(cls, config) -> "BlendSpec":
        return cls(main=dict(config.main), last_day=dict(config.last_day), epsilon=config.epsilon)

    def restricted(self, available: Iterable[str]) -> "BlendSpec":
        """Drop groups that are not available (e.g. disabled in the config)."""
        available = set(available)
        dropped = [g for g in self.groups if g not in available]
        if dropped:
            logger.warning("Blend groups %s are not enabled; blending without them", dropped)
        main = {g: w for g, w in self.main.items() if g in available}
        last = {g: w for g, w in self.last_day.items() if g in available}
        if not any(w > 0 for w in main.values()):
            logger.warning("No weighted blend group is enabled; using equal weights over %s", sorted(available))
            main = {g: 1.0 for g in sorted(available)}
        if not any(w > 0 for w in last.values()):
            last = dict(main)
        return BlendSpec(main=main, last_day=last, epsilon=self.epsilon)


def geometric_blend(grids: Mapping[str, object], spec: BlendSpec):
    """
    Weighted geometric mean of the group grids.

    Horizon day 28 uses the ``last_day`` exponents; every other day uses
    ``main``.
    """
    missing = [g for g in spec.groups if g not in grids]
    if missing:
        raise MissingSeriesError(f"no forecast for blend group(s) {missing}")
    reference = grids[spec.groups[0]]
    for name in spec.groups:
        grid = grids[name]
        if list(grid.series_keys) != list(reference.series_keys) or grid.values.shape != reference.values.shape:
            raise ValueError(f"grid for group {name} does not share the series/day index")
        if np.any(grid.values < 0):
            raise ValueError(f"grid for group {name} contains negative forecasts")

    horizon = reference.values.shape[1]
    logs = {name: np.log(np.maximum(grids[name].values, spec.epsilon)) for name in spec.groups}

    def branch(weights: Dict[str, float]) -> np.ndarray:
        total = np.zeros_like(reference.values, dtype=float)
        for name in spec.groups:
            weight = weights.get(name, 0.0)
            if weight:
                total += weight * logs[name]
        return np.exp(total / sum(weights.values()))

    blended = branch(spec.main)
    if horizon >= LAST_DAY:
        blended[:, LAST_DAY - 1] = branch(spec.last_day)[:, LAST_DAY - 1]
    return dataclasses.replace(reference, values=blended)


def exponential_smooth(grid, alpha: float, mode: str = "horizon",
                       history: Optional[np.ndarray] = None):
    """
    Forward simple exponential smoothing per series.

    horizon: s_1 = f_1, s_t = s_{t-1} + alpha * (f_t - s_{t-1})
    history: the recursion starts on the trailing ``history`` columns and
    carries on through the horizon; only horizon values are returned.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    values = np.asarray(grid.values, dtype=float)
    if values.shape[1] == 0:
        raise ValueError("cannot smooth an empty horizon")
    if alpha == 1.0:
        return dataclasses.replace(grid, values=values.copy())

    if mode == "horizon":
        path = values
    elif mode == "history":
        if history is None:
            raise ValueError("history mode needs the trailing history")
        history = np.nan_to_num(np.asarray(history, dtype=float), nan=0.0)
        path = np.hstack([history, values])
    else:
        raise ValueError(f"unknown smoothing mode '{mode}'")

    smoothed = np.empty_like(path)
    smoothed[:, 0] = path[:, 0]
    for t in range(1, path.shape[1]):
        prev = smoothed[:, t - 1]
        smoothed[:, t] = prev + alpha * (path[:, t] - prev)
    return dataclasses.replace(grid, values=smoothed[:, path.shape[1] - values.shape[1]:])


def grid_search_weights(split_grids: Sequence[Mapping[str, object]], score_fn,
                        candidates: Mapping[str, Sequence[float]],
                        base: BlendSpec) -> Tuple[BlendSpec, pd.DataFrame]:
    """
    Try every combination of ``main`` exponents and keep the lowest mean score.

    ``score_fn(split_position, blended_grid)`` returns the split's WRMSSE.
    Day-28 exponents are taken from ``base``.
    """
    names = sorted(candidates)
    rows = []
    best: Optional[Tuple[float, BlendSpec]] = None
    for combo in itertools.product(*(candidates[n] for n in names)):
        if not any(w > 0 for w in combo):
            continue
        spec = BlendSpec(main=dict(zip(names, combo)), last_day=dict(base.last_day), epsilon=base.epsilon)
        scores = [score_fn(i, geometric_blend(grids, spec)) for i, grids in enumerate(split_grids)]
        mean = float(np.mean(scores))
        rows.append({**{f"w_{n}": w for n, w in zip(names, combo)}, "mean_wrmsse": mean})
        if best is None or mean < best[0]:
            best = (mean, spec)
    if best is None:
        raise ConfigError("no candidate blend weights with a positive exponent")
    logger.info("Blend grid search: %d candidates, best mean WRMSSE %.5f", len(rows), best[0])
    return best[1], pd.DataFrame(rows)
