"""Data sources, baseline forecasters, and per-disturbance data providers.

A DataProvider queries its DataSource for the current value and its
Forecaster for the horizon; uncertainty boxes come from an error spec or,
in simulation, from the smallest box enclosing forecast and truth.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .uncertainty import IntervalBox, forecast_box


class DataError(ValueError):
    pass


class DataSource:
    """Named time-indexed series with integer-step lookup."""

    kind = "abstract"
    cyclic = False

    def __init__(self, series: Mapping[str, Sequence[float]], timestep: float = 1.0):
        self.series = {k: np.asarray(v, float) for k, v in series.items()}
        if not self.series:
            raise DataError("data source needs at least one series")
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) != 1:
            raise DataError("all series must have equal length")
        self.length = lengths.pop()
        if self.length == 0:
            raise DataError("empty series")
        self.timestep = float(timestep)

    def columns(self) -> list[str]:
        return sorted(self.series)

    def get(self, name: str, t: int) -> float:
        if name not in self.series:
            raise DataError(f"unknown column {name!r}; have {self.columns()}")
        if self.cyclic:
            return float(self.series[name][t % self.length])
        if t < 0 or t >= self.length:
            raise DataError(f"index {t} out of range [0, {self.length}) for column {name!r}")
        return float(self.series[name][t])

    def window(self, name: str, t0: int, n: int) -> np.ndarray:
        return np.array([self.get(name, t) for t in range(t0, t0 + n)])


class TableSource(DataSource):
    kind = "table"


class CyclicSource(DataSource):
    kind = "cyclic"
    cyclic = True


class ConstantSource(DataSource):
    kind = "constant"
    cyclic = True

    def __init__(self, values: Mapping[str, float]):
        super().__init__({k: [float(v)] for k, v in values.items()})


def load_table(
    path: Union[str, Path],
    column_map: Optional[Mapping[str, str]] = None,
    timestep: float = 1.0,
    delimiter: str = ",",
) -> TableSource:
    """Load a delimiter-separated table: first column is an ISO-8601 timestamp
    or integer step, remaining columns numeric series. ``column_map`` renames
    file columns to provider names."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        df = pd.read_csv(path, sep=delimiter)
    except Exception as exc:  # parse errors vary by pandas version
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if df.shape[1] < 2:
        raise DataError("table needs an index column plus at least one value column")
    idx = df.iloc[:, 0]
    if idx.dtype == object:
        try:
            stamps = pd.to_datetime(idx, format="ISO8601")
        except (ValueError, TypeError) as exc:
            raise DataError(f"first column is neither integer steps nor ISO-8601 timestamps: {exc}") from exc
        deltas = stamps.diff().dropna().dt.total_seconds().to_numpy() / 3600.0
        if len(deltas) and (np.any(deltas <= 0)):
            raise DataError("timestamps must be strictly increasing")
        if len(deltas) and not np.allclose(deltas, timestep, rtol=0, atol=1e-9):
            raise DataError(f"timestamp spacing has gaps (expected uniform {timestep} h)")
    else:
        steps = idx.to_numpy()
        if np.any(np.diff(steps) != 1):
            raise DataError("integer step index must increase by 1 without gaps")
    series = {}
    for col in df.columns[1:]:
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any():
            raise DataError(f"column {col!r} has non-numeric entries")
        series[str(col)] = vals.to_numpy(float)
    if column_map:
        missing = [src for src in column_map.values() if src not in series]
        if missing:
            raise DataError(f"missing column(s) {missing} in {path.name}")
        series = {dst: series[src] for dst, src in column_map.items()}
    return TableSource(series, timestep)


# ---------------------------------------------------------------------------
# forecasters
# ---------------------------------------------------------------------------


@dataclass
class Forecaster:
    kind: str = "perfect"  # perfect | noisy-smoothed | persistence
    lag: int = 1
    sigma: float = 0.0
    smooth_window: int = 3
    seed: int = 0
    declares_perfect: bool = field(default=False)

    def __post_init__(self) -> None:
        if self.kind not in ("perfect", "noisy-smoothed", "persistence"):
            raise DataError(f"unknown forecaster kind {self.kind!r}")
        if self.kind == "perfect":
            self.declares_perfect = True
        if self.kind == "persistence" and self.lag < 1:
            raise DataError("persistence lag must be >= 1")
        if self.kind == "noisy-smoothed" and self.sigma < 0:
            raise DataError("noise sigma must be >= 0")
        self._noise_cache: dict[str, np.ndarray] = {}

    def _noise(self, column: str, upto: int) -> np.ndarray:
        cached = self._noise_cache.get(column)
        if cached is None or len(cached) < upto:
            n = max(upto, 64)
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(column.encode())]))
            raw = rng.normal(0.0, self.sigma, n)
            w = self.smooth_window
            kernel = np.ones(w) / w
            smooth = np.convolve(raw, kernel, mode="same")
            self._noise_cache[column] = smooth
            cached = smooth
        return cached[:upto]

    def predict(self, source: DataSource, column: str, t: int, horizon: int) -> np.ndarray:
        """Forecast values for steps t+1 .. t+horizon."""
        if self.kind == "perfect":
            return source.window(column, t + 1, horizon)
        if self.kind == "persistence":
            return np.array([source.get(column, t + k - self.lag) for k in range(1, horizon + 1)])
        truth = source.window(column, t + 1, horizon)
        noise = self._noise(column, t + 1 + horizon)[t + 1 : t + 1 + horizon]
        return truth + noise

    def nowcast(self, source: DataSource, column: str, t: int) -> float:
        """Forecast of the value at step t itself (the realized value is not
        available at decision time unless foresight is perfect)."""
        if self.kind == "perfect":
            return source.get(column, t)
        if self.kind == "persistence":
            return source.get(column, t - self.lag)
        return source.get(column, t) + float(self._noise(column, t + 1)[t])


@dataclass
class DataProvider:
    """Binds one disturbance to a source column and a forecaster."""

    source: DataSource
    forecaster: Forecaster
    column: str
    error_spec: Optional[tuple[str, float]] = None  # ("abs", eps) | ("rel", r)
    offset: int = 0  # episode start index into the source

    @property
    def uncertain(self) -> bool:
        return not self.forecaster.declares_perfect

    def current(self, t: int) -> float:
        return self.source.get(self.column, self.offset + t)

    def observe(self, t: int, horizon: int) -> tuple[float, np.ndarray, IntervalBox]:
        """(current value, forecast over [t+1, t+horizon], per-step box)."""
        ts = self.offset + t
        value = self.source.get(self.column, ts)
        fc = self.forecaster.predict(self.source, self.column, ts, horizon)
        if self.forecaster.declares_perfect:
            box = IntervalBox(fc, fc)
        elif self.error_spec is not None:
            box = forecast_box(fc, error_spec=self.error_spec)
        else:
            truth = source_truth = self.source.window(self.column, ts + 1, horizon)
            box = forecast_box(fc, truth=source_truth)
        return value, fc, box

    def series_for_ocp(self, t: int, T: int) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """Nominal series of length T+1 for an OCP at time t and the matching
        (lower, upper) box series.

        Index 0 carries the nowcast, not the realized value: controllers act
        before the step's disturbance realizes, so the current step is only a
        point when foresight is perfect."""
        ts = self.offset + t
        nominal = np.concatenate([[self.forecaster.nowcast(self.source, self.column, ts)],
                                  self.forecaster.predict(self.source, self.column, ts, T)])
        if self.forecaster.declares_perfect:
            return nominal, (nominal.copy(), nominal.copy())
        if self.error_spec is not None:
            box = forecast_box(nominal, error_spec=self.error_spec)
        else:
            truth = self.source.window(self.column, ts, T + 1)
            box = forecast_box(nominal, truth=truth)
        return nominal, (box.lower, box.upper)
