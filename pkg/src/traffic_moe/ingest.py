"""Raw data loading and alignment onto the 5-minute daily grid.

Three CSV sources (speed, incident reports, weather) are validated and
aligned spatially by link segment and temporally to a shared TimeGrid whose
time axis is day-major: flat step index = day_index * steps_per_day + step.
Overnight gaps between daily windows are discontinuities; nothing is ever
interpolated across days.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_DAILY_START = time(5, 30)
DEFAULT_DAILY_END = time(20, 59)
DEFAULT_STEP = timedelta(minutes=5)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Per-day lattice of fixed-width time bins, each labeled by its start."""

    days: tuple[date, ...]
    daily_start: time
    daily_end: time
    step: timedelta
    steps_per_day: int

    @property
    def n_days(self) -> int:
        return len(self.days)

    @property
    def total_steps(self) -> int:
        return self.n_days * self.steps_per_day

    def day_index(self, d: date) -> int | None:
        return _day_lookup(self).get(d)

    def flat_index(self, day_idx: int, step_idx: int) -> int:
        return day_idx * self.steps_per_day + step_idx

    def step_start(self, day_idx: int, step_idx: int) -> datetime:
        base = datetime.combine(self.days[day_idx], self.daily_start)
        return base + step_idx * self.step

    def timestamps(self) -> list[datetime]:
        return [self.step_start(d, s)
                for d in range(self.n_days) for s in range(self.steps_per_day)]

    def snap(self, ts: datetime) -> tuple[int, int] | None:
        """Nearest grid cell for a timestamp, or None when off-grid."""
        day_idx = self.day_index(ts.date())
        if day_idx is None:
            return None
        offset = ts - datetime.combine(ts.date(), self.daily_start)
        step_idx = int((offset + self.step / 2) // self.step)
        if 0 <= step_idx < self.steps_per_day:
            return day_idx, step_idx
        return None

    def hour_of_step(self, step_idx: int) -> int:
        return (datetime.combine(self.days[0], self.daily_start)
                + step_idx * self.step).hour

    def describe(self) -> dict:
        return {
            "days": [d.isoformat() for d in self.days],
            "daily_start": self.daily_start.isoformat("minutes"),
            "daily_end": self.daily_end.isoformat("minutes"),
            "step_minutes": int(self.step.total_seconds() // 60),
            "steps_per_day": self.steps_per_day,
        }

    @staticmethod
    def from_description(desc: dict) -> "TimeGrid":
        return build_time_grid(
            [date.fromisoformat(d) for d in desc["days"]],
            daily_start=time.fromisoformat(desc["daily_start"]),
            daily_end=time.fromisoformat(desc["daily_end"]),
            step=timedelta(minutes=desc["step_minutes"]),
        )


@lru_cache(maxsize=32)
def _day_lookup(grid: TimeGrid) -> dict[date, int]:
    return {d: i for i, d in enumerate(grid.days)}


def build_time_grid(days: Sequence[date],
                    daily_start: time = DEFAULT_DAILY_START,
                    daily_end: time = DEFAULT_DAILY_END,
                    step: timedelta = DEFAULT_STEP) -> TimeGrid:
    """Build the daily bin lattice; the window is minute-inclusive at both ends."""
    if not days:
        raise ConfigError("time grid needs at least one day")
    if daily_start >= daily_end:
        raise ConfigError(f"daily_start {daily_start} must precede daily_end {daily_end}")
    step_minutes = step.total_seconds() / 60.0
    if step_minutes <= 0 or step_minutes != int(step_minutes):
        raise ConfigError(f"step must be a positive whole number of minutes, got {step}")
    span_minutes = ((daily_end.hour * 60 + daily_end.minute)
                    - (daily_start.hour * 60 + daily_start.minute) + 1)
    if span_minutes % int(step_minutes) != 0:
        raise ConfigError(
            f"daily window of {span_minutes} min is not a whole number of "
            f"{int(step_minutes)}-min steps")
    ordered = tuple(sorted(days))
    if len(set(ordered)) != len(ordered):
        raise ConfigError("duplicate days in time grid")
    return TimeGrid(days=ordered, daily_start=daily_start, daily_end=daily_end,
                    step=step, steps_per_day=span_minutes // int(step_minutes))


@dataclass(frozen=True)
class LinkGraph:
    """Road links plus the upstream adjacency used for slowdown extraction."""

    links: tuple[str, ...]
    upstream: dict[str, tuple[str, ...]]

    def __post_init__(self):
        known = set(self.links)
        for link, ups in self.upstream.items():
            if link not in known:
                raise ConfigError(f"upstream map references unknown link {link!r}")
            for up in ups:
                if up not in known:
                    raise ConfigError(f"link {link!r} lists unknown upstream {up!r}")
                if up == link:
                    raise ConfigError(f"link {link!r} lists itself as upstream")

    def index(self, link: str) -> int:
        return self.links.index(link)

    def upstream_of(self, link: str) -> tuple[str, ...]:
        return self.upstream.get(link, ())


class IncidentKind(str, Enum):
    ACCIDENT = "accident"
    ROAD_CLOSURE = "road_closure"
    HAZARD_FLOOD = "hazard_flood"
    OTHER = "other"


CRITICAL_KINDS = frozenset({IncidentKind.ACCIDENT, IncidentKind.ROAD_CLOSURE,
                            IncidentKind.HAZARD_FLOOD})


@dataclass(frozen=True)
class IncidentReport:
    id: str
    link_id: str
    kind: IncidentKind
    start_ts: datetime
    end_ts: datetime


@dataclass(frozen=True)
class WeatherRecord:
    ts: datetime
    temperature_f: float
    dew_point_f: float
    humidity_pct: float
    wind_speed_mph: float
    wind_gust_mph: float
    precipitation_in: float
    condition_text: str


@dataclass
class Panel:
    """One variable on the (link x flat time step) lattice."""

    links: tuple[str, ...]
    grid: TimeGrid
    values: np.ndarray
    missing_mask: np.ndarray
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        expected = (len(self.links), self.grid.total_steps)
        if self.values.shape != expected:
            raise ConfigError(f"panel values shape {self.values.shape} != {expected}")
        if self.missing_mask.shape != expected:
            raise ConfigError(f"panel mask shape {self.missing_mask.shape} != {expected}")
        present = ~self.missing_mask
        if not np.all(np.isfinite(self.values[present])):
            raise ConfigError("panel holds non-finite values outside the missing mask")

    def by_day(self, link_idx: int) -> np.ndarray:
        return self.values[link_idx].reshape(self.grid.n_days, self.grid.steps_per_day)


@dataclass
class LoadStats:
    rejected_rows: int = 0
    duplicate_cells: int = 0
    imputed_cells: int = 0
    profile_filled_link_days: int = 0
    dropped_kinds: int = 0
    warnings: list[str] = field(default_factory=list)

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        log.warning(message)


# ---------------------------------------------------------------------------
# speed
# ---------------------------------------------------------------------------

def load_speed(rows: Iterable[tuple], grid: TimeGrid,
               links: LinkGraph) -> tuple[Panel, LoadStats]:
    """Align raw (link_id, timestamp, speed) rows to the grid.

    Duplicates landing in one cell are averaged, interior gaps are linearly
    interpolated within each day, edge gaps take the nearest observation, and
    fully missing link-days fall back to the link's day-of-week median profile.
    The returned panel has no missing values; the mask records imputation.
    """
    stats = LoadStats()
    n_links = len(links.links)
    spd = grid.steps_per_day
    total = grid.total_steps
    sums = np.zeros((n_links, total))
    counts = np.zeros((n_links, total), dtype=np.int64)
    link_idx = {l: i for i, l in enumerate(links.links)}

    for row in rows:
        link_id, ts, speed = row[0], row[1], row[2]
        li = link_idx.get(link_id)
        if li is None:
            stats.rejected_rows += 1
            continue
        snapped = grid.snap(ts)
        if snapped is None:
            stats.rejected_rows += 1
            continue
        flat = grid.flat_index(*snapped)
        sums[li, flat] += float(speed)
        counts[li, flat] += 1

    if stats.rejected_rows:
        stats.warn(f"speed: rejected {stats.rejected_rows} rows "
                   "(unknown link or off-grid timestamp)")
    stats.duplicate_cells = int(np.count_nonzero(counts > 1))

    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    observed = counts > 0
    missing = ~observed

    # in-day interpolation, then nearest-value extension at day edges
    for li in range(n_links):
        day_vals = values[li].reshape(grid.n_days, spd)
        day_obs = observed[li].reshape(grid.n_days, spd)
        for d in range(grid.n_days):
            obs = day_obs[d]
            if not obs.any() or obs.all():
                continue
            idx = np.arange(spd)
            day_vals[d, ~obs] = np.interp(idx[~obs], idx[obs], day_vals[d, obs])

    # fully missing link-days: day-of-week median profile of the same link
    weekdays = np.array([d.weekday() for d in grid.days])
    for li in range(n_links):
        day_vals = values[li].reshape(grid.n_days, spd)
        day_has_data = observed[li].reshape(grid.n_days, spd).any(axis=1)
        if day_has_data.all():
            continue
        filled_days = 0
        for d in np.flatnonzero(~day_has_data):
            same_wd = day_has_data & (weekdays == weekdays[d])
            if same_wd.any():
                profile = np.median(day_vals[same_wd], axis=0)
            elif day_has_data.any():
                profile = np.median(day_vals[day_has_data], axis=0)
            else:
                continue
            day_vals[d] = profile
            filled_days += 1
        if filled_days:
            stats.profile_filled_link_days += filled_days
            stats.warn(f"speed: link {links.links[li]}: {filled_days} fully "
                       "missing days filled with median profiles")

    # links with no data at all: global per-step median across links
    still_missing = ~np.isfinite(values)
    if still_missing.any():
        with np.errstate(all="ignore"):
            global_profile = np.nanmedian(values, axis=0)
        if np.all(np.isfinite(global_profile)):
            rows_missing = still_missing.any(axis=1)
            values[rows_missing] = global_profile
            stats.profile_filled_link_days += int(rows_missing.sum()) * grid.n_days
            stats.warn(f"speed: {int(rows_missing.sum())} links had no data; "
                       "used network median profile")
        else:
            raise ConfigError("speed input is empty; nothing to align")

    stats.imputed_cells = int(missing.sum())
    panel = Panel(links=links.links, grid=grid, values=values, missing_mask=missing)
    return panel, stats


# ---------------------------------------------------------------------------
# incidents
# ---------------------------------------------------------------------------

def load_incidents(rows: Iterable[tuple], grid: TimeGrid, links: LinkGraph,
                   allowed_kinds: frozenset = CRITICAL_KINDS,
                   ) -> tuple[list[IncidentReport], Panel, LoadStats]:
    """Validate report rows and rasterize them to a binary per-link matrix.

    A grid cell is set when the closed report interval [start, end] touches
    the cell's [start, start + step) span; cells outside daily windows simply
    do not exist, which clips overnight reports to the windows.
    """
    stats = LoadStats()
    n_links = len(links.links)
    inc = np.zeros((n_links, grid.total_steps))
    link_idx = {l: i for i, l in enumerate(links.links)}
    reports: list[IncidentReport] = []
    spd = grid.steps_per_day
    step_min = grid.step.total_seconds() / 60.0

    for row in rows:
        rid, link_id, kind_raw, start_ts, end_ts = row[0], row[1], row[2], row[3], row[4]
        li = link_idx.get(link_id)
        if li is None:
            stats.rejected_rows += 1
            continue
        if end_ts < start_ts:
            stats.rejected_rows += 1
            continue
        try:
            kind = IncidentKind(str(kind_raw))
        except ValueError:
            kind = IncidentKind.OTHER
        if kind not in allowed_kinds:
            stats.dropped_kinds += 1
            continue
        report = IncidentReport(id=str(rid), link_id=link_id, kind=kind,
                                start_ts=start_ts, end_ts=end_ts)
        reports.append(report)

        for d in range(grid.n_days):
            day_start = datetime.combine(grid.days[d], grid.daily_start)
            day_last = day_start + (spd - 1) * grid.step
            if end_ts < day_start or start_ts >= day_last + grid.step:
                continue
            lo_min = (start_ts - day_start).total_seconds() / 60.0
            hi_min = (end_ts - day_start).total_seconds() / 60.0
            lo = max(0, int(np.floor(lo_min / step_min)))
            hi = min(spd - 1, int(np.floor(hi_min / step_min)))
            if hi >= lo:
                base = grid.flat_index(d, 0)
                inc[li, base + lo:base + hi + 1] = 1.0

    if stats.rejected_rows:
        stats.warn(f"incidents: rejected {stats.rejected_rows} rows "
                   "(unknown link or end before start)")
    panel = Panel(links=links.links, grid=grid, values=inc,
                  missing_mask=np.zeros_like(inc, dtype=bool))
    return reports, panel, stats


# ---------------------------------------------------------------------------
# weather
# ---------------------------------------------------------------------------

WEATHER_NUMERIC_FIELDS = ("temperature_f", "dew_point_f", "humidity_pct",
                          "wind_speed_mph", "wind_gust_mph", "precipitation_in")
WEATHER_VARIABLES = {
    "temperature": "temperature_f",
    "dew_point": "dew_point_f",
    "humidity": "humidity_pct",
    "wind_speed": "wind_speed_mph",
    "wind_gust": "wind_gust_mph",
    "precipitation": "precipitation_in",
}


def load_weather(records: Iterable[WeatherRecord], grid: TimeGrid,
                 links: LinkGraph) -> tuple[dict[str, Panel], LoadStats]:
    """Spread hourly records onto the grid as step functions, identical per link.

    Each grid step takes the value of the record covering its hour; missing
    hours are forward- then backward-filled along the flattened step sequence.
    """
    stats = LoadStats()
    valid: list[WeatherRecord] = []
    for rec in records:
        if not (0.0 <= rec.humidity_pct <= 100.0) or rec.precipitation_in < 0.0:
            stats.rejected_rows += 1
            continue
        valid.append(rec)
    if stats.rejected_rows:
        stats.warn(f"weather: rejected {stats.rejected_rows} invalid records")

    total = grid.total_steps
    n_links = len(links.links)
    panels: dict[str, Panel] = {}

    if not valid:
        stats.warn("weather: empty input; emitting all-missing panels")
        for name in list(WEATHER_VARIABLES) + ["condition"]:
            values = np.full((n_links, total), np.nan)
            mask = np.ones((n_links, total), dtype=bool)
            cats = ("UNK",) if name == "condition" else None
            panels[name] = Panel(links=links.links, grid=grid, values=values,
                                 missing_mask=mask, categories=cats)
        return panels, stats

    by_hour: dict[datetime, WeatherRecord] = {}
    for rec in sorted(valid, key=lambda r: r.ts):
        by_hour[rec.ts.replace(minute=0, second=0, microsecond=0)] = rec

    hours = [grid.step_start(d, s).replace(minute=0, second=0, microsecond=0)
             for d in range(grid.n_days) for s in range(grid.steps_per_day)]
    step_records: list[WeatherRecord | None] = [by_hour.get(h) for h in hours]
    miss_row = np.array([r is None for r in step_records])

    # forward fill, then backward fill, along the flat step axis
    filled = list(step_records)
    last = None
    for i, r in enumerate(filled):
        if r is not None:
            last = r
        elif last is not None:
            filled[i] = last
    nxt = None
    for i in range(len(filled) - 1, -1, -1):
        if step_records[i] is not None:
            nxt = step_records[i]
        elif filled[i] is None and nxt is not None:
            filled[i] = nxt

    for name, attr in WEATHER_VARIABLES.items():
        row = np.array([getattr(r, attr) for r in filled], dtype=np.float64)
        values = np.tile(row, (n_links, 1))
        mask = np.tile(miss_row, (n_links, 1))
        panels[name] = Panel(links=links.links, grid=grid, values=values,
                             missing_mask=mask)

    cats = tuple(sorted({r.condition_text for r in valid}))
    code = {c: i for i, c in enumerate(cats)}
    row = np.array([code[r.condition_text] for r in filled], dtype=np.float64)
    panels["condition"] = Panel(links=links.links, grid=grid,
                                values=np.tile(row, (n_links, 1)),
                                missing_mask=np.tile(miss_row, (n_links, 1)),
                                categories=cats)
    return panels, stats


# ---------------------------------------------------------------------------
# CSV contracts
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def read_speed_csv(path: str | Path) -> list[tuple[str, datetime, float]]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((rec["link_id"],
                         datetime.fromisoformat(rec["timestamp_iso8601"]),
                         float(rec["speed_mph"])))
    return rows


def write_speed_csv(path: str | Path, rows: Iterable[tuple[str, datetime, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["link_id", "timestamp_iso8601", "speed_mph"])
        for link_id, ts, speed in rows:
            writer.writerow([link_id, ts.isoformat(), _fmt(speed)])


def panel_to_speed_rows(panel: Panel) -> list[tuple[str, datetime, float]]:
    grid = panel.grid
    rows = []
    for li, link in enumerate(panel.links):
        for d in range(grid.n_days):
            for s in range(grid.steps_per_day):
                rows.append((link, grid.step_start(d, s),
                             float(panel.values[li, grid.flat_index(d, s)])))
    return rows


def read_incident_csv(path: str | Path) -> list[tuple[str, str, str, datetime, datetime]]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((rec["id"], rec["link_id"], rec["kind"],
                         datetime.fromisoformat(rec["start_ts"]),
                         datetime.fromisoformat(rec["end_ts"])))
    return rows


def write_incident_csv(path: str | Path,
                       rows: Iterable[tuple[str, str, str, datetime, datetime]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "link_id", "kind", "start_ts", "end_ts"])
        for rid, link_id, kind, start_ts, end_ts in rows:
            writer.writerow([rid, link_id, kind, start_ts.isoformat(), end_ts.isoformat()])


def read_weather_csv(path: str | Path) -> list[WeatherRecord]:
    records = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            records.append(WeatherRecord(
                ts=datetime.fromisoformat(rec["ts"]),
                temperature_f=float(rec["temp_f"]),
                dew_point_f=float(rec["dew_point_f"]),
                humidity_pct=float(rec["humidity"]),
                wind_speed_mph=float(rec["wind_speed_mph"]),
                wind_gust_mph=float(rec["wind_gust_mph"]),
                precipitation_in=float(rec["precip_in"]),
                condition_text=rec["condition"]))
    return records


def write_weather_csv(path: str | Path, records: Iterable[WeatherRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ts", "temp_f", "dew_point_f", "humidity",
                         "wind_speed_mph", "wind_gust_mph", "precip_in", "condition"])
        for r in records:
            writer.writerow([r.ts.isoformat(), _fmt(r.temperature_f),
                             _fmt(r.dew_point_f), _fmt(r.humidity_pct),
                             _fmt(r.wind_speed_mph), _fmt(r.wind_gust_mph),
                             _fmt(r.precipitation_in), r.condition_text])


def read_network_csv(path: str | Path) -> LinkGraph:
    links: list[str] = []
    upstream: dict[str, tuple[str, ...]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            link = rec["link_id"]
            links.append(link)
            ups = rec.get("upstream_ids", "") or ""
            upstream[link] = tuple(u for u in ups.split(";") if u)
    return LinkGraph(links=tuple(links), upstream=upstream)


def write_network_csv(path: str | Path, graph: LinkGraph) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["link_id", "upstream_ids"])
        for link in graph.links:
            writer.writerow([link, ";".join(graph.upstream_of(link))])
