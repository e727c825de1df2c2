"""Sliding-window samples, condition labels, and chronological splits.

Every sample is one link's context window of c steps plus the following h
prediction steps, both inside a single day. A window counts as non-recurrent
exactly when an incident is active somewhere in the network during any
prediction step; an incident that clears before the prediction window leaves
the sample recurrent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, SplitError
from .features import KNOWN_FUTURE, FeatureTensor


class Condition(str, Enum):
    RECURRENT = "recurrent"
    NON_RECURRENT = "non_recurrent"


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ConfigError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


@dataclass
class WindowSlice:
    """One training/inference sample; array views are cut lazily."""

    tensor: FeatureTensor
    link_pos: int
    day: int
    start: int          # in-day step index of the first context step
    c: int
    h: int
    condition: Condition

    @property
    def link_id(self) -> str:
        return self.tensor.links[self.link_pos]

    @property
    def t0(self) -> int:
        """Flat step index of the first prediction step."""
        return self.day * self.tensor.grid.steps_per_day + self.start + self.c

    def _window(self, offset: int, length: int) -> np.ndarray:
        base = self.day * self.tensor.grid.steps_per_day + self.start + offset
        return self.tensor.data[self.link_pos, base:base + length, :]

    @property
    def context(self) -> np.ndarray:
        """(c, |variables|) block over the context window."""
        return self._window(0, self.c)

    @property
    def future_known(self) -> np.ndarray:
        """(h, known-future variables) block over the prediction window."""
        cols = [i for i, v in enumerate(self.tensor.variables)
                if v.kind == KNOWN_FUTURE]
        return self._window(self.c, self.h)[:, cols]

    @property
    def past_target(self) -> np.ndarray:
        return self._window(0, self.c)[:, self.tensor.var_index("speed")]

    @property
    def target(self) -> np.ndarray:
        return self._window(self.c, self.h)[:, self.tensor.var_index("speed")]

    def network_incident_series(self) -> np.ndarray:
        """Network indicator over all c + h steps of this sample."""
        return self._window(0, self.c + self.h)[:, self.tensor.var_index("network_incident")]


def label_condition(network_series: np.ndarray, c: int, h: int) -> Condition:
    """Label a window from its network incident indicator over c + h steps.

    Non-recurrent when any prediction step has an active incident, which also
    covers a context incident persisting past the window boundary; everything
    else, including incidents that end inside the context, is recurrent.
    """
    series = np.asarray(network_series)
    if series.shape[0] != c + h:
        raise ConfigError(f"indicator length {series.shape[0]} != c+h = {c + h}")
    if (series[c:] > 0).any():
        return Condition.NON_RECURRENT
    return Condition.RECURRENT


def slice_windows(tensor: FeatureTensor, c: int, h: int) -> Iterator[WindowSlice]:
    """All in-day windows for every link, step size 1, link-major order."""
    if c <= 0 or h <= 0:
        raise ConfigError(f"window lengths must be positive, got c={c}, h={h}")
    spd = tensor.grid.steps_per_day
    if c + h > spd:
        raise ConfigError(f"c+h = {c + h} exceeds steps per day = {spd}")
    net_col = tensor.var_index("network_incident")
    indicator = tensor.data[0, :, net_col].reshape(tensor.grid.n_days, spd)
    n_starts = spd - (c + h) + 1
    for link_pos in range(len(tensor.links)):
        for day in range(tensor.grid.n_days):
            day_series = indicator[day]
            for start in range(n_starts):
                condition = label_condition(day_series[start:start + c + h], c, h)
                yield WindowSlice(tensor=tensor, link_pos=link_pos, day=day,
                                  start=start, c=c, h=h, condition=condition)


@dataclass
class Splits:
    train: list[WindowSlice]
    val: list[WindowSlice]
    test: list[WindowSlice]
    train_days: int
    val_days: int
    test_days: int

    def as_dict(self) -> dict[str, list[WindowSlice]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split_day_counts(n_days: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Day counts per partition, boundaries rounded to whole days."""
    if n_days < 3:
        raise SplitError(f"need at least 3 days to split, got {n_days}")
    b1 = round(spec.train_frac * n_days)
    b2 = round((spec.train_frac + spec.val_frac) * n_days)
    b1 = min(max(b1, 1), n_days - 2)
    b2 = min(max(b2, b1 + 1), n_days - 1)
    return b1, b2 - b1, n_days - b2


def chronological_split(slices: Iterable[WindowSlice], spec: SplitSpec,
                        n_days: int) -> Splits:
    """Partition by the day holding each slice's prediction window start."""
    train_days, val_days, test_days = split_day_counts(n_days, spec)
    b1 = train_days
    b2 = train_days + val_days
    train: list[WindowSlice] = []
    val: list[WindowSlice] = []
    test: list[WindowSlice] = []
    for s in slices:
        if s.day < b1:
            train.append(s)
        elif s.day < b2:
            val.append(s)
        else:
            test.append(s)
    return Splits(train=train, val=val, test=test, train_days=train_days,
                  val_days=val_days, test_days=test_days)


def by_condition(slices: Sequence[WindowSlice],
                 condition: Condition) -> list[WindowSlice]:
    return [s for s in slices if s.condition == condition]


def split_manifest(splits: Splits, grid_days: Sequence) -> dict:
    def day_span(first: int, count: int) -> list[str]:
        return [grid_days[d].isoformat() for d in range(first, first + count)]

    def counts(slices: Sequence[WindowSlice]) -> dict:
        return {
            "total": len(slices),
            Condition.RECURRENT.value: sum(
                1 for s in slices if s.condition == Condition.RECURRENT),
            Condition.NON_RECURRENT.value: sum(
                1 for s in slices if s.condition == Condition.NON_RECURRENT),
        }

    b1 = splits.train_days
    b2 = splits.train_days + splits.val_days
    return {
        "train_days": day_span(0, splits.train_days),
        "val_days": day_span(b1, splits.val_days),
        "test_days": day_span(b2, splits.test_days),
        "counts": {name: counts(part) for name, part in splits.as_dict().items()},
    }


def write_split_manifest(splits: Splits, grid_days: Sequence,
                         path: str | Path) -> None:
    Path(path).write_text(json.dumps(split_manifest(splits, grid_days),
                                     indent=2, sort_keys=True))
