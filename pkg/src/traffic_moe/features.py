"""Model-ready features: slowdown speed, incident denoising, and assembly.

The denoiser turns the reported-incident matrix of one link into a cleaned
indicator by cross-checking reports against abnormal slowdown, iteratively
retuning the anomaly share ``n`` until the removal and addition fractions fit
their thresholds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError
from .ingest import LinkGraph, Panel, TimeGrid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# slowdown speed
# ---------------------------------------------------------------------------

def slowdown_speed(speed: Panel, graph: LinkGraph) -> Panel:
    """Positive gap between the mean upstream speed and the link's own speed.

    Links without upstream neighbors get an all-zero row.
    """
    if speed.links != graph.links:
        raise AlignmentError("speed panel and link graph disagree on links")
    idx = {link: i for i, link in enumerate(graph.links)}
    sd = np.zeros_like(speed.values)
    for li, link in enumerate(graph.links):
        ups = graph.upstream_of(link)
        if not ups:
            continue
        upstream_mean = speed.values[[idx[u] for u in ups]].mean(axis=0)
        sd[li] = np.maximum(upstream_mean - speed.values[li], 0.0)
    return Panel(links=speed.links, grid=speed.grid, values=sd,
                 missing_mask=np.zeros_like(sd, dtype=bool))


# ---------------------------------------------------------------------------
# incident denoising
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiseParams:
    n_init: float = 5.0      # top-n% share that counts as abnormal slowdown
    alpha: float = 0.5       # per-iteration adjustment of n, in percent points
    theta1: float = 0.5      # max tolerated removal fraction
    theta2: float = 0.2      # max tolerated addition fraction
    theta_t: int = 2         # min run length (steps) for an added anomaly
    max_iters: int = 50

    def __post_init__(self):
        if not 0.0 < self.n_init < 100.0:
            raise ConfigError(f"n_init must lie in (0, 100), got {self.n_init}")
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        for name in ("theta1", "theta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.theta_t < 1:
            raise ConfigError(f"theta_t must be >= 1 step, got {self.theta_t}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class DenoiseAudit:
    iterations: int
    final_n: float
    rm_pct: float
    add_pct: float
    theta_sd: float

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "final_n": self.final_n,
                "rm_pct": self.rm_pct, "add_pct": self.add_pct,
                "theta_sd": self.theta_sd}


class InfeasibleThresholds(RuntimeError):
    """Both the removal and addition fractions exceed their thresholds."""

    def __init__(self, rm_pct: float, add_pct: float, partial_dii: np.ndarray):
        super().__init__(
            f"thresholds infeasible: removal fraction {rm_pct:.4f} and "
            f"addition fraction {add_pct:.4f} both exceed their limits")
        self.rm_pct = rm_pct
        self.add_pct = add_pct
        self.partial_dii = partial_dii


class NonConvergentError(RuntimeError):
    """The denoising loop exhausted max_iters without satisfying thresholds."""

    def __init__(self, iterations: int, rm_pct: float, add_pct: float):
        super().__init__(f"denoiser did not converge after {iterations} iterations "
                         f"(rm%={rm_pct:.4f}, add%={add_pct:.4f})")
        self.iterations = iterations
        self.rm_pct = rm_pct
        self.add_pct = add_pct


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index pairs of contiguous True runs."""
    padded = np.diff(np.concatenate(([0], row.astype(np.int8), [0])))
    starts = np.flatnonzero(padded == 1)
    ends = np.flatnonzero(padded == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _drop_short_runs(mask: np.ndarray, min_len: int) -> np.ndarray:
    if min_len <= 1:
        return mask.copy()
    out = mask.copy()
    for d in range(mask.shape[0]):
        for lo, hi in _runs(mask[d]):
            if hi - lo + 1 < min_len:
                out[d, lo:hi + 1] = False
    return out


def denoise_incidents(inc: np.ndarray, sd: np.ndarray,
                      params: DenoiseParams) -> tuple[np.ndarray, DenoiseAudit]:
    """Denoise one link's (days x steps-per-day) report matrix.

    Each pass thresholds slowdown at the (100 - n)-th percentile (strict
    comparison, and a zero threshold flags nothing), keeps the reported
    intervals containing at least one abnormal cell, and measures the removal
    and addition fractions. ``n`` moves by +/- alpha until both fractions fit,
    both overflow (infeasible), or max_iters runs out. Added anomaly runs
    shorter than theta_t steps are discarded before the final combination.
    """
    inc = np.asarray(inc, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if inc.shape != sd.shape or inc.ndim != 2:
        raise AlignmentError(f"matrix shapes differ: {inc.shape} vs {sd.shape}")
    if not np.isin(inc, (0.0, 1.0)).all():
        raise ConfigError("report matrix must be binary")
    if (sd < 0).any():
        raise ConfigError("slowdown matrix must be non-negative")

    intervals = [(d, lo, hi) for d in range(inc.shape[0])
                 for lo, hi in _runs(inc[d] > 0)]
    total_reported = inc.sum()
    vec = sd.ravel()
    n = float(params.n_init)
    rm_pct = 0.0
    add_pct = 0.0

    for iteration in range(1, params.max_iters + 1):
        theta_sd = float(np.percentile(vec, 100.0 - n))
        asd = (sd > theta_sd) & (theta_sd > 0.0)

        sir = np.zeros_like(inc)
        for d, lo, hi in intervals:
            if asd[d, lo:hi + 1].any():
                sir[d, lo:hi + 1] = 1.0

        add_mask = asd & (sir == 0.0)
        if total_reported == 0:
            dii = _drop_short_runs(add_mask, params.theta_t).astype(np.float64)
            return dii, DenoiseAudit(iterations=iteration, final_n=n,
                                     rm_pct=0.0, add_pct=0.0, theta_sd=theta_sd)

        rm_pct = 1.0 - sir.sum() / total_reported
        add_pct = add_mask.sum() / total_reported

        if rm_pct > params.theta1 and add_pct <= params.theta2:
            n = min(n + params.alpha, 100.0)
        elif rm_pct <= params.theta1 and add_pct > params.theta2:
            n = max(n - params.alpha, 0.0)
        elif rm_pct <= params.theta1 and add_pct <= params.theta2:
            add_kept = _drop_short_runs(add_mask, params.theta_t)
            dii = np.clip(sir + add_kept, 0.0, 1.0)
            return dii, DenoiseAudit(iterations=iteration, final_n=n,
                                     rm_pct=rm_pct, add_pct=add_pct,
                                     theta_sd=theta_sd)
        else:
            add_kept = _drop_short_runs(add_mask, params.theta_t)
            partial = np.clip(sir + add_kept, 0.0, 1.0)
            raise InfeasibleThresholds(rm_pct, add_pct, partial)

    raise NonConvergentError(params.max_iters, rm_pct, add_pct)


def denoise_panel(inc: Panel, sd: Panel, params: DenoiseParams,
                  ) -> tuple[Panel, dict[str, DenoiseAudit]]:
    """Run the denoiser link by link over aligned report/slowdown panels."""
    if inc.links != sd.links or inc.grid != sd.grid:
        raise AlignmentError("incident and slowdown panels are not aligned")
    grid = inc.grid
    dii = np.zeros_like(inc.values)
    audits: dict[str, DenoiseAudit] = {}
    for li, link in enumerate(inc.links):
        shape = (grid.n_days, grid.steps_per_day)
        cleaned, audit = denoise_incidents(inc.values[li].reshape(shape),
                                           sd.values[li].reshape(shape), params)
        dii[li] = cleaned.ravel()
        audits[link] = audit
    panel = Panel(links=inc.links, grid=grid, values=dii,
                  missing_mask=np.zeros_like(dii, dtype=bool))
    return panel, audits


def save_audits(audits: Mapping[str, DenoiseAudit], path: str | Path) -> None:
    payload = {link: audit.to_dict() for link, audit in sorted(audits.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# incident features
# ---------------------------------------------------------------------------

def incident_features(dii: Panel) -> tuple[Panel, Panel, Panel]:
    """Per-link indicator, network-wide indicator, and distinct-link count."""
    active = dii.values > 0
    network_row = active.any(axis=0).astype(np.float64)
    count_row = active.sum(axis=0).astype(np.float64)
    n_links = len(dii.links)

    def broadcast(row):
        return Panel(links=dii.links, grid=dii.grid,
                     values=np.tile(row, (n_links, 1)),
                     missing_mask=np.zeros((n_links, row.size), dtype=bool))

    segment = Panel(links=dii.links, grid=dii.grid,
                    values=dii.values.astype(np.float64),
                    missing_mask=np.zeros_like(dii.values, dtype=bool))
    return segment, broadcast(network_row), broadcast(count_row)


# ---------------------------------------------------------------------------
# time features
# ---------------------------------------------------------------------------

def time_features(grid: TimeGrid, holiday_dates: Iterable[date],
                  links: Sequence[str]) -> dict[str, Panel]:
    """Cyclic encodings of hour/day-of-week/month plus the holiday flag."""
    holidays = set(holiday_dates)
    spd = grid.steps_per_day
    hour_idx = np.array([grid.hour_of_step(s) for s in range(spd)], dtype=np.float64)
    hours = np.tile(hour_idx, grid.n_days)
    weekday = np.repeat([d.weekday() for d in grid.days], spd).astype(np.float64)
    month = np.repeat([d.month - 1 for d in grid.days], spd).astype(np.float64)
    holiday = np.repeat([1.0 if d in holidays else 0.0 for d in grid.days], spd)

    rows = {
        "hour_sin": np.sin(2 * np.pi * hours / 24.0),
        "hour_cos": np.cos(2 * np.pi * hours / 24.0),
        "day_of_week_sin": np.sin(2 * np.pi * weekday / 7.0),
        "day_of_week_cos": np.cos(2 * np.pi * weekday / 7.0),
        "month_sin": np.sin(2 * np.pi * month / 12.0),
        "month_cos": np.cos(2 * np.pi * month / 12.0),
        "holiday": holiday,
    }
    n_links = len(links)
    return {name: Panel(links=tuple(links), grid=grid,
                        values=np.tile(row, (n_links, 1)),
                        missing_mask=np.zeros((n_links, row.size), dtype=bool))
            for name, row in rows.items()}


# ---------------------------------------------------------------------------
# feature tensor
# ---------------------------------------------------------------------------

OBSERVED_PAST = "observed_past"
KNOWN_FUTURE = "known_future"

UNK_CATEGORY = "UNK"


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str                      # observed_past | known_future
    dtype: str                     # numeric | binary | categorical
    scaled: bool = False
    mean: float = 0.0
    std: float = 1.0
    vocab: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "dtype": self.dtype,
               "scaled": self.scaled, "mean": self.mean, "std": self.std}
        if self.vocab is not None:
            out["vocab"] = list(self.vocab)
        return out

    @staticmethod
    def from_dict(d: dict) -> "VariableSpec":
        return VariableSpec(name=d["name"], kind=d["kind"], dtype=d["dtype"],
                            scaled=d["scaled"], mean=d["mean"], std=d["std"],
                            vocab=tuple(d["vocab"]) if "vocab" in d else None)


@dataclass
class FeatureTensor:
    """Aligned (link x step x variable) array plus per-variable metadata."""

    links: tuple[str, ...]
    grid: TimeGrid
    variables: tuple[VariableSpec, ...]
    data: np.ndarray
    train_days: int

    def __post_init__(self):
        expected = (len(self.links), self.grid.total_steps, len(self.variables))
        if self.data.shape != expected:
            raise ConfigError(f"feature data shape {self.data.shape} != {expected}")

    def var_index(self, name: str) -> int:
        for i, spec in enumerate(self.variables):
            if spec.name == name:
                return i
        raise KeyError(name)

    def var(self, name: str) -> VariableSpec:
        return self.variables[self.var_index(name)]

    def names(self, kind: str | None = None) -> list[str]:
        return [v.name for v in self.variables if kind is None or v.kind == kind]

    @property
    def target_mean(self) -> float:
        return self.var("speed").mean

    @property
    def target_std(self) -> float:
        return self.var("speed").std

    def destandardize_target(self, z: np.ndarray) -> np.ndarray:
        return z * self.target_std + self.target_mean

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "links": list(self.links),
            "grid": self.grid.describe(),
            "train_days": self.train_days,
            "variables": [v.to_dict() for v in self.variables],
        }
        (directory / "variables.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True))
        for i, spec in enumerate(self.variables):
            np.save(directory / f"var_{spec.name}.npy", self.data[:, :, i])

    @staticmethod
    def load(directory: str | Path) -> "FeatureTensor":
        directory = Path(directory)
        meta = json.loads((directory / "variables.json").read_text())
        variables = tuple(VariableSpec.from_dict(d) for d in meta["variables"])
        grid = TimeGrid.from_description(meta["grid"])
        mats = [np.load(directory / f"var_{v.name}.npy") for v in variables]
        data = np.stack(mats, axis=-1)
        return FeatureTensor(links=tuple(meta["links"]), grid=grid,
                             variables=variables, data=data,
                             train_days=meta["train_days"])


def assemble_features(speed: Panel, slowdown: Panel,
                      incident_panels: tuple[Panel, Panel, Panel],
                      time_panels: Mapping[str, Panel],
                      weather_panels: Mapping[str, Panel],
                      train_days: int) -> FeatureTensor:
    """Stack every feature into one tensor, standardized on the train days.

    Plain numeric features get train-split z-scoring (sigma fallback 1 when
    degenerate); binary and cyclic features stay raw; the weather condition is
    re-coded against a train-split vocabulary with index 0 reserved for
    unseen categories.
    """
    segment, network, count = incident_panels
    panels: dict[str, Panel] = {
        "speed": speed, "slowdown": slowdown,
        "temperature": weather_panels["temperature"],
        "dew_point": weather_panels["dew_point"],
        "humidity": weather_panels["humidity"],
        "wind_speed": weather_panels["wind_speed"],
        "wind_gust": weather_panels["wind_gust"],
        "precipitation": weather_panels["precipitation"],
        "condition": weather_panels["condition"],
        "hour_sin": time_panels["hour_sin"],
        "hour_cos": time_panels["hour_cos"],
        "day_of_week_sin": time_panels["day_of_week_sin"],
        "day_of_week_cos": time_panels["day_of_week_cos"],
        "month_sin": time_panels["month_sin"],
        "month_cos": time_panels["month_cos"],
        "holiday": time_panels["holiday"],
        "link_incident": segment,
        "network_incident": network,
        "incident_count": count,
    }
    grid = speed.grid
    links = speed.links
    for name, panel in panels.items():
        if panel.grid != grid or panel.links != links:
            raise AlignmentError(f"panel {name!r} is not aligned with the speed panel")
    if not 1 <= train_days <= grid.n_days:
        raise ConfigError(f"train_days {train_days} outside 1..{grid.n_days}")
    train_steps = train_days * grid.steps_per_day

    plan = [
        ("speed", OBSERVED_PAST, "numeric", True),
        ("slowdown", OBSERVED_PAST, "numeric", True),
        ("temperature", OBSERVED_PAST, "numeric", True),
        ("dew_point", OBSERVED_PAST, "numeric", True),
        ("humidity", OBSERVED_PAST, "numeric", True),
        ("wind_speed", OBSERVED_PAST, "numeric", True),
        ("wind_gust", OBSERVED_PAST, "numeric", True),
        ("precipitation", OBSERVED_PAST, "numeric", True),
        ("condition", OBSERVED_PAST, "categorical", False),
        ("hour_sin", KNOWN_FUTURE, "numeric", False),
        ("hour_cos", KNOWN_FUTURE, "numeric", False),
        ("day_of_week_sin", KNOWN_FUTURE, "numeric", False),
        ("day_of_week_cos", KNOWN_FUTURE, "numeric", False),
        ("month_sin", KNOWN_FUTURE, "numeric", False),
        ("month_cos", KNOWN_FUTURE, "numeric", False),
        ("holiday", KNOWN_FUTURE, "binary", False),
        ("link_incident", KNOWN_FUTURE, "binary", False),
        ("network_incident", KNOWN_FUTURE, "binary", False),
        ("incident_count", KNOWN_FUTURE, "numeric", True),
    ]

    specs: list[VariableSpec] = []
    columns: list[np.ndarray] = []
    for name, kind, dtype, scaled in plan:
        panel = panels[name]
        values = panel.values.astype(np.float64, copy=True)
        if dtype == "categorical":
            vocab_src = panel.categories or ()
            train_codes = values[:, :train_steps]
            if panel.missing_mask.all():
                log.warning("feature %r fully missing; substituting UNK", name)
                seen: set[int] = set()
            else:
                seen = {int(c) for c in np.unique(train_codes) if np.isfinite(c)}
            train_vocab = tuple(sorted(vocab_src[i] for i in seen
                                       if 0 <= i < len(vocab_src)))
            vocab = (UNK_CATEGORY,) + train_vocab
            remap = {vocab_src.index(cat): j + 1 for j, cat in enumerate(train_vocab)}
            recoded = np.zeros_like(values)
            finite = np.isfinite(values)
            for old, new in remap.items():
                recoded[finite & (values == old)] = new
            specs.append(VariableSpec(name=name, kind=kind, dtype=dtype,
                                      vocab=vocab))
            columns.append(recoded)
            continue
        if panel.missing_mask.all():
            log.warning("feature %r fully missing; substituting neutral zeros", name)
            values = np.zeros_like(values)
        if scaled:
            mu = float(values[:, :train_steps].mean())
            sigma = float(values[:, :train_steps].std())
            if sigma < 1e-12:
                sigma = 1.0
            values = (values - mu) / sigma
            specs.append(VariableSpec(name=name, kind=kind, dtype=dtype,
                                      scaled=True, mean=mu, std=sigma))
        else:
            specs.append(VariableSpec(name=name, kind=kind, dtype=dtype))
        columns.append(values)

    data = np.stack(columns, axis=-1)
    tensor = FeatureTensor(links=links, grid=grid, variables=tuple(specs),
                           data=data, train_days=train_days)
    _check_tensor_invariants(tensor)
    return tensor


def _check_tensor_invariants(tensor: FeatureTensor) -> None:
    for spec in tensor.variables:
        col = tensor.data[:, :, tensor.var_index(spec.name)]
        if spec.dtype == "binary" and not np.isin(col, (0.0, 1.0)).all():
            raise ConfigError(f"binary feature {spec.name!r} holds non-binary values")
    for base in ("hour", "day_of_week", "month"):
        s = tensor.data[:, :, tensor.var_index(f"{base}_sin")]
        c = tensor.data[:, :, tensor.var_index(f"{base}_cos")]
        if not np.allclose(s * s + c * c, 1.0, atol=1e-9):
            raise ConfigError(f"cyclic pair {base!r} left the unit circle")
    if tensor.var("speed").kind != OBSERVED_PAST:
        raise ConfigError("target variable 'speed' must be observed_past")
