"""Small builders for grids, panels, and feature tensors used across tests."""

from datetime import date, time, timedelta

import numpy as np

from traffic_moe import features, ingest


def make_grid(n_days=1, steps=6):
    days = [date(2022, 2, 14) + timedelta(days=i) for i in range(n_days)]
    end_minute = 6 * 60 + 5 * steps - 1
    return ingest.build_time_grid(days, daily_start=time(6, 0),
                                  daily_end=time(end_minute // 60, end_minute % 60))


def make_panel(values, grid, links=("L1",), categories=None):
    values = np.asarray(values, dtype=np.float64).reshape(len(links), -1)
    return ingest.Panel(links=links, grid=grid, values=values,
                        missing_mask=np.zeros_like(values, dtype=bool),
                        categories=categories)


def build_tensor(n_days=4, steps=8, train_days=2, speed_values=None, seed=0,
                 incident_rate=0.1, links=("L1", "L2")):
    grid = make_grid(n_days=n_days, steps=steps)
    upstream = {link: (links[i - 1],) if i else () for i, link in enumerate(links)}
    graph = ingest.LinkGraph(links=tuple(links), upstream=upstream)
    rng = np.random.default_rng(seed)
    total = grid.total_steps
    n = len(links)
    if speed_values is None:
        speed_values = rng.uniform(30, 70, size=(n, total))
    speed = make_panel(speed_values, grid, tuple(links))
    sd = features.slowdown_speed(speed, graph)
    dii = make_panel((rng.random((n, total)) < incident_rate).astype(float),
                     grid, tuple(links))
    incident = features.incident_features(dii)
    time_p = features.time_features(grid, [], links)
    weather = {}
    for name in ingest.WEATHER_VARIABLES:
        weather[name] = make_panel(rng.uniform(0, 50, size=(n, total)), grid,
                                   tuple(links))
    cond_codes = rng.integers(0, 2, size=(n, total)).astype(float)
    weather["condition"] = make_panel(cond_codes, grid, tuple(links),
                                      categories=("Cloudy", "Fair"))
    tensor = features.assemble_features(speed, sd, incident, time_p, weather,
                                        train_days=min(train_days, n_days))
    return tensor, grid
