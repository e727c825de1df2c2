from datetime import date, datetime, time, timedelta

import numpy as np
import pytest

from traffic_moe import ingest
from traffic_moe.errors import ConfigError


DAY = date(2022, 2, 14)
DAY2 = date(2022, 2, 15)


def small_graph():
    return ingest.LinkGraph(links=("L1", "L2"), upstream={"L1": (), "L2": ("L1",)})


class TestTimeGrid:
    def test_default_window_has_186_steps(self):
        grid = ingest.build_time_grid([DAY])
        assert grid.steps_per_day == 186
        assert grid.total_steps == 186

    def test_single_step_window(self):
        grid = ingest.build_time_grid([DAY], daily_start=time(0, 0),
                                      daily_end=time(0, 4))
        assert grid.steps_per_day == 1

    def test_two_days_double_the_steps(self):
        grid = ingest.build_time_grid([DAY, DAY2])
        assert grid.total_steps == 2 * 186

    def test_non_divisible_window_rejected(self):
        with pytest.raises(ConfigError):
            ingest.build_time_grid([DAY], daily_start=time(0, 0),
                                   daily_end=time(0, 5))

    def test_start_after_end_rejected(self):
        with pytest.raises(ConfigError):
            ingest.build_time_grid([DAY], daily_start=time(9, 0),
                                   daily_end=time(8, 0))

    def test_timestamps_strictly_increase_within_day(self):
        grid = ingest.build_time_grid([DAY, DAY2])
        stamps = grid.timestamps()
        per_day = grid.steps_per_day
        for d in range(2):
            day_stamps = stamps[d * per_day:(d + 1) * per_day]
            assert all(a < b for a, b in zip(day_stamps, day_stamps[1:]))

    def test_snap_rounds_to_nearest_step(self):
        grid = ingest.build_time_grid([DAY])
        assert grid.snap(datetime(2022, 2, 14, 5, 32)) == (0, 0)
        assert grid.snap(datetime(2022, 2, 14, 5, 33)) == (0, 1)
        assert grid.snap(datetime(2022, 2, 14, 4, 0)) is None
        assert grid.snap(datetime(2022, 2, 16, 6, 0)) is None

    def test_description_roundtrip(self):
        grid = ingest.build_time_grid([DAY, DAY2])
        again = ingest.TimeGrid.from_description(grid.describe())
        assert again == grid


class TestLinkGraph:
    def test_unknown_upstream_rejected(self):
        with pytest.raises(ConfigError):
            ingest.LinkGraph(links=("A",), upstream={"A": ("B",)})

    def test_self_upstream_rejected(self):
        with pytest.raises(ConfigError):
            ingest.LinkGraph(links=("A",), upstream={"A": ("A",)})


class TestLoadSpeed:
    def grid(self):
        return ingest.build_time_grid([DAY], daily_start=time(6, 0),
                                      daily_end=time(6, 14))  # 3 steps

    def test_linear_midpoint_interpolation(self):
        rows = [("L1", datetime(2022, 2, 14, 6, 0), 60.0),
                ("L1", datetime(2022, 2, 14, 6, 10), 50.0)]
        panel, _ = ingest.load_speed(rows, self.grid(), small_graph())
        assert panel.values[0, 1] == pytest.approx(55.0)
        assert panel.missing_mask[0, 1]
        assert not panel.missing_mask[0, 0]

    def test_leading_gap_takes_nearest_value(self):
        rows = [("L1", datetime(2022, 2, 14, 6, 5), 40.0),
                ("L1", datetime(2022, 2, 14, 6, 10), 42.0)]
        panel, _ = ingest.load_speed(rows, self.grid(), small_graph())
        assert panel.values[0, 0] == pytest.approx(40.0)

    def test_duplicate_rows_in_one_cell_averaged(self):
        rows = [("L1", datetime(2022, 2, 14, 6, 0), 58.0),
                ("L1", datetime(2022, 2, 14, 6, 1), 62.0),
                ("L1", datetime(2022, 2, 14, 6, 5), 60.0),
                ("L1", datetime(2022, 2, 14, 6, 10), 60.0)]
        panel, stats = ingest.load_speed(rows, self.grid(), small_graph())
        assert panel.values[0, 0] == pytest.approx(60.0)
        assert stats.duplicate_cells == 1

    def test_unknown_link_rejected_with_count(self):
        rows = [("NOPE", datetime(2022, 2, 14, 6, 0), 50.0),
                ("L1", datetime(2022, 2, 14, 6, 0), 50.0),
                ("L1", datetime(2022, 2, 14, 6, 5), 50.0),
                ("L1", datetime(2022, 2, 14, 6, 10), 50.0)]
        panel, stats = ingest.load_speed(rows, self.grid(), small_graph())
        assert stats.rejected_rows == 1

    def test_missing_link_day_gets_weekday_profile(self):
        grid = ingest.build_time_grid(
            [date(2022, 2, 14), date(2022, 2, 21), date(2022, 2, 28)],  # Mondays
            daily_start=time(6, 0), daily_end=time(6, 9))  # 2 steps
        rows = []
        for d, speed in ((date(2022, 2, 14), 50.0), (date(2022, 2, 28), 70.0)):
            for s in range(2):
                ts = datetime.combine(d, time(6, 0)) + timedelta(minutes=5 * s)
                rows.append(("L1", ts, speed))
                rows.append(("L2", ts, speed))
        panel, stats = ingest.load_speed(rows, grid, small_graph())
        # middle Monday is fully missing: median of the two observed Mondays
        assert panel.values[0, 2] == pytest.approx(60.0)
        assert stats.profile_filled_link_days == 2
        assert panel.missing_mask[0, 2]

    def test_output_has_no_missing_values(self):
        rows = [("L1", datetime(2022, 2, 14, 6, 0), 45.0)]
        panel, _ = ingest.load_speed(rows, self.grid(), small_graph())
        assert np.all(np.isfinite(panel.values))

    def test_csv_roundtrip_bit_exact_for_observed_cells(self, tmp_path):
        grid = self.grid()
        rng = np.random.default_rng(5)
        rows = [(link, grid.step_start(0, s), float(rng.uniform(10, 70)))
                for link in ("L1", "L2") for s in range(3)]
        panel, _ = ingest.load_speed(rows, grid, small_graph())
        path = tmp_path / "speed.csv"
        ingest.write_speed_csv(path, ingest.panel_to_speed_rows(panel))
        again, _ = ingest.load_speed(ingest.read_speed_csv(path), grid, small_graph())
        observed = ~panel.missing_mask
        assert np.array_equal(panel.values[observed], again.values[observed])


class TestLoadIncidents:
    def grid(self):
        return ingest.build_time_grid([DAY, DAY2])

    def test_interval_overlap_marks_covered_cells(self):
        rows = [("1", "L1", "accident", datetime(2022, 2, 14, 10, 0),
                 datetime(2022, 2, 14, 10, 12))]
        reports, panel, _ = ingest.load_incidents(rows, self.grid(), small_graph())
        assert len(reports) == 1
        day = panel.by_day(0)[0]
        lit = np.flatnonzero(day)
        # 10:00, 10:05, 10:10 are steps 54..56 after 05:30
        assert list(lit) == [54, 55, 56]

    def test_zero_reports_all_zero(self):
        _, panel, _ = ingest.load_incidents([], self.grid(), small_graph())
        assert not panel.values.any()

    def test_overnight_report_clipped_to_daily_windows(self):
        rows = [("1", "L1", "accident", datetime(2022, 2, 14, 20, 55),
                 datetime(2022, 2, 15, 5, 35))]
        _, panel, _ = ingest.load_incidents(rows, self.grid(), small_graph())
        d0 = panel.by_day(0)[0]
        d1 = panel.by_day(0)[1]
        assert list(np.flatnonzero(d0)) == [185]          # 20:55
        assert list(np.flatnonzero(d1)) == [0, 1]         # 05:30, 05:35

    def test_end_before_start_rejected(self):
        rows = [("1", "L1", "accident", datetime(2022, 2, 14, 11, 0),
                 datetime(2022, 2, 14, 10, 0))]
        reports, panel, stats = ingest.load_incidents(rows, self.grid(), small_graph())
        assert stats.rejected_rows == 1
        assert not reports and not panel.values.any()

    def test_noncritical_kinds_dropped(self):
        rows = [("1", "L1", "police_presence", datetime(2022, 2, 14, 10, 0),
                 datetime(2022, 2, 14, 10, 5))]
        reports, panel, stats = ingest.load_incidents(rows, self.grid(), small_graph())
        assert stats.dropped_kinds == 1
        assert not reports

    def test_brute_force_overlap_oracle(self):
        grid = self.grid()
        rng = np.random.default_rng(11)
        rows = []
        for i in range(40):
            day = [DAY, DAY2][rng.integers(2)]
            start_min = int(rng.integers(0, 24 * 60 - 40))
            dur = int(rng.integers(0, 90))
            start = datetime.combine(day, time(0, 0)) + timedelta(minutes=start_min)
            rows.append((str(i), "L1", "accident", start, start + timedelta(minutes=dur)))
        _, panel, _ = ingest.load_incidents(rows, grid, small_graph())

        expected = np.zeros(grid.total_steps)
        for _, _, _, s, e in rows:
            for d in range(grid.n_days):
                for st in range(grid.steps_per_day):
                    cell_start = grid.step_start(d, st)
                    cell_end = cell_start + grid.step
                    if s < cell_end and e >= cell_start:
                        expected[grid.flat_index(d, st)] = 1.0
        np.testing.assert_array_equal(panel.values[0], expected)


class TestLoadWeather:
    def grid(self):
        return ingest.build_time_grid([DAY])

    @staticmethod
    def record(ts, temp=40.0, cond="Cloudy"):
        return ingest.WeatherRecord(ts=ts, temperature_f=temp, dew_point_f=30.0,
                                    humidity_pct=70.0, wind_speed_mph=5.0,
                                    wind_gust_mph=8.0, precipitation_in=0.0,
                                    condition_text=cond)

    def test_hourly_value_replicated_across_the_hour(self):
        recs = [self.record(datetime(2022, 2, 14, h, 0), temp=30.0 + h)
                for h in range(5, 22)]
        panels, _ = ingest.load_weather(recs, self.grid(), small_graph())
        temp = panels["temperature"].values[0]
        grid = self.grid()
        for s in range(grid.steps_per_day):
            ts = grid.step_start(0, s)
            assert temp[s] == pytest.approx(30.0 + ts.hour)

    def test_missing_hour_forward_filled(self):
        recs = [self.record(datetime(2022, 2, 14, 9, 0), temp=40.0),
                self.record(datetime(2022, 2, 14, 11, 0), temp=44.0)]
        panels, _ = ingest.load_weather(recs, self.grid(), small_graph())
        temp = panels["temperature"].values[0]
        grid = self.grid()
        ten_am = [s for s in range(grid.steps_per_day)
                  if grid.step_start(0, s).hour == 10]
        assert all(temp[s] == pytest.approx(40.0) for s in ten_am)

    def test_single_record_gives_constant_panel(self):
        recs = [self.record(datetime(2022, 2, 14, 12, 0), temp=55.0)]
        panels, _ = ingest.load_weather(recs, self.grid(), small_graph())
        np.testing.assert_allclose(panels["temperature"].values, 55.0)

    def test_panels_constant_across_links(self):
        recs = [self.record(datetime(2022, 2, 14, h, 0), temp=float(h))
                for h in range(5, 21, 2)]
        panels, _ = ingest.load_weather(recs, self.grid(), small_graph())
        for panel in panels.values():
            np.testing.assert_array_equal(panel.values[0], panel.values[1])

    def test_empty_input_yields_all_missing_panels(self):
        panels, stats = ingest.load_weather([], self.grid(), small_graph())
        assert panels["temperature"].missing_mask.all()
        assert stats.warnings

    def test_invalid_humidity_rejected(self):
        recs = [self.record(datetime(2022, 2, 14, 9, 0)),
                ingest.WeatherRecord(ts=datetime(2022, 2, 14, 10, 0),
                                     temperature_f=40.0, dew_point_f=30.0,
                                     humidity_pct=140.0, wind_speed_mph=5.0,
                                     wind_gust_mph=8.0, precipitation_in=0.0,
                                     condition_text="Fair")]
        _, stats = ingest.load_weather(recs, self.grid(), small_graph())
        assert stats.rejected_rows == 1

    def test_condition_panel_carries_vocabulary(self):
        recs = [self.record(datetime(2022, 2, 14, 9, 0), cond="Cloudy"),
                self.record(datetime(2022, 2, 14, 10, 0), cond="Fair")]
        panels, _ = ingest.load_weather(recs, self.grid(), small_graph())
        cond = panels["condition"]
        assert cond.categories == ("Cloudy", "Fair")
        assert set(np.unique(cond.values)) <= {0.0, 1.0}


class TestCsvContracts:
    def test_incident_csv_roundtrip(self, tmp_path):
        rows = [("7", "L1", "accident", datetime(2022, 2, 14, 10, 0),
                 datetime(2022, 2, 14, 10, 30))]
        path = tmp_path / "inc.csv"
        ingest.write_incident_csv(path, rows)
        assert ingest.read_incident_csv(path) == rows

    def test_weather_csv_roundtrip(self, tmp_path):
        recs = [TestLoadWeather.record(datetime(2022, 2, 14, 9, 0), temp=41.3)]
        path = tmp_path / "weather.csv"
        ingest.write_weather_csv(path, recs)
        assert ingest.read_weather_csv(path) == recs

    def test_network_csv_roundtrip(self, tmp_path):
        graph = small_graph()
        path = tmp_path / "network.csv"
        ingest.write_network_csv(path, graph)
        again = ingest.read_network_csv(path)
        assert again.links == graph.links
        assert again.upstream_of("L2") == ("L1",)
