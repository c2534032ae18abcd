import math

import numpy as np
import pytest

from spycer.errors import DataError, PlacementFailure, StabilityFailure
from spycer.grids import GridMeta
from spycer.simulate import (
    SimConfig,
    date_label_for,
    euler_step,
    gen_landcover,
    gen_lst_forcing,
    integrate_adr,
    sample_sensors,
    seasonal_lst_c,
    simulate_scene,
)


def small_meta(n=32):
    return GridMeta(width=n, height=n, resolution_m=10.0,
                    origin_x=500000.0, origin_y=4800000.0)


class TestConfig:
    def test_validation(self):
        with pytest.raises(DataError):
            SimConfig(grid=small_meta(), n_sensors=4)
        with pytest.raises(DataError):
            SimConfig(grid=small_meta(), class_fractions=(0.5, 0.5, 0.5, 0.5))
        with pytest.raises(DataError):
            SimConfig(grid=small_meta(), date_spacing_days=0.0)

    def test_date_labels(self):
        assert date_label_for(94.0) == "2025-04-05"
        assert date_label_for(94.5) == "2025-04-05+0.500000"
        cfg = SimConfig(grid=small_meta(), n_dates=3, date_spacing_days=15.0,
                        start_day_of_year=94.0, n_sensors=5)
        labels = [t.date_label for t in cfg.timestamps()]
        assert labels == ["2025-04-05", "2025-04-20", "2025-05-05"]


class TestLandcover:
    def test_deterministic(self):
        cfg = SimConfig(grid=small_meta(), seed=12, n_sensors=5)
        a_cls, a_idx = gen_landcover(cfg)
        b_cls, b_idx = gen_landcover(cfg)
        assert np.array_equal(a_cls, b_cls)
        for name in a_idx:
            assert np.array_equal(a_idx[name], b_idx[name])

    def test_all_vegetation_ndvi_mean(self):
        cfg = SimConfig(grid=small_meta(64), seed=5, n_sensors=5,
                        class_fractions=(1.0, 0.0, 0.0, 0.0))
        _, idx = gen_landcover(cfg)
        assert abs(idx["ndvi"].mean() - 0.7) < 0.02

    def test_indices_clamped(self):
        for seed in range(3):
            cfg = SimConfig(grid=small_meta(), seed=seed, n_sensors=5)
            _, idx = gen_landcover(cfg)
            for name in idx:
                assert idx[name].min() >= -1.0
                assert idx[name].max() <= 1.0


class TestLstForcing:
    def test_flat_bare_analytic_value(self):
        # all-bare, no spatial field, no noise, day 171.25:
        # seasonal = 15 + 10 sin(2 pi 91.25 / 365) = 25, bare offset +2 -> 27
        cfg = SimConfig(grid=small_meta(), seed=0, n_sensors=5, n_dates=1,
                        start_day_of_year=171.25,
                        class_fractions=(0.0, 0.0, 0.0, 1.0),
                        lst_spatial_amp_c=0.0, noise_lst_std=0.0)
        class_grid, _ = gen_landcover(cfg)
        lst = gen_lst_forcing(class_grid, cfg.timestamps(), cfg)
        values = next(iter(lst.values()))
        assert np.allclose(values, 27.0, atol=1e-9)

    def test_half_year_seasonal_delta(self):
        cfg = SimConfig(grid=small_meta(), seed=3, n_sensors=5, n_dates=2,
                        date_spacing_days=182.5, start_day_of_year=10.0,
                        noise_lst_std=0.0)
        class_grid, _ = gen_landcover(cfg)
        dates = cfg.timestamps()
        lst = gen_lst_forcing(class_grid, dates, cfg)
        delta = lst[dates[1].date_label] - lst[dates[0].date_label]
        expected = seasonal_lst_c(dates[1].day_of_year) - seasonal_lst_c(dates[0].day_of_year)
        assert np.allclose(delta, expected, atol=1e-9)

    def test_deterministic(self):
        cfg = SimConfig(grid=small_meta(), seed=4, n_sensors=5, n_dates=2)
        class_grid, _ = gen_landcover(cfg)
        a = gen_lst_forcing(class_grid, cfg.timestamps(), cfg)
        b = gen_lst_forcing(class_grid, cfg.timestamps(), cfg)
        for label in a:
            assert np.array_equal(a[label], b[label])


class TestIntegration:
    def test_constant_fixed_point(self):
        cfg = SimConfig(grid=small_meta(16), seed=0, n_sensors=5, n_dates=4,
                        date_spacing_days=5.0)
        field = np.full((16, 16), 20.0)
        out = integrate_adr([field] * 4, cfg)
        for snap in out:
            assert np.allclose(snap, 20.0, atol=1e-12)

    def test_single_euler_step_relaxation(self):
        cfg = SimConfig(grid=small_meta(16), seed=0, n_sensors=5)
        ta = np.full((16, 16), 10.0)
        ts = np.full((16, 16), 20.0)
        out = euler_step(ta, ts, cfg, 0.1)
        # flat fields: diffusion 0, so 10 + 0.1 * 0.5 * (20 - 10) = 10.5
        assert np.allclose(out, 10.5, atol=1e-12)

    def test_maximum_principle(self):
        meta = small_meta(24)
        cfg = SimConfig(grid=meta, seed=9, n_sensors=5, n_dates=6,
                        date_spacing_days=10.0, noise_lst_std=0.0)
        class_grid, _ = gen_landcover(cfg)
        dates = cfg.timestamps()
        lst = gen_lst_forcing(class_grid, dates, cfg)
        series = [lst[t.date_label] for t in dates]
        out = integrate_adr(series, cfg)
        lo = min(s.min() for s in series)
        hi = max(s.max() for s in series)
        for snap in out:
            assert snap.min() >= lo - 1e-9
            assert snap.max() <= hi + 1e-9

    def test_diffusion_of_constant_is_zero(self):
        cfg = SimConfig(grid=small_meta(16), seed=0, n_sensors=5, K_true=3.0)
        flat = np.full((16, 16), 7.0)
        out = euler_step(flat, flat, cfg, 0.05)
        assert np.allclose(out, 7.0, atol=1e-12)

    def test_upwind_advection_direction(self):
        # linear ramp in x, Ts = Ta, K = 0 -> pure advection: dT = -u * slope * dt
        meta = small_meta(16)
        cfg = SimConfig(grid=meta, seed=0, n_sensors=5, K_true=1e-9,
                        wind_u=100.0, wind_v=0.0)
        cols = np.arange(16) * meta.resolution_m
        ramp = np.tile(0.1 * cols, (16, 1))
        out = euler_step(ramp, ramp.copy(), cfg, 0.01)
        interior = out[:, 1:] - ramp[:, 1:]
        assert np.allclose(interior, -100.0 * 0.1 * 0.01, atol=1e-6)

    def test_stability_failure_after_underflow(self):
        cfg = SimConfig(grid=small_meta(16), seed=0, n_sensors=5, K_true=1e7)
        with pytest.raises(StabilityFailure):
            integrate_adr([np.zeros((16, 16))] * 2, cfg)

    def test_auto_halving_keeps_stable(self):
        # dt request of a full spacing is unstable; integrator halves it
        cfg = SimConfig(grid=small_meta(16), seed=1, n_sensors=5, n_dates=3,
                        date_spacing_days=15.0, noise_lst_std=0.0)
        class_grid, _ = gen_landcover(cfg)
        dates = cfg.timestamps()
        lst = gen_lst_forcing(class_grid, dates, cfg)
        out = integrate_adr([lst[t.date_label] for t in dates], cfg)
        assert all(np.all(np.isfinite(s)) for s in out)


class TestSensors:
    def test_placement_counts_and_margins(self):
        meta = GridMeta(width=256, height=256, resolution_m=10.0,
                        origin_x=500000.0, origin_y=4800000.0)
        cfg = SimConfig(grid=meta, seed=7, n_sensors=33)
        bundle = simulate_scene(cfg)
        assert len(bundle.sensors) == 33
        positions = [(s.pixel_row, s.pixel_col) for s in bundle.sensors]
        for r, c in positions:
            assert 3 <= r < 253 and 3 <= c < 253
        for i, (r1, c1) in enumerate(positions):
            for r2, c2 in positions[i + 1:]:
                assert math.hypot(r1 - r2, c1 - c2) >= 5.0

    def test_zero_noise_readings_equal_truth(self):
        cfg = SimConfig(grid=small_meta(48), seed=3, n_sensors=6, n_dates=3,
                        noise_sensor_std=0.0)
        bundle = simulate_scene(cfg)
        for sensor in bundle.sensors:
            for label, value in sensor.readings.items():
                truth = bundle.scene.truth_at(label).values[
                    sensor.pixel_row, sensor.pixel_col
                ]
                assert value == float(truth)

    def test_impossible_placement(self):
        meta = GridMeta(width=16, height=16)
        with pytest.raises(PlacementFailure):
            cfg = SimConfig(grid=meta, seed=0, n_sensors=1000)
            dates = cfg.timestamps()
            sample_sensors({t.date_label: np.zeros((16, 16)) for t in dates},
                           dates, cfg)

    def test_readings_are_truth_plus_recorded_draw(self):
        cfg = SimConfig(grid=small_meta(48), seed=11, n_sensors=6, n_dates=2)
        bundle = simulate_scene(cfg)
        for sensor in bundle.sensors:
            for label, value in sensor.readings.items():
                truth = float(bundle.scene.truth_at(label).values[
                    sensor.pixel_row, sensor.pixel_col
                ])
                draw = bundle.sensor_noise[(sensor.id, label)]
                assert value == truth + draw


class TestDeterminism:
    def test_bit_identical_scenes(self):
        cfg = SimConfig(grid=small_meta(48), seed=21, n_sensors=6, n_dates=3)
        a = simulate_scene(cfg)
        b = simulate_scene(cfg)
        for label in a.scene.date_labels:
            assert np.array_equal(a.scene.lst_at(label).values,
                                  b.scene.lst_at(label).values)
            assert np.array_equal(a.scene.truth_at(label).values,
                                  b.scene.truth_at(label).values)
        for sa, sb in zip(a.sensors, b.sensors):
            assert sa == sb
