import math

import numpy as np
import pytest

from satfed import channel as ch


class TestGeometry:
    def test_zenith_distance_is_altitude(self):
        geo = ch.GeometryModel(altitude_m=600e3)
        assert geo.distance_m(90.0) == pytest.approx(600e3, rel=1e-12)

    def test_distance_decreases_with_elevation(self):
        geo = ch.GeometryModel()
        ds = [geo.distance_m(e) for e in (5, 10, 30, 60, 90)]
        assert all(a > b for a, b in zip(ds, ds[1:]))

    def test_horizon_slant_hand_value(self):
        # theta -> 0: d -> sqrt(2 R h + h^2)
        geo = ch.GeometryModel(altitude_m=600e3)
        expected = math.sqrt(2 * ch.EARTH_RADIUS_M * 600e3 + 600e3 ** 2)
        assert geo.distance_m(1e-9) == pytest.approx(expected, rel=1e-6)

    def test_orbital_speed_circular(self):
        geo = ch.GeometryModel(altitude_m=600e3)
        expected = math.sqrt(ch.MU_EARTH / (ch.EARTH_RADIUS_M + 600e3))
        assert geo.speed_mps() == pytest.approx(expected)
        assert 7000 < geo.speed_mps() < 8000

    def test_speed_override(self):
        assert ch.GeometryModel(orbital_speed_mps=7500.0).speed_mps() == 7500.0

    def test_nonpositive_elevation_rejected(self):
        with pytest.raises(ValueError):
            ch.GeometryModel().distance_m(0.0)


class TestLargeScale:
    def test_free_space_zenith_hand_value(self):
        budget = ch.LinkBudget()
        geo = ch.GeometryModel(altitude_m=600e3)
        a = ch.large_scale(90.0, budget, geo)
        assert a == pytest.approx(0.15 / (4 * math.pi * 600e3), rel=1e-12)

    def test_shadow_scales_amplitude(self):
        geo = ch.GeometryModel()
        a0 = ch.large_scale(45.0, ch.LinkBudget(shadow_db=0.0), geo)
        a6 = ch.large_scale(45.0, ch.LinkBudget(shadow_db=6.0), geo)
        assert a6 / a0 == pytest.approx(10 ** (-6 / 20), rel=1e-12)

    def test_atmospheric_term_cosecant(self):
        geo = ch.GeometryModel()
        budget = ch.LinkBudget(atmos_coeff_db=1.0)
        base = ch.LinkBudget()
        for e in (30.0, 90.0):
            ratio = ch.large_scale(e, budget, geo) / ch.large_scale(e, base, geo)
            expected = 10 ** (-(1.0 / math.sin(math.radians(e))) / 20)
            assert ratio == pytest.approx(expected, rel=1e-12)


class TestDoppler:
    def test_zero_at_zenith(self):
        assert ch.doppler(90.0, ch.LinkBudget(), ch.GeometryModel()) == \
            pytest.approx(0.0, abs=1e-9)

    def test_hand_value(self):
        geo = ch.GeometryModel(orbital_speed_mps=7500.0)
        f = ch.doppler(30.0, ch.LinkBudget(wavelength_m=0.15), geo)
        assert f == pytest.approx(7500 * math.cos(math.radians(30)) / 0.15)

    def test_monotone_decreasing_in_elevation(self):
        geo = ch.GeometryModel()
        fs = [ch.doppler(e, ch.LinkBudget(), geo) for e in (10, 30, 60, 89)]
        assert all(a > b for a, b in zip(fs, fs[1:]))


class TestRician:
    def test_unit_mean_power(self):
        rng = np.random.default_rng(0)
        h = ch.rician_fading(ch.LinkBudget(rician_k_db=10.0), 200_000, rng)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, rel=5e-3)

    def test_high_k_concentrates_on_los(self):
        rng = np.random.default_rng(1)
        h = ch.rician_fading(ch.LinkBudget(rician_k_db=40.0), 10_000, rng)
        assert np.std(np.abs(h)) < 0.02

    def test_deterministic_given_seed(self):
        budget = ch.LinkBudget()
        h1 = ch.rician_fading(budget, 16, np.random.default_rng(3))
        h2 = ch.rician_fading(budget, 16, np.random.default_rng(3))
        np.testing.assert_array_equal(h1, h2)


def rician_gain_pdf(g, k):
    """Density of |h|^2 for unit-mean-power Rician fading."""
    return (k + 1) * np.exp(-k - (k + 1) * g) * np.i0(2 * np.sqrt(k * (k + 1) * g))


class TestCapacity:
    def test_shannon_hand_value(self):
        # Pick the shadow so the received power is exactly the noise floor:
        # SNR = 1 and the bound is exactly B bit/s.
        budget0 = ch.LinkBudget()
        geo = ch.GeometryModel(altitude_m=600e3)
        a0_db = 20 * math.log10(ch.large_scale(45.0, budget0, geo))
        want_db = budget0.noise_dbm - budget0.tx_power_dbm - budget0.ant_gain_dbi
        budget = ch.LinkBudget(shadow_db=a0_db - want_db)
        rate = ch.shannon_upper(budget, 45.0, geo)
        assert rate == pytest.approx(budget.bandwidth_hz, rel=1e-12)

    def test_zero_below_min_elevation(self):
        budget = ch.LinkBudget(min_elevation_deg=10.0)
        geo = ch.GeometryModel()
        assert ch.shannon_upper(budget, 5.0, geo) == 0.0
        assert ch.ergodic_capacity(budget, 5.0, geo, 10,
                                   np.random.default_rng(0)) == 0.0
        assert ch.channel(0.0, 5.0, budget, geo, np.random.default_rng(0)) == 0j

    def test_ergodic_not_above_shannon(self):
        geo = ch.GeometryModel()
        rng = np.random.default_rng(5)
        for shadow in (120.0, 130.0, 140.0):
            budget = ch.LinkBudget(shadow_db=shadow - 154.0)
            erg = ch.ergodic_capacity(budget, 45.0, geo, 50_000, rng)
            assert erg <= ch.shannon_upper(budget, 45.0, geo) * (1 + 1e-12)

    def test_ergodic_matches_quadrature_oracle(self):
        # Independent check: integrate B log2(1 + snr g) against the
        # analytic gain density of unit-power Rician fading.
        geo = ch.GeometryModel(altitude_m=600e3)
        budget0 = ch.LinkBudget()
        a0_db = 20 * math.log10(ch.large_scale(45.0, budget0, geo))
        budget = ch.LinkBudget(shadow_db=a0_db + 160.0)  # ~ 0 dB mean SNR
        k = 10.0 ** (budget.rician_k_db / 10.0)
        snr = (10 ** ((budget.tx_power_dbm - 30) / 10)
               * 10 ** (budget.ant_gain_dbi / 10)
               * ch.large_scale(45.0, budget, geo) ** 2
               / 10 ** ((budget.noise_dbm - 30) / 10))
        g = np.linspace(1e-9, 12.0, 400_001)
        pdf = rician_gain_pdf(g, k)
        oracle = budget.bandwidth_hz * np.trapezoid(np.log2(1 + snr * g) * pdf, g)
        mc = ch.ergodic_capacity(budget, 45.0, geo, 400_000,
                                 np.random.default_rng(7))
        assert mc == pytest.approx(oracle, rel=5e-3)

    def test_sample_count_validated(self):
        with pytest.raises(ValueError):
            ch.ergodic_capacity(ch.LinkBudget(), 45.0, ch.GeometryModel(), 0,
                                np.random.default_rng(0))


class TestContactPlan:
    def test_round_robin_with_idle(self):
        plan = ch.build_contact_plan(3, 8, idle_slots_per_cycle=1)
        assert plan == [0, 1, 2, None, 0, 1, 2, None]

    def test_no_idle(self):
        assert ch.build_contact_plan(2, 5) == [0, 1, 0, 1, 0]

    def test_cycle_length(self):
        assert ch.cycle_length(3, 1) == 4

    def test_invalid_rounds_rejected(self):
        with pytest.raises(ValueError):
            ch.build_contact_plan(2, 0)


class TestWindowBytes:
    def test_hand_values(self):
        assert ch.window_bytes(5e6, 600.0) == 375_000_000
        assert ch.window_bytes(5e6, 320.0) == 200_000_000

    def test_floor(self):
        assert ch.window_bytes(9.0, 1.0) == 1

    def test_negative_rate_rejected(self):
        with pytest.raises(ValueError):
            ch.window_bytes(-1.0, 10.0)


class TestExport:
    def test_plan_file_format(self, tmp_path):
        plan = ch.build_contact_plan(2, 3, idle_slots_per_cycle=1)
        path = tmp_path / "plan.txt"
        ch.export_contact_plan(plan, 600.0, 5e6, path)
        lines = path.read_text().strip().splitlines()
        assert lines[1].split() == ["0", "0", "600.0", "5000000.0", "375000000"]
        assert lines[3].split()[1] == "IDLE"
