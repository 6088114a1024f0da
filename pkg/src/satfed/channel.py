"""Satellite-ground link model.

Large-scale fading follows free-space loss times elevation-dependent
atmospheric attenuation and a fixed shadowing term; small-scale fading is
Rician with unit mean power.  Capacity is evaluated either in closed form
(Shannon bound on the deterministic large-scale channel) or by Monte Carlo
over the Rician fading (ergodic capacity).  The contact plan is a fixed
round-robin over clusters with optional idle slots per cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6.371e6
MU_EARTH = 3.986004418e14  # m^3/s^2

IDLE = None


@dataclass(frozen=True)
class LinkBudget:
    tx_power_dbm: float = 23.0
    ant_gain_dbi: float = 40.0
    bandwidth_hz: float = 5e6
    wavelength_m: float = 0.15
    noise_dbm: float = -97.0
    min_elevation_deg: float = 10.0
    rician_k_db: float = 10.0
    shadow_db: float = 0.0       # extra attenuation, amplitude 10^(-shadow/20)
    rain_phase_rad: float = 0.0
    atmos_coeff_db: float = 0.0  # A(theta) = atmos_coeff / sin(theta)

    def __post_init__(self):
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0 < self.min_elevation_deg < 90:
            raise ValueError("min elevation must lie in (0, 90) degrees")
        if not math.isfinite(self.noise_dbm):
            raise ValueError("noise power must be finite")


@dataclass(frozen=True)
class GeometryModel:
    altitude_m: float = 600e3
    orbital_speed_mps: float | None = None  # default: circular-orbit speed

    def distance_m(self, elevation_deg: float) -> float:
        """Slant range to the satellite for a circular orbit."""
        if elevation_deg <= 0:
            raise ValueError("elevation must be positive")
        th = math.radians(elevation_deg)
        r = EARTH_RADIUS_M
        return math.sqrt((r * math.sin(th)) ** 2
                         + 2 * r * self.altitude_m + self.altitude_m ** 2) \
            - r * math.sin(th)

    def speed_mps(self) -> float:
        if self.orbital_speed_mps is not None:
            return self.orbital_speed_mps
        return math.sqrt(MU_EARTH / (EARTH_RADIUS_M + self.altitude_m))


def _db_to_amp(db: float) -> float:
    return 10.0 ** (db / 20.0)


def _dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def large_scale(elevation_deg: float, budget: LinkBudget,
                geometry: GeometryModel) -> float:
    """Linear large-scale amplitude a(theta)."""
    if elevation_deg <= 0:
        raise ValueError("elevation must be positive")
    d = geometry.distance_m(elevation_deg)
    atmos_db = budget.atmos_coeff_db / math.sin(math.radians(elevation_deg))
    return (budget.wavelength_m / (4 * math.pi * d)
            * _db_to_amp(-atmos_db) * _db_to_amp(-budget.shadow_db))


def doppler(elevation_deg: float, budget: LinkBudget,
            geometry: GeometryModel) -> float:
    """Doppler shift in Hz; zero at zenith, maximal near the horizon."""
    v_r = geometry.speed_mps() * math.cos(math.radians(elevation_deg))
    return v_r / budget.wavelength_m


def rician_fading(budget: LinkBudget, n: int, rng: np.random.Generator) -> np.ndarray:
    """Complex small-scale coefficients with unit mean power."""
    k = 10.0 ** (budget.rician_k_db / 10.0)
    los = math.sqrt(k / (k + 1))
    scatter = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) \
        * math.sqrt(1 / (2 * (k + 1)))
    return los + scatter


def channel(t: float, elevation_deg: float, budget: LinkBudget,
            geometry: GeometryModel, rng: np.random.Generator) -> complex:
    """Instantaneous complex channel coefficient; exactly 0 below threshold."""
    if elevation_deg < budget.min_elevation_deg:
        return 0j
    a = large_scale(elevation_deg, budget, geometry)
    f_d = doppler(elevation_deg, budget, geometry)
    phase = np.exp(1j * budget.rain_phase_rad) * np.exp(2j * math.pi * f_d * t)
    return a * phase * rician_fading(budget, 1, rng)[0]


def _snr_linear(budget: LinkBudget, amplitude: float) -> float:
    p = _dbm_to_watt(budget.tx_power_dbm) * 10.0 ** (budget.ant_gain_dbi / 10.0)
    return p * amplitude ** 2 / _dbm_to_watt(budget.noise_dbm)


def shannon_upper(budget: LinkBudget, elevation_deg: float,
                  geometry: GeometryModel) -> float:
    """Shannon capacity bound on the large-scale channel, in bit/s."""
    if elevation_deg < budget.min_elevation_deg:
        return 0.0
    a = large_scale(elevation_deg, budget, geometry)
    return budget.bandwidth_hz * math.log2(1 + _snr_linear(budget, a))


def ergodic_capacity(budget: LinkBudget, elevation_deg: float,
                     geometry: GeometryModel, n_samples: int,
                     rng: np.random.Generator) -> float:
    """Monte-Carlo ergodic capacity over the Rician fading, in bit/s."""
    if n_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    if elevation_deg < budget.min_elevation_deg:
        return 0.0
    a = large_scale(elevation_deg, budget, geometry)
    snr = _snr_linear(budget, a)
    gains = np.abs(rician_fading(budget, n_samples, rng)) ** 2
    return float(budget.bandwidth_hz * np.mean(np.log2(1 + snr * gains)))


def build_contact_plan(n_clusters: int, total_rounds: int,
                       idle_slots_per_cycle: int = 0) -> list[int | None]:
    """Round-robin schedule: clusters 0..C-1, then idle slots, repeated."""
    if total_rounds < 1:
        raise ValueError("total_rounds must be >= 1")
    cycle = list(range(n_clusters)) + [IDLE] * idle_slots_per_cycle
    return [cycle[t % len(cycle)] for t in range(total_rounds)]


def cycle_length(n_clusters: int, idle_slots_per_cycle: int = 0) -> int:
    return n_clusters + idle_slots_per_cycle


def window_bytes(rate_bps: float, window_seconds: float) -> int:
    """Bytes deliverable in one contact window."""
    if rate_bps < 0:
        raise ValueError("rate must be nonnegative")
    return int(rate_bps * window_seconds // 8)


def export_contact_plan(plan: list[int | None], window_seconds: float,
                        rate_bps: float, path) -> None:
    budget = window_bytes(rate_bps, window_seconds)
    with open(path, "w") as fh:
        fh.write("# round cluster window_s rate_bps budget_bytes\n")
        for t, c in enumerate(plan):
            name = "IDLE" if c is IDLE else str(c)
            fh.write(f"{t} {name} {window_seconds} {rate_bps} {budget}\n")
