"""Synthetic ground truth: DEM, smooth space-time field, sites, planted faults.

Everything is a pure function of the config seed (via named substreams) or an
explicitly passed generator, so any artifact can be regenerated bit-identically.
Faults are assigned per site, in two flavours: a constant bias held for the
whole record, or heavy per-reading uniform noise. Both keep the deviation from
the true field inside the +-50 degC band the mixture's outlier component covers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ObservationTable, TerrainGrid, bilinear_sample
from .errors import ParameterError
from .rng import named_stream

EPOCH_SECONDS = 1717200000  # 2024-06-01T00:00:00Z; synthetic record start
FAULT_CONSTANT_BIAS = "constant-bias"
FAULT_NOISY = "per-reading-noise"
_MIN_BIAS = 5.0  # degC; smaller biases are indistinguishable from clean sites


@dataclass
class SyntheticWorldConfig:
    extent_m: float = 200_000.0
    dem_cells: int = 256
    n_sites: int = 200
    days: int = 3
    obs_per_site_per_hour: int = 1
    contamination_rate: float = 0.05
    noise_sd: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.contamination_rate < 1.0):
            raise ParameterError("contamination_rate must lie in [0, 1)")
        if min(self.extent_m, self.dem_cells, self.n_sites, self.days,
               self.obs_per_site_per_hour) <= 0:
            raise ParameterError("world sizes must be positive")
        if self.noise_sd <= 0:
            raise ParameterError("noise_sd must be positive")


@dataclass
class GroundTruthField:
    """Closed-form temperature field: base + lapse + diurnal cycle + fixed
    spatial harmonics + a moving front."""

    extent_m: float
    base_c: float = 12.0
    lapse_rate_c_per_km: float = -6.5
    diurnal_amp_c: float = 4.0
    diurnal_phase_rad: float = 0.0
    harmonics: tuple = ()  # (amp_c, kx, ky, phase_rad) per term
    front_amp_c: float = 0.0
    front_dir: tuple[float, float] = (1.0, 0.0)
    front_speed_m_per_min: float = 0.0
    front_width_m: float = 20_000.0
    front_start_m: float = 0.0

    def __call__(self, x, y, elev_m, t_minutes) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        elev = np.asarray(elev_m, dtype=np.float64)
        t = np.asarray(t_minutes, dtype=np.float64)
        out = (self.base_c
               + self.lapse_rate_c_per_km * elev / 1000.0
               + self.diurnal_amp_c * np.sin(
                   2.0 * np.pi * t / 1440.0 + self.diurnal_phase_rad))
        for amp, kx, ky, phase in self.harmonics:
            out = out + amp * np.sin(
                2.0 * np.pi * (kx * x + ky * y) / self.extent_m + phase)
        if self.front_amp_c != 0.0:
            ux, uy = self.front_dir
            proj = x * ux + y * uy
            pos = self.front_start_m + self.front_speed_m_per_min * t
            out = out + self.front_amp_c * np.tanh(
                (proj - pos) / self.front_width_m)
        if not np.all(np.isfinite(out)):
            raise ParameterError("ground-truth field produced non-finite value")
        return out


def generate_world(cfg: SyntheticWorldConfig
                   ) -> tuple[TerrainGrid, GroundTruthField]:
    """DEM of low-frequency sinusoidal hills plus a matching smooth field."""
    cfg.validate()
    rng = named_stream(cfg.seed, "dem")
    cs = cfg.extent_m / cfg.dem_cells
    centers = (np.arange(cfg.dem_cells) + 0.5) * cs
    xg, yg = np.meshgrid(centers, centers[::-1])  # row 0 north
    elev = np.full_like(xg, 300.0)
    for _ in range(4):
        amp = rng.uniform(60.0, 160.0)
        kx, ky = rng.integers(1, 4, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        elev += amp * np.sin(2.0 * np.pi * (kx * xg + ky * yg)
                             / cfg.extent_m + phase)
    grid = TerrainGrid(cfg.dem_cells, cfg.dem_cells, 0.0, 0.0, cs, -9999.0,
                       elev)

    frng = named_stream(cfg.seed, "field")
    harmonics = tuple(
        (frng.uniform(1.0, 2.5), int(frng.integers(1, 3)),
         int(frng.integers(1, 3)), frng.uniform(0.0, 2.0 * math.pi))
        for _ in range(2))
    truth = GroundTruthField(
        extent_m=cfg.extent_m,
        diurnal_phase_rad=frng.uniform(0.0, 2.0 * math.pi),
        harmonics=harmonics,
        front_amp_c=3.0,
        front_dir=(1.0, 0.0),
        front_speed_m_per_min=cfg.extent_m / (cfg.days * 1440.0),
        front_width_m=cfg.extent_m / 10.0,
        front_start_m=0.0,
    )
    return grid, truth


@dataclass
class FaultPlan:
    site_ids: tuple[str, ...]
    faulty: dict = field(default_factory=dict)  # site_id -> (mode, bias)


def generate_observations(grid: TerrainGrid, truth: GroundTruthField,
                          cfg: SyntheticWorldConfig, rng: np.random.Generator
                          ) -> tuple[ObservationTable, np.ndarray, FaultPlan]:
    """Sites, readings, labels. Returns (table, clean field values, faults).

    Clean readings are field + Normal(0, noise_sd). A round(rate * n_sites)
    subset of sites is faulty: constant-bias sites add one offset with
    magnitude in [5, 50] degC for their whole record; noisy sites replace the
    Gaussian noise with Uniform(-50, 50) per reading.
    """
    cfg.validate()
    n = cfg.n_sites
    site_ids = tuple(f"S{i:04d}" for i in range(n))
    xs = rng.uniform(0.0, cfg.extent_m, size=n)
    ys = rng.uniform(0.0, cfg.extent_m, size=n)
    elev = np.asarray(bilinear_sample(grid, xs, ys), dtype=np.float64)

    n_faulty = int(round(cfg.contamination_rate * n))
    faulty_idx = rng.choice(n, size=n_faulty, replace=False) if n_faulty else []
    plan = FaultPlan(site_ids)
    for i in sorted(int(j) for j in faulty_idx):
        if rng.random() < 0.5:
            bias = rng.choice([-1.0, 1.0]) * rng.uniform(_MIN_BIAS, 50.0)
            plan.faulty[site_ids[i]] = (FAULT_CONSTANT_BIAS, float(bias))
        else:
            plan.faulty[site_ids[i]] = (FAULT_NOISY, 0.0)

    hours = cfg.days * 24
    per_site = hours * cfg.obs_per_site_per_hour
    total = n * per_site
    col_site = np.repeat(np.asarray(site_ids), per_site)
    col_secs = np.empty(total, dtype=np.int64)
    col_temp = np.empty(total, dtype=np.float64)
    col_truth = np.empty(total, dtype=np.float64)
    col_label = np.zeros(total, dtype=np.int64)

    row = 0
    for i, sid in enumerate(site_ids):
        minutes = rng.integers(0, 60, size=per_site)
        t_min = (np.repeat(np.arange(hours), cfg.obs_per_site_per_hour) * 60
                 + minutes).astype(np.float64)
        clean = truth(xs[i], ys[i], elev[i], t_min)
        mode, bias = plan.faulty.get(sid, (None, 0.0))
        if mode == FAULT_NOISY:
            temp = clean + rng.uniform(-50.0, 50.0, size=per_site)
        elif mode == FAULT_CONSTANT_BIAS:
            temp = clean + bias
        else:
            temp = clean + rng.normal(0.0, cfg.noise_sd, size=per_site)
        sl = slice(row, row + per_site)
        col_secs[sl] = EPOCH_SECONDS + (t_min * 60).astype(np.int64)
        col_temp[sl] = temp
        col_truth[sl] = clean
        col_label[sl] = 1 if mode is not None else 0
        row += per_site

    table = ObservationTable(
        col_site, col_secs,
        np.repeat(xs, per_site), np.repeat(ys, per_site),
        col_temp, outlier_label=col_label)
    return table, col_truth, plan
