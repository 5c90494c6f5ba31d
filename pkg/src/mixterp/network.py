"""Two-branch mixture network: signal branch (terrain conv + location dense,
mu and sigma heads) and outlier branch (site one-hot + time, theta logit).

Featurization lives here too: the six location features are easting,
northing, elevation (DEM value at the point), continuous time in minutes
since the dataset epoch, and the sin/cos position of the minute within the
day. Location features are standardized with training-fold statistics; the
terrain patch is standardized by the global DEM mean and spread; the target
temperature is never standardized.

Link functions: mu is the raw head output; sigma = softplus(raw) + 0.01;
theta = logistic(site term + time term). The graphs themselves end at the
raw heads so the training loop can seed adjoints straight from the mixture
loss derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import TerrainGrid, sample_or_fill
from .errors import NumericError, ParameterError, ShapeError
from .mixture import SIGMA_FLOOR
from .rng import named_stream

MINUTES_PER_DAY = 1440
FEATURE_NAMES = ("easting", "northing", "elevation", "t_cont",
                 "tod_sin", "tod_cos")
T_CONT_INDEX = FEATURE_NAMES.index("t_cont")
SIGMA_INIT = 5.0  # degC; early training stability


def encode_time_of_day(minute_of_day: int) -> tuple[float, float]:
    """Minute within the day -> position on the unit circle (sin, cos)."""
    m = float(minute_of_day)
    if not (0 <= m < MINUTES_PER_DAY):
        raise ParameterError(
            f"minute_of_day must lie in [0, {MINUTES_PER_DAY}), got {m}")
    ang = 2.0 * math.pi * m / MINUTES_PER_DAY
    return math.sin(ang), math.cos(ang)


def time_features(minutes) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized, 1440-periodic circle encoding (minutes may exceed a day)."""
    ang = 2.0 * np.pi * (np.asarray(minutes, dtype=np.float64)
                         % MINUTES_PER_DAY) / MINUTES_PER_DAY
    return np.sin(ang), np.cos(ang)


@dataclass
class NetworkConfig:
    conv_channels: tuple[int, ...] = (16, 32, 64)
    dense_widths: tuple[int, ...] = (128, 128, 64)
    outlier_hidden: int = 16
    dropout_rate: float = 0.5
    patch_size: int = 32
    patch_cell_m: float = 500.0

    def validate(self) -> None:
        widths = (*self.conv_channels, *self.dense_widths, self.outlier_hidden)
        if any(int(w) < 1 for w in widths):
            raise ParameterError("all layer widths must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ParameterError("dropout_rate must lie in [0, 1)")
        if self.patch_size % (2 ** len(self.conv_channels)) != 0:
            raise ParameterError(
                f"patch_size {self.patch_size} not divisible by "
                f"2^{len(self.conv_channels)} for the pooling stack")


@dataclass
class Standardizer:
    """Per-feature affine map to zero mean, unit spread (and back)."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        scale = np.maximum(x.std(axis=0), 1e-8)
        # quantize to the checkpoint's float32 so a reloaded model is
        # bit-identical to the one in memory
        return cls(mean, scale).quantize32()

    def quantize32(self) -> "Standardizer":
        return Standardizer(self.mean.astype(np.float32).astype(np.float64),
                            self.scale.astype(np.float32).astype(np.float64))

    @classmethod
    def identity(cls, k: int) -> "Standardizer":
        return cls(np.zeros(k), np.ones(k))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean


@dataclass
class ModelGraph:
    """Built model: both branch graphs plus everything featurization needs."""

    signal: ad.Graph
    outlier: ad.Graph
    cfg: NetworkConfig
    site_ids: tuple[str, ...]
    loc_standardizer: Standardizer
    patch_mean: float = 0.0
    patch_scale: float = 1.0
    epoch_seconds: int = 0  # dataset time origin for t_cont
    site_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.site_index:
            self.site_index = {s: i for i, s in enumerate(self.site_ids)}


def build_model(cfg: NetworkConfig, site_ids, seed: int | None = 0,
                dtype=np.float32) -> ModelGraph:
    """Construct both branches; seed=None gives all-zero weights."""
    cfg.validate()
    site_ids = tuple(str(s) for s in site_ids)
    if len(site_ids) < 1:
        raise ParameterError("need at least one site for the outlier branch")
    rng = None if seed is None else named_stream(seed, "init")

    g = ad.Graph(dtype)
    g.input("patch", (1, cfg.patch_size, cfg.patch_size))
    prev = "patch"
    for i, ch in enumerate(cfg.conv_channels, start=1):
        g.conv2d(f"conv{i}", prev, int(ch), kernel=3, rng=rng)
        g.relu(f"conv{i}_relu", f"conv{i}")
        g.spatial_dropout(f"conv{i}_drop", f"conv{i}_relu", cfg.dropout_rate)
        g.maxpool2x2(f"pool{i}", f"conv{i}_drop")
        prev = f"pool{i}"
    g.flatten("terrain_vec", prev)
    g.input("loc", (len(FEATURE_NAMES),))
    g.concat("features", ["terrain_vec", "loc"])
    prev = "features"
    for j, w in enumerate(cfg.dense_widths, start=1):
        g.dense(f"dense{j}", prev, int(w), rng=rng)
        g.relu(f"dense{j}_relu", f"dense{j}")
        g.dropout(f"dense{j}_drop", f"dense{j}_relu", cfg.dropout_rate)
        prev = f"dense{j}_drop"
    g.dense("mu_head", prev, 1, rng=rng)
    g.dense("sigma_head", prev, 1, rng=rng)
    # raw sigma starts at softplus^-1(SIGMA_INIT - floor)
    b = np.array([math.log(math.expm1(SIGMA_INIT - SIGMA_FLOOR))], dtype=dtype)
    g.set_param("sigma_head/b", b)

    o = ad.Graph(dtype)
    o.input("site", (len(site_ids),))
    o.dense("site_beta", "site", 1, rng=rng)
    o.input("t", (1,))
    o.dense("time_hidden", "t", int(cfg.outlier_hidden), rng=rng)
    o.relu("time_relu", "time_hidden")
    o.dense("time_out", "time_relu", 1, rng=rng)

    return ModelGraph(g, o, cfg, site_ids,
                      Standardizer.identity(len(FEATURE_NAMES)))


def parameter_count(m: ModelGraph) -> int:
    return m.signal.parameter_count() + m.outlier.parameter_count()


def location_features(easting, northing, elevation, t_cont_minutes,
                      minute_of_day) -> np.ndarray:
    """Stack the six location features, unstandardized, shape (n, 6)."""
    sin, cos = time_features(minute_of_day)
    return np.column_stack([
        np.asarray(easting, dtype=np.float64),
        np.asarray(northing, dtype=np.float64),
        np.asarray(elevation, dtype=np.float64),
        np.asarray(t_cont_minutes, dtype=np.float64),
        sin, cos,
    ])


def features_for_table(m: ModelGraph, table, grid: TerrainGrid) -> np.ndarray:
    """Location features for every row of an observation table."""
    elev = sample_or_fill(grid, table.easting, table.northing, fill=0.0)
    t_cont = (table.epoch_seconds - m.epoch_seconds) / 60.0
    return location_features(table.easting, table.northing, elev, t_cont,
                             table.minute_of_day)


def standardize_patches(m: ModelGraph, patches: np.ndarray) -> np.ndarray:
    p = (np.asarray(patches, dtype=np.float64) - m.patch_mean) / m.patch_scale
    if p.ndim == 3:
        p = p[:, None, :, :]
    return p.astype(m.signal.dtype)


def fit_patch_standardizer(m: ModelGraph, grid: TerrainGrid) -> None:
    vals = grid.finite_values()
    if vals.size == 0:
        raise ParameterError("raster has no valid cells to standardize on")
    m.patch_mean = float(np.float32(vals.mean()))
    m.patch_scale = float(np.float32(max(vals.std(), 1e-8)))


def signal_forward(m: ModelGraph, patches, loc, mode: str = "deterministic",
                   rng: np.random.Generator | None = None,
                   masks=None, shared_mask: bool = False):
    """(mu, sigma) for a batch; raw inputs, standardization happens here.

    Returns (mu, sigma, trace); sigma carries the softplus + floor link.
    """
    x_patch = standardize_patches(m, patches)
    x_loc = m.loc_standardizer.transform(loc).astype(m.signal.dtype)
    tr = ad.forward(m.signal, {"patch": x_patch, "loc": x_loc}, mode=mode,
                    rng=rng, masks=masks, shared_mask=shared_mask)
    mu = tr.values["mu_head"][:, 0].astype(np.float64)
    sraw = tr.values["sigma_head"][:, 0].astype(np.float64)
    sigma = _softplus64(sraw) + SIGMA_FLOOR
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
        raise NumericError("non-finite signal-branch output")
    return mu, sigma, tr


def one_hot_sites(m: ModelGraph, site_ids) -> np.ndarray:
    out = np.zeros((len(site_ids), len(m.site_ids)), dtype=m.outlier.dtype)
    for i, s in enumerate(site_ids):
        j = m.site_index.get(str(s))
        if j is None:
            raise ParameterError(f"site '{s}' unknown to the outlier branch")
        out[i, j] = 1.0
    return out


def outlier_forward(m: ModelGraph, site_onehot, t_cont_minutes,
                    mode: str = "deterministic",
                    rng: np.random.Generator | None = None):
    """theta in (0,1) for a batch. Returns (theta, logit, trace)."""
    oh = np.asarray(site_onehot, dtype=m.outlier.dtype)
    if oh.ndim != 2 or oh.shape[1] != len(m.site_ids):
        raise ShapeError("site", f"one-hot must be (n, {len(m.site_ids)})")
    if not (np.all((oh == 0) | (oh == 1)) and np.all(oh.sum(axis=1) == 1)):
        raise ParameterError("each one-hot row must have exactly one 1")
    t_std = _standardize_t(m, t_cont_minutes).astype(m.outlier.dtype)
    tr = ad.forward(m.outlier, {"site": oh, "t": t_std[:, None]}, mode=mode,
                    rng=rng)
    logit = (tr.values["site_beta"][:, 0].astype(np.float64)
             + tr.values["time_out"][:, 0].astype(np.float64))
    theta = _logistic64(logit)
    return theta, logit, tr


def _standardize_t(m: ModelGraph, t_cont_minutes) -> np.ndarray:
    t = np.asarray(t_cont_minutes, dtype=np.float64)
    s = m.loc_standardizer
    return (t - s.mean[T_CONT_INDEX]) / s.scale[T_CONT_INDEX]


def _softplus64(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def _logistic64(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[np.logical_not(pos)])
    out[np.logical_not(pos)] = ex / (1.0 + ex)
    return out


def softplus_derivative(x: np.ndarray) -> np.ndarray:
    """d softplus / dx, needed to chain loss gradients through the sigma link."""
    return _logistic64(np.asarray(x, dtype=np.float64))


# -- persistence ---------------------------------------------------------------

_FORMAT = "1"


def save_model(m: ModelGraph, path, extra: dict[str, str] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for key, arr in m.signal.params().items():
        tensors[f"signal:{key}"] = arr
    for key, arr in m.outlier.params().items():
        tensors[f"outlier:{key}"] = arr
    tensors["standardizer:mean"] = m.loc_standardizer.mean.astype(np.float32)
    tensors["standardizer:scale"] = m.loc_standardizer.scale.astype(np.float32)
    tensors["patch:stats"] = np.asarray([m.patch_mean, m.patch_scale],
                                        dtype=np.float32)
    config = {
        "format": _FORMAT,
        "conv_channels": ",".join(str(c) for c in m.cfg.conv_channels),
        "dense_widths": ",".join(str(w) for w in m.cfg.dense_widths),
        "outlier_hidden": str(m.cfg.outlier_hidden),
        "dropout_rate": repr(m.cfg.dropout_rate),
        "patch_size": str(m.cfg.patch_size),
        "patch_cell_m": repr(m.cfg.patch_cell_m),
        "epoch_seconds": str(int(m.epoch_seconds)),
        "sites": ",".join(m.site_ids),
    }
    if extra:
        config.update(extra)
    ad.write_tensors(path, tensors, config)


def load_model(path) -> tuple[ModelGraph, dict[str, str]]:
    tensors, config = ad.read_tensors(path)
    cfg = NetworkConfig(
        conv_channels=tuple(int(c) for c in config["conv_channels"].split(",")),
        dense_widths=tuple(int(w) for w in config["dense_widths"].split(",")),
        outlier_hidden=int(config["outlier_hidden"]),
        dropout_rate=float(config["dropout_rate"]),
        patch_size=int(config["patch_size"]),
        patch_cell_m=float(config["patch_cell_m"]),
    )
    site_ids = tuple(config["sites"].split(","))
    m = build_model(cfg, site_ids, seed=None)
    for key, arr in tensors.items():
        if key.startswith("signal:"):
            m.signal.set_param(key[len("signal:"):], arr)
        elif key.startswith("outlier:"):
            m.outlier.set_param(key[len("outlier:"):], arr)
    m.loc_standardizer = Standardizer(
        tensors["standardizer:mean"].astype(np.float64),
        tensors["standardizer:scale"].astype(np.float64))
    m.patch_mean = float(tensors["patch:stats"][0])
    m.patch_scale = float(tensors["patch:stats"][1])
    m.epoch_seconds = int(config["epoch_seconds"])
    return m, config
