"""MC-dropout predictive sampling and the map/point products built on it.

Prediction uses the signal branch alone: the mixing weight is pinned to 1, so
nothing downstream of here depends on the outlier branch. Each stochastic
forward pass keeps dropout active and counts as one draw of the network
weights; the spread of mu across passes is the model-uncertainty part, the
average sigma^2 the data-noise part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import TerrainGrid, extract_patch, sample_or_fill
from .errors import NumericError, ParameterError, UsageError
from .mixture import SIGMA_FLOOR
from .network import (
    ModelGraph,
    location_features,
    standardize_patches,
    _softplus64,
)

N_PASSES = 50    # default stochastic passes per query
_CHUNK = 512     # queries per forward call; bounds the im2col working set


@dataclass
class QueryBatch:
    """Standardized network inputs for a set of prediction points."""

    x_patch: np.ndarray   # (q, 1, P, P), model dtype
    x_loc: np.ndarray     # (q, 6), model dtype

    def __len__(self) -> int:
        return len(self.x_loc)

    def take(self, idx) -> "QueryBatch":
        return QueryBatch(self.x_patch[idx], self.x_loc[idx])


def queries_for_points(model: ModelGraph, grid: TerrainGrid, easting,
                       northing, epoch_seconds) -> QueryBatch:
    """Featurize arbitrary (x, y, time) prediction points.

    Elevation comes from the DEM (0 m fill outside it, matching training);
    the terrain patch is extracted per point on the model's lattice.
    """
    e = np.atleast_1d(np.asarray(easting, dtype=np.float64))
    n = np.atleast_1d(np.asarray(northing, dtype=np.float64))
    t = np.atleast_1d(np.asarray(epoch_seconds, dtype=np.int64))
    e, n, t = np.broadcast_arrays(e, n, t)
    elev = sample_or_fill(grid, e, n, fill=0.0)
    t_cont = (t - model.epoch_seconds) / 60.0
    minute = (t % 86400) // 60
    loc = location_features(e, n, elev, t_cont, minute)

    ps = model.cfg.patch_size
    patches = np.empty((len(e), 1, ps, ps), dtype=np.float64)
    for i in range(len(e)):
        patches[i, 0] = extract_patch(grid, e[i], n[i], ps,
                                      model.cfg.patch_cell_m)
    return QueryBatch(standardize_patches(model, patches),
                      model.loc_standardizer.transform(loc).astype(
                          model.signal.dtype))


def queries_for_table(model: ModelGraph, table, grid: TerrainGrid
                      ) -> QueryBatch:
    """Featurize observation rows, reusing the per-site patch cache."""
    from .training import prepare_features
    prep = prepare_features(model, table, grid)
    return QueryBatch(prep.x_patch_by_site[prep.site_pos],
                      prep.x_loc.astype(model.signal.dtype))


@dataclass
class PredictiveSamples:
    """Per-pass signal-branch outputs for each query point."""

    mu: np.ndarray                 # (n_passes, q)
    sigma: np.ndarray              # (n_passes, q), > 0 by the link
    y: np.ndarray | None = None    # (n_passes, q) Gaussian draws, optional


def _heads(model: ModelGraph, q: QueryBatch, mode: str, rng, masks=None,
           shared_mask: bool = False):
    tr = ad.forward(model.signal, {"patch": q.x_patch, "loc": q.x_loc},
                    mode=mode, rng=rng, masks=masks, shared_mask=shared_mask)
    mu = tr.values["mu_head"][:, 0].astype(np.float64)
    sigma = _softplus64(
        tr.values["sigma_head"][:, 0].astype(np.float64)) + SIGMA_FLOOR
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
        raise NumericError("non-finite prediction")
    return mu, sigma, tr


def mc_passes(model: ModelGraph, q: QueryBatch, n_passes: int = N_PASSES,
              rng: np.random.Generator | None = None,
              mode: str = "mc-sample", chunk: int = _CHUNK
              ) -> PredictiveSamples:
    """n_passes stochastic forwards per query; mixing weight fixed at 1.

    With mode='deterministic' every pass is the plain forward output (useful
    for n_passes=1 point predictions). Per-pass y draws are attached whenever
    an rng is supplied.
    """
    if n_passes < 1:
        raise ParameterError("n_passes must be >= 1")
    if mode == "mc-sample" and rng is None:
        raise UsageError("mc-sample mode needs an rng")
    nq = len(q)
    mu = np.empty((n_passes, nq))
    sigma = np.empty((n_passes, nq))
    for start in range(0, nq, chunk):
        sl = slice(start, start + chunk)
        sub = q.take(sl)
        for k in range(n_passes):
            mu[k, sl], sigma[k, sl], _ = _heads(model, sub, mode, rng)
    y = None
    if rng is not None:
        y = mu + sigma * rng.standard_normal(mu.shape)
    return PredictiveSamples(mu, sigma, y)


@dataclass
class UncertaintySummary:
    """Marginal predictive summaries per query point (all arrays, degC)."""

    mean: np.ndarray
    aleatoric_sd: np.ndarray
    epistemic_sd: np.ndarray
    total_sd: np.ndarray
    quantile_levels: tuple
    quantiles: np.ndarray   # (len(levels), q), from the per-pass y draws


def summarize(ps: PredictiveSamples,
              quantile_levels: tuple = ()) -> UncertaintySummary:
    """Collapse passes to mean / spread decomposition / quantiles.

    Spread convention: SD over passes uses divisor N, so identical passes
    give exactly zero; total^2 = epistemic^2 + aleatoric^2 by construction.
    """
    n = ps.mu.shape[0]
    if n < 2:
        raise ParameterError("need >= 2 passes for spread summaries")
    levels = tuple(float(l) for l in quantile_levels)
    if any(not 0.0 < l < 1.0 for l in levels):
        raise ParameterError("quantile levels must lie in (0, 1)")
    mean = ps.mu.mean(axis=0)
    epistemic = ps.mu.std(axis=0)
    aleatoric = np.sqrt(np.mean(ps.sigma ** 2, axis=0))
    total = np.sqrt(epistemic ** 2 + aleatoric ** 2)
    if levels:
        if ps.y is None:
            raise UsageError("quantiles need per-pass y draws "
                             "(run mc_passes with an rng)")
        quantiles = np.quantile(ps.y, levels, axis=0)
    else:
        quantiles = np.empty((0, ps.mu.shape[1]))
    return UncertaintySummary(mean, aleatoric, epistemic, total, levels,
                              quantiles)


@dataclass
class GridLattice:
    """Query lattice over a bbox: the cell geometry plus featurized inputs."""

    queries: QueryBatch
    ncols: int
    nrows: int
    xll: float
    yll: float
    resolution_m: float

    def raster(self, a: np.ndarray) -> TerrainGrid:
        return TerrainGrid(self.ncols, self.nrows, self.xll, self.yll,
                           self.resolution_m, -9999.0,
                           np.asarray(a).reshape(self.nrows, self.ncols))


def grid_queries(model: ModelGraph, grid: TerrainGrid, bbox,
                 resolution_m: float, epoch_seconds: int) -> GridLattice:
    """Cell-centre queries covering bbox at one time instant; row 0 north."""
    x0, y0, x1, y1 = (float(v) for v in bbox)
    gx0, gy0, gx1, gy1 = grid.extent
    if not (x1 > x0 and y1 > y0):
        raise ParameterError("empty bbox")
    if x0 < gx0 or y0 < gy0 or x1 > gx1 or y1 > gy1:
        raise ParameterError("bbox extends outside the DEM extent")
    ncols = int(round((x1 - x0) / resolution_m))
    nrows = int(round((y1 - y0) / resolution_m))
    if ncols < 1 or nrows < 1:
        raise ParameterError("bbox smaller than one cell at this resolution")
    cx = x0 + (np.arange(ncols) + 0.5) * resolution_m
    cy = y1 - (np.arange(nrows) + 0.5) * resolution_m
    xg, yg = np.meshgrid(cx, cy)
    q = queries_for_points(model, grid, xg.ravel(), yg.ravel(),
                           np.full(xg.size, int(epoch_seconds)))
    return GridLattice(q, ncols, nrows, x0, y0, float(resolution_m))


def predict_grid(model: ModelGraph, grid: TerrainGrid, bbox,
                 resolution_m: float, epoch_seconds: int,
                 n_passes: int = N_PASSES,
                 rng: np.random.Generator | None = None,
                 quantile_levels: tuple = ()) -> dict[str, TerrainGrid]:
    """Predictive summary rasters over bbox at one time instant.

    Returns one raster per summary field ('mean', 'aleatoric_sd',
    'epistemic_sd', 'total_sd', plus 'q<level>' when quantiles are asked
    for), all sharing the bbox/resolution header.
    """
    lat = grid_queries(model, grid, bbox, resolution_m, epoch_seconds)
    ps = mc_passes(model, lat.queries, n_passes, rng)
    s = summarize(ps, quantile_levels)
    out = {"mean": lat.raster(s.mean),
           "aleatoric_sd": lat.raster(s.aleatoric_sd),
           "epistemic_sd": lat.raster(s.epistemic_sd),
           "total_sd": lat.raster(s.total_sd)}
    for lvl, row in zip(s.quantile_levels, s.quantiles):
        out[f"q{lvl:g}"] = lat.raster(row)
    return out


def sample_realisation(model: ModelGraph, q: QueryBatch,
                       rng: np.random.Generator,
                       include_aleatoric: bool = False,
                       shared_mask: bool = True,
                       chunk: int = _CHUNK) -> np.ndarray:
    """One draw of the whole field over the query set.

    shared_mask=True uses a single dropout mask for every point, so the draw
    is one coherent surface rather than per-point speckle; include_aleatoric
    adds independent Gaussian noise on top of the mean-field draw.
    """
    nq = len(q)
    mu = np.empty(nq)
    sigma = np.empty(nq)
    masks = None
    for start in range(0, nq, chunk):
        sl = slice(start, start + chunk)
        m, s, tr = _heads(model, q.take(sl), "mc-sample",
                          None if masks is not None else rng,
                          masks=masks, shared_mask=shared_mask)
        if shared_mask and masks is None:
            masks = tr.masks   # (1, ...) masks broadcast over later chunks
        mu[sl], sigma[sl] = m, s
    if include_aleatoric:
        return mu + sigma * rng.standard_normal(nq)
    return mu
