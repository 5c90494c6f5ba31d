"""Verification metrics: point accuracy, probabilistic calibration, and
outlier-ranking quality against planted labels.

Everything here is a pure function of arrays except the two model-facing
helpers at the bottom, which run the deterministic forward pass to score a
table of observations.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import mixture
from .data import ObservationTable, TerrainGrid, fold_mask
from .errors import ParameterError
from .network import one_hot_sites, outlier_forward
from .rng import named_stream

_MIN_INTERVAL_SAMPLES = 20


def rmse_r2(preds, obs) -> tuple[float, float]:
    """Root mean squared error and R^2 about the observation mean."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(obs, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ParameterError("predictions and observations must be equal "
                             "non-empty vectors")
    sse = float(np.sum((p - y) ** 2))
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise ParameterError("zero-variance observations: r2 undefined")
    return math.sqrt(sse / y.size), 1.0 - sse / sst


def crps_per_obs(samples, obs) -> np.ndarray:
    """Energy-form CRPS estimate per observation.

    samples: (n_samples, n_obs); obs: (n_obs,). Uses the sorted-pairwise
    identity for the self-distance term, so cost is O(N log N) per column:
    mean_k |y_k - y| - (1 / (2 N^2)) sum_{k,l} |y_k - y_l|.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    y = np.atleast_1d(np.asarray(obs, dtype=np.float64))
    if s.shape[1] != y.size:
        raise ParameterError("sample columns must match observation count")
    n = s.shape[0]
    term1 = np.mean(np.abs(s - y[None, :]), axis=0)
    srt = np.sort(s, axis=0)
    coef = 2.0 * np.arange(n) - n + 1.0
    term2 = (coef @ srt) / (n * n)
    return term1 - term2


def crps_from_samples(samples, y_obs: float) -> float:
    """Energy-form CRPS of one predictive sample set against one value."""
    return float(crps_per_obs(np.asarray(samples, dtype=np.float64)[:, None],
                              [float(y_obs)])[0])


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of Normal(mu, sigma^2) against y:
    sigma * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi))."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ParameterError("sigma must be positive")
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma
    cdf = 0.5 * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    out = sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))
    return float(out) if out.ndim == 0 else out


def interval_coverage(samples, obs, levels) -> dict[float, float]:
    """Empirical coverage of central predictive intervals.

    For each level L the interval spans the ((1-L)/2, (1+L)/2) empirical
    quantiles of that observation's samples, endpoints inclusive.
    """
    s = np.asarray(samples, dtype=np.float64)
    y = np.asarray(obs, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != y.size:
        raise ParameterError("samples must be (n_samples, n_obs)")
    if s.shape[0] < _MIN_INTERVAL_SAMPLES:
        raise ParameterError(
            f"interval metrics need >= {_MIN_INTERVAL_SAMPLES} samples per "
            f"observation, got {s.shape[0]}")
    out: dict[float, float] = {}
    for level in levels:
        level = float(level)
        if not 0.0 < level < 1.0:
            raise ParameterError("coverage levels must lie in (0, 1)")
        # (N+1)-position quantiles: a fresh draw falls below the p-quantile
        # with probability p, so calibrated intervals cover at the nominal
        # rate for any sample count (plain linear interpolation under-covers)
        lo = np.quantile(s, (1.0 - level) / 2.0, axis=0, method="weibull")
        hi = np.quantile(s, (1.0 + level) / 2.0, axis=0, method="weibull")
        out[level] = float(np.mean((y >= lo) & (y <= hi)))
    return out


def pit_qq(samples, obs, rng: np.random.Generator) -> np.ndarray:
    """Randomized probability integral transform of each observation.

    PIT_i = (#below + U * (#equal + 1)) / (N + 1) with U ~ Uniform(0,1), the
    standard randomized rank that is exactly uniform under calibration and
    well defined at ties.
    """
    s = np.asarray(samples, dtype=np.float64)
    y = np.asarray(obs, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != y.size:
        raise ParameterError("samples must be (n_samples, n_obs)")
    n = s.shape[0]
    below = np.sum(s < y[None, :], axis=0)
    equal = np.sum(s == y[None, :], axis=0)
    u = rng.random(y.size)
    return (below + u * (equal + 1)) / (n + 1)


def qq_points(pit_values) -> tuple[np.ndarray, np.ndarray]:
    """Plot-ready Q-Q data: uniform quantiles vs sorted PIT."""
    p = np.sort(np.asarray(pit_values, dtype=np.float64))
    k = p.size
    return (np.arange(1, k + 1) - 0.5) / k, p


def ks_uniform(pit_values) -> float:
    """Kolmogorov-Smirnov distance of the PIT sample from Uniform(0,1)."""
    p = np.sort(np.asarray(pit_values, dtype=np.float64))
    k = p.size
    if k == 0:
        raise ParameterError("empty PIT sample")
    grid_hi = np.arange(1, k + 1) / k
    grid_lo = np.arange(0, k) / k
    return float(np.max(np.maximum(grid_hi - p, p - grid_lo)))


def tie_average_ranks(x) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def outlier_auc(scores, labels) -> float:
    """Rank AUC of scores against binary labels (1 = faulty)."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if s.size != lab.size or s.size == 0:
        raise ParameterError("scores and labels must be equal non-empty")
    n_pos = int(np.sum(lab == 1))
    n_neg = int(np.sum(lab == 0))
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("AUC undefined with a single label class")
    ranks = tie_average_ranks(s)
    r_pos = float(np.sum(ranks[lab == 1]))
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def site_average(site_ids, values) -> tuple[np.ndarray, np.ndarray]:
    """Mean of values per site; sites returned sorted."""
    sites, inv = np.unique(np.asarray(site_ids), return_inverse=True)
    sums = np.bincount(inv, weights=np.asarray(values, dtype=np.float64))
    counts = np.bincount(inv)
    return sites, sums / counts


# -- model-facing scoring ----------------------------------------------------


def _row_scores(model, table: ObservationTable, grid: TerrainGrid):
    """Deterministic (responsibility, theta, mu, sigma) per row."""
    from .inference import mc_passes, queries_for_table
    q = queries_for_table(model, table, grid)
    ps = mc_passes(model, q, n_passes=1, mode="deterministic")
    onehot = one_hot_sites(model, table.site_id)
    t_cont = (table.epoch_seconds - model.epoch_seconds) / 60.0
    theta, _, _ = outlier_forward(model, onehot, t_cont)
    resp = mixture.responsibilities(table.temp_c.astype(np.float64),
                                    ps.mu[0], ps.sigma[0], theta)
    return resp, theta, ps.mu[0], ps.sigma[0]


def observation_responsibilities(model, table: ObservationTable,
                                 grid: TerrainGrid) -> np.ndarray:
    """Posterior outlier probability of every row under the fitted mixture.

    Deterministic forward pass; every site must be known to the outlier
    branch (training-fold sites), callers filter/skip the rest.
    """
    return _row_scores(model, table, grid)[0]


@dataclass
class SiteOutlierReport:
    """Site-averaged responsibilities over the rows whose sites are known."""

    sites: np.ndarray
    site_mean: np.ndarray
    site_label: np.ndarray | None     # per-site label when the table has one
    per_row_resp: np.ndarray          # over the kept rows
    per_row_theta: np.ndarray
    kept_rows: np.ndarray             # indices into the input table
    skipped_sites: tuple[str, ...]    # sites unknown to the outlier branch


def score_sites(model, table: ObservationTable, grid: TerrainGrid
                ) -> SiteOutlierReport:
    known = np.asarray([s in model.site_index for s in table.site_id])
    skipped = tuple(sorted(set(table.site_id[np.logical_not(known)])))
    kept = np.flatnonzero(known)
    if kept.size == 0:
        raise ParameterError("no rows from sites known to the outlier branch")
    sub = table.take(kept)
    resp, theta, _, _ = _row_scores(model, sub, grid)
    sites, means = site_average(sub.site_id, resp)
    label = None
    if sub.outlier_label is not None:
        _, lmean = site_average(sub.site_id, sub.outlier_label)
        label = (lmean > 0.5).astype(np.int64)
    return SiteOutlierReport(sites, means, label, resp, theta, kept, skipped)


# -- full report -------------------------------------------------------------


@dataclass
class CalibrationReport:
    rmse: float
    r2: float
    crps: float
    coverage: dict = field(default_factory=dict)   # level -> empirical
    pit_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    outlier_auc: float | None = None
    pit_seed: int | None = None
    n_obs: int = 0
    n_passes: int = 0

    def validate(self) -> None:
        if not all(0.0 <= v <= 1.0 for v in self.coverage.values()):
            raise ParameterError("coverage values must lie in [0, 1]")
        if self.r2 > 1.0:
            raise ParameterError("r2 cannot exceed 1")


DEFAULT_LEVELS = (0.5, 0.8, 0.9, 0.95)


def evaluate_model(model, table: ObservationTable, grid: TerrainGrid,
                   fold: int, n_passes: int, seed: int,
                   levels=DEFAULT_LEVELS, auc_folds=None) -> CalibrationReport:
    """Score one fold of the table with MC sampling; optionally add the
    site-ranking AUC computed over auc_folds (training folds, where the
    outlier branch is defined)."""
    from .inference import mc_passes, queries_for_table, summarize
    idx = np.flatnonzero(fold_mask(table, [fold]))
    if idx.size == 0:
        raise ParameterError(f"fold {fold} has no observations")
    sub = table.take(idx)
    q = queries_for_table(model, sub, grid)
    ps = mc_passes(model, q, n_passes, rng=named_stream(seed, "eval-mc"))
    s = summarize(ps)
    y = sub.temp_c.astype(np.float64)
    rmse, r2 = rmse_r2(s.mean, y)
    crps = float(np.mean(crps_per_obs(ps.y, y)))
    coverage = interval_coverage(ps.y, y, levels)
    pit = pit_qq(ps.y, y, named_stream(seed, "pit"))

    auc = None
    if auc_folds is not None and table.outlier_label is not None:
        train = table.take(np.flatnonzero(fold_mask(table, auc_folds)))
        rep = score_sites(model, train, grid)
        if rep.site_label is not None and 0 < rep.site_label.sum() < len(
                rep.site_label):
            auc = outlier_auc(rep.site_mean, rep.site_label)

    report = CalibrationReport(rmse, r2, crps, coverage, pit, auc,
                               pit_seed=seed, n_obs=int(idx.size),
                               n_passes=int(n_passes))
    report.validate()
    return report


def report_lines(rep: CalibrationReport) -> list[str]:
    lines = [f"rmse={repr(rep.rmse)}", f"r2={repr(rep.r2)}",
             f"crps={repr(rep.crps)}", f"n_obs={rep.n_obs}",
             f"n_passes={rep.n_passes}"]
    if rep.pit_values.size:
        lines.append(f"pit_ks={repr(ks_uniform(rep.pit_values))}")
    if rep.pit_seed is not None:
        lines.append(f"pit_seed={rep.pit_seed}")
    for level in sorted(rep.coverage):
        lines.append(f"coverage.{level:g}={repr(rep.coverage[level])}")
    if rep.outlier_auc is not None:
        lines.append(f"outlier_auc={repr(rep.outlier_auc)}")
    return lines


def write_calibration_report(out_dir, rep: CalibrationReport) -> None:
    """report.txt (key=value) plus plot-ready coverage.csv and qq.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(report_lines(rep)) + "\n")
    with open(os.path.join(out_dir, "coverage.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("level,coverage\n")
        for level in sorted(rep.coverage):
            fh.write(f"{repr(float(level))},{repr(rep.coverage[level])}\n")
    with open(os.path.join(out_dir, "qq.csv"), "w", encoding="utf-8") as fh:
        fh.write("uniform_quantile,pit\n")
        for uq, p in zip(*qq_points(rep.pit_values)):
            fh.write(f"{repr(float(uq))},{repr(float(p))}\n")
