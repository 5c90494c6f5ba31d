"""Mini-batch maximum-likelihood training of both branches.

The loss head is analytic: the mixture NLL gradients w.r.t. (mu, sigma,
theta) are computed in closed form and seeded into the two layer graphs as
output adjoints, with the sigma softplus link and the theta logistic link
chained outside the graphs. Optimization is bias-corrected adaptive moments
with global-norm gradient clipping.

Reproducibility: every stochastic choice draws from a named substream of the
run seed, keyed per epoch ('shuffle', epoch) and ('dropout', epoch), so a run
resumed from a checkpoint at any epoch boundary replays the identical
trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mixture
from .data import ObservationTable, TerrainGrid, extract_patch, fold_mask
from .errors import NumericError, ParameterError, UsageError
from .network import (
    ModelGraph,
    Standardizer,
    features_for_table,
    fit_patch_standardizer,
    load_model,
    save_model,
    softplus_derivative,
    T_CONT_INDEX,
    _softplus64,
)
from .mixture import SIGMA_FLOOR
from .rng import named_stream

TRAIN_FOLDS = tuple(range(1, 9))
EVAL_FOLD = 9
TEST_FOLD = 10


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 512
    seed: int = 0
    shuffle: bool = True
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    likelihood: str = "mixture"  # or "gaussian" (ablation baseline)
    eval_theta: float = 0.95     # fixed mixing weight for unseen eval sites
    checkpoint_every: int = 0    # epochs between checkpoints; 0 = final only

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if self.likelihood not in ("mixture", "gaussian"):
            raise ParameterError(f"unknown likelihood '{self.likelihood}'")
        if not (0.0 < self.eval_theta <= 1.0):
            raise ParameterError("eval_theta must lie in (0, 1]")


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    st = AdamState(learning_rate, beta1, beta2, eps, 0)
    for key, arr in params.items():
        st.m[key] = np.zeros_like(arr)
        st.v[key] = np.zeros_like(arr)
    return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              st: AdamState) -> None:
    """One bias-corrected moment update, in place on the parameter arrays."""
    for key, g in grads.items():
        if key not in params:
            raise UsageError(f"gradient for unknown parameter '{key}'")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{key}'")
    st.step += 1
    b1c = 1.0 - st.beta1 ** st.step
    b2c = 1.0 - st.beta2 ** st.step
    for key, g in grads.items():
        p = params[key]
        g64 = np.asarray(g, dtype=np.float64)
        m = st.m[key].astype(np.float64) * st.beta1 + (1 - st.beta1) * g64
        v = st.v[key].astype(np.float64) * st.beta2 + (1 - st.beta2) * g64 * g64
        st.m[key][...] = m.astype(st.m[key].dtype)
        st.v[key][...] = v.astype(st.v[key].dtype)
        update = st.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + st.eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients jointly so their global L2 norm is <= max_norm."""
    sq = 0.0
    for g in grads.values():
        g64 = np.asarray(g, dtype=np.float64)
        sq += float(np.sum(g64 * g64))
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for key in grads:
            grads[key] = (grads[key].astype(np.float64) * scale).astype(
                grads[key].dtype)
    return norm


def model_params(model: ModelGraph) -> dict[str, np.ndarray]:
    out = {f"signal:{k}": v for k, v in model.signal.params().items()}
    out.update({f"outlier:{k}": v for k, v in model.outlier.params().items()})
    return out


def save_optimizer(st: AdamState, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for key in st.m:
        tensors[f"m:{key}"] = st.m[key]
    for key in st.v:
        tensors[f"v:{key}"] = st.v[key]
    ad.write_tensors(path, tensors, {
        "step": str(st.step),
        "learning_rate": repr(st.learning_rate),
        "beta1": repr(st.beta1), "beta2": repr(st.beta2),
        "eps": repr(st.eps),
    })


def load_optimizer(path, params: dict[str, np.ndarray]) -> AdamState:
    tensors, cfg = ad.read_tensors(path)
    st = AdamState(float(cfg["learning_rate"]), float(cfg["beta1"]),
                   float(cfg["beta2"]), float(cfg["eps"]), int(cfg["step"]))
    for key, arr in params.items():
        m = tensors.get(f"m:{key}")
        v = tensors.get(f"v:{key}")
        if m is None or v is None or m.shape != arr.shape:
            raise ParameterError(f"optimizer state missing or mismatched "
                                 f"for '{key}'")
        st.m[key] = m.astype(arr.dtype)
        st.v[key] = v.astype(arr.dtype)
    return st


# -- loss over both branches -----------------------------------------------


def batch_loss_and_grads(model: ModelGraph, x_patch, x_loc, onehot, t_std, y,
                         likelihood: str = "mixture", mode: str = "train",
                         rng: np.random.Generator | None = None, masks=None):
    """Joint NLL of one prepared batch and gradients for every parameter.

    Inputs are already standardized (x_patch, x_loc, t_std). Returns
    (nll_sum, grads keyed 'signal:...'/'outlier:...', dropout masks used).
    """
    tr = ad.forward(model.signal, {"patch": x_patch, "loc": x_loc},
                    mode=mode, rng=rng, masks=masks)
    mu = tr.values["mu_head"][:, 0].astype(np.float64)
    sraw = tr.values["sigma_head"][:, 0].astype(np.float64)
    sigma = _softplus64(sraw) + SIGMA_FLOOR
    y = np.asarray(y, dtype=np.float64)

    otr = None
    if likelihood == "mixture":
        otr = ad.forward(model.outlier,
                         {"site": onehot, "t": np.asarray(t_std)[:, None]})
        logit = (otr.values["site_beta"][:, 0].astype(np.float64)
                 + otr.values["time_out"][:, 0].astype(np.float64))
        theta = 1.0 / (1.0 + np.exp(-logit))
        nll, d_mu, d_sigma, d_theta = mixture.nll_and_grads(y, mu, sigma, theta)
        d_logit = d_theta * theta * (1.0 - theta)
    elif likelihood == "gaussian":
        nll, d_mu, d_sigma = mixture.gaussian_nll_and_grads(y, mu, sigma)
    else:
        raise UsageError(f"unknown likelihood '{likelihood}'")

    d_sraw = d_sigma * softplus_derivative(sraw)
    sgrads = ad.backward(model.signal, tr, {
        "mu_head": d_mu[:, None], "sigma_head": d_sraw[:, None]})
    grads = {f"signal:{k}": v for k, v in sgrads.items() if "/" in k}
    if otr is not None:
        ograds = ad.backward(model.outlier, otr, {
            "site_beta": d_logit[:, None], "time_out": d_logit[:, None]})
        grads.update({f"outlier:{k}": v for k, v in ograds.items()
                      if "/" in k})
    return nll, grads, tr.masks


# -- training loop -----------------------------------------------------------


@dataclass
class PreparedData:
    """Standardized per-row arrays the epoch loop consumes."""

    x_patch_by_site: np.ndarray   # (n_sites_all, 1, P, P) standardized f32
    site_pos: np.ndarray          # row -> index into x_patch_by_site
    x_loc: np.ndarray             # (n, 6) standardized
    t_std: np.ndarray             # (n,) standardized t_cont
    onehot_col: np.ndarray        # row -> outlier one-hot column, -1 unknown
    y: np.ndarray


def prepare_features(model: ModelGraph, table: ObservationTable,
                     grid: TerrainGrid, fit_mask: np.ndarray | None = None
                     ) -> PreparedData:
    """Patch cache, location features and one-hot columns for every row.

    When fit_mask is given the standardizers are (re)fit on those rows first;
    otherwise the model's stored statistics are used as-is.
    """
    if fit_mask is not None:
        fit_patch_standardizer(model, grid)
    sites, site_pos = np.unique(table.site_id, return_inverse=True)
    cfg = model.cfg
    cache = np.empty((len(sites), 1, cfg.patch_size, cfg.patch_size),
                     dtype=np.float64)
    first_row = {s: i for i, s in
                 zip(range(len(table) - 1, -1, -1), table.site_id[::-1])}
    for k, s in enumerate(sites):
        r = first_row[s]
        cache[k, 0] = extract_patch(grid, table.easting[r], table.northing[r],
                                    cfg.patch_size, cfg.patch_cell_m)
    cache = ((cache - model.patch_mean) / model.patch_scale).astype(
        model.signal.dtype)

    loc = features_for_table(model, table, grid)
    if fit_mask is not None:
        model.loc_standardizer = Standardizer.fit(loc[fit_mask])
    x_loc = model.loc_standardizer.transform(loc).astype(model.signal.dtype)
    t_std = x_loc[:, T_CONT_INDEX].astype(np.float64)

    onehot_col = np.asarray(
        [model.site_index.get(s, -1) for s in table.site_id], dtype=np.int64)
    return PreparedData(cache, site_pos, x_loc, t_std, onehot_col,
                        table.temp_c.astype(np.float64))


def _onehot(cols: np.ndarray, width: int, dtype) -> np.ndarray:
    out = np.zeros((len(cols), width), dtype=dtype)
    out[np.arange(len(cols)), cols] = 1.0
    return out


@dataclass
class TrainResult:
    model: ModelGraph
    state: AdamState
    history: dict
    n_train: int
    n_eval: int


def evaluate_nll(model: ModelGraph, prep: PreparedData, idx: np.ndarray,
                 likelihood: str, eval_theta: float,
                 batch_size: int = 2048) -> float:
    """Mean NLL on rows `idx`, deterministic forward, theta held fixed."""
    total = 0.0
    for k in range(0, len(idx), batch_size):
        b = idx[k:k + batch_size]
        tr = ad.forward(model.signal, {
            "patch": prep.x_patch_by_site[prep.site_pos[b]],
            "loc": prep.x_loc[b]})
        mu = tr.values["mu_head"][:, 0].astype(np.float64)
        sigma = _softplus64(tr.values["sigma_head"][:, 0].astype(np.float64)) \
            + SIGMA_FLOOR
        if likelihood == "mixture":
            theta = np.full_like(mu, eval_theta)
            total += float(-np.sum(mixture._mixture_log_density_arrays(
                prep.y[b], mu, sigma, theta)))
        else:
            total += mixture.gaussian_nll_and_grads(prep.y[b], mu, sigma)[0]
    return total / max(len(idx), 1)


def train(model: ModelGraph, table: ObservationTable, grid: TerrainGrid,
          tc: TrainConfig, out_dir=None, resume_from=None,
          train_folds=TRAIN_FOLDS, eval_fold: int = EVAL_FOLD) -> TrainResult:
    """Full epoch loop; returns the trained model plus loss history.

    Aborts with the last completed epoch's parameters restored (and, when
    out_dir is set, its checkpoint already on disk) if the loss goes
    non-finite.
    """
    tc.validate()
    if np.all(table.fold == 0):
        raise ParameterError("observation table has no fold assignment")
    train_idx = np.flatnonzero(fold_mask(table, train_folds))
    eval_idx = np.flatnonzero(fold_mask(table, [eval_fold]))
    if len(train_idx) == 0:
        raise ParameterError("no training rows in the requested folds")

    train_sites = set(np.unique(table.site_id[train_idx]))
    if train_sites != set(model.site_ids):
        raise ParameterError(
            "model site list does not match the training folds' sites")

    model.epoch_seconds = int(table.epoch_seconds.min())
    window = (int(table.epoch_seconds.min()), int(table.epoch_seconds.max()))
    prep = prepare_features(model, table, grid,
                            fit_mask=fold_mask(table, train_folds))
    params = model_params(model)
    state = adam_init(params, learning_rate=tc.learning_rate)

    start_epoch = 0
    if resume_from is not None:
        start_epoch = _load_checkpoint_into(model, resume_from)
        params = model_params(model)
        state = load_optimizer(_opt_path(resume_from), params)

    onehot_width = len(model.site_ids)
    history: dict[str, list] = {"epoch": [], "train_nll": [], "eval_nll": [],
                                "wall_seconds": []}
    log_path = None
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.log")
        if start_epoch == 0 and os.path.exists(log_path):
            os.remove(log_path)

    snapshot = {k: v.copy() for k, v in params.items()}
    n_train = len(train_idx)
    for epoch in range(start_epoch + 1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = train_idx
        if tc.shuffle:
            perm = named_stream(tc.seed, "shuffle", epoch).permutation(n_train)
            order = train_idx[perm]
        drng = named_stream(tc.seed, "dropout", epoch)
        total_nll = 0.0
        for k in range(0, n_train, tc.batch_size):
            b = order[k:k + tc.batch_size]
            onehot = _onehot(prep.onehot_col[b], onehot_width,
                             model.outlier.dtype)
            nll, grads, _ = batch_loss_and_grads(
                model, prep.x_patch_by_site[prep.site_pos[b]],
                prep.x_loc[b], onehot, prep.t_std[b], prep.y[b],
                likelihood=tc.likelihood, mode="train", rng=drng)
            if not np.isfinite(nll):
                for key, arr in params.items():
                    arr[...] = snapshot[key]
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}; parameters "
                    f"restored to the end of epoch {epoch - 1}")
            clip_global_norm(grads, tc.clip_norm)
            adam_step(params, grads, state)
            total_nll += nll

        train_nll = total_nll / n_train
        eval_nll = (evaluate_nll(model, prep, eval_idx, tc.likelihood,
                                 tc.eval_theta)
                    if len(eval_idx) else float("nan"))
        wall = time.perf_counter() - t0
        history["epoch"].append(epoch)
        history["train_nll"].append(train_nll)
        history["eval_nll"].append(eval_nll)
        history["wall_seconds"].append(wall)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"epoch={epoch:04d} train_nll={train_nll:.6f} "
                         f"eval_nll={eval_nll:.6f} wall_seconds={wall:.3f}\n")
        snapshot = {k: v.copy() for k, v in params.items()}

        if (out_dir is not None and tc.checkpoint_every > 0
                and epoch % tc.checkpoint_every == 0 and epoch < tc.epochs):
            _save_checkpoint(model, state, out_dir, epoch, tc, window)

    if out_dir is not None:
        _save_checkpoint(model, state, out_dir, tc.epochs, tc, window,
                         final=True)
    return TrainResult(model, state, history, n_train, len(eval_idx))


def _opt_path(model_path) -> str:
    return str(model_path) + ".opt"


def _save_checkpoint(model: ModelGraph, state: AdamState, out_dir,
                     epoch: int, tc: TrainConfig, window: tuple[int, int],
                     final: bool = False) -> None:
    import os
    name = "model.mtx" if final else f"checkpoint-{epoch:04d}.mtx"
    path = os.path.join(out_dir, name)
    save_model(model, path, extra={"epoch": str(epoch), "seed": str(tc.seed),
                                   "likelihood": tc.likelihood,
                                   "t_min_epoch": str(window[0]),
                                   "t_max_epoch": str(window[1])})
    save_optimizer(state, _opt_path(path))


def _load_checkpoint_into(model: ModelGraph, path) -> int:
    loaded, cfg = load_model(path)
    if loaded.site_ids != model.site_ids:
        raise ParameterError("checkpoint site list differs from the dataset")
    for key, arr in loaded.signal.params().items():
        model.signal.set_param(key, arr)
    for key, arr in loaded.outlier.params().items():
        model.outlier.set_param(key, arr)
    model.loc_standardizer = loaded.loc_standardizer
    model.patch_mean = loaded.patch_mean
    model.patch_scale = loaded.patch_scale
    model.epoch_seconds = loaded.epoch_seconds
    return int(cfg["epoch"])
