"""Command-line front door: synth, train, evaluate, grid, detect-outliers.

Every command resolves one flat key=value config (defaults, then --config
file, then --set overrides, then --seed), echoes it beside its outputs, and
derives all randomness from the run seed via named sub-streams. Relative
paths in the config are taken relative to --out, so a single directory holds
a whole reproducible run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import (format_timestamp, load_observations, parse_timestamp,
                   read_ascii_grid, split_folds_by_site, subsample_hourly,
                   write_ascii_grid, write_observations)
from .errors import ConfigError, MixterpError
from .evaluation import evaluate_model, score_sites, write_calibration_report
from .inference import grid_queries, predict_grid, sample_realisation
from .network import build_model, load_model
from .rng import named_stream
from .synthetic import generate_observations, generate_world
from .training import train


def _path(out_dir: Path, raw: str) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else out_dir / p


def _overlay_from_sets(pairs: list[str]) -> dict[str, str]:
    overlay: dict[str, str] = {}
    for item in pairs:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        overlay[key.strip()] = raw.strip()
    return overlay


def _resolve(args) -> tuple[cfgmod.RunConfig, Path]:
    if args.config is not None:
        rc = cfgmod.load_config(args.config)
    else:
        rc = cfgmod.default_config()
    for key, raw in _overlay_from_sets(args.set or []).items():
        rc.set(key, raw)
    if args.seed is not None:
        rc.set("seed", str(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return rc, out


def _echo_config(rc: cfgmod.RunConfig, out: Path, command: str) -> None:
    path = out / f"config-{command}.txt"
    path.write_text(cfgmod.format_config(rc), encoding="utf-8")


def _load_dataset(rc: cfgmod.RunConfig, out: Path):
    """DEM + observations with folds re-derived from the run seed.

    Folds are never persisted in the CSV; the same seed always deals the
    same site->fold assignment, so every command agrees on the split.
    """
    grid = read_ascii_grid(_path(out, rc["paths.dem"]))
    table, _ = load_observations(_path(out, rc["paths.observations"]))
    if rc["data.subsample_hourly"]:
        table = subsample_hourly(table, named_stream(rc["seed"], "subsample"))
    table = split_folds_by_site(table, rc["folds.k"],
                                named_stream(rc["seed"], "folds"))
    return grid, table


# -- commands -----------------------------------------------------------------


def cmd_synth(rc: cfgmod.RunConfig, out: Path, args) -> None:
    sc = cfgmod.synth_config(rc)
    grid, truth = generate_world(sc)
    table, clean, _ = generate_observations(grid, truth, sc,
                                            named_stream(sc.seed, "obs"))
    write_ascii_grid(_path(out, rc["paths.dem"]), grid)
    write_observations(_path(out, rc["paths.observations"]), table)
    with open(_path(out, rc["paths.truth"]), "w", encoding="utf-8",
              newline="") as fh:
        fh.write("site_id,timestamp,true_temp_c\n")
        for i in range(len(table)):
            fh.write(f"{table.site_id[i]},"
                     f"{format_timestamp(table.epoch_seconds[i])},"
                     f"{repr(float(clean[i]))}\n")
    print(f"synth: {len(table)} observations at {sc.n_sites} sites -> {out}")


def cmd_train(rc: cfgmod.RunConfig, out: Path, args) -> None:
    grid, table = _load_dataset(rc, out)
    train_folds = rc["folds.train"]
    mask = np.isin(table.fold, train_folds)
    site_ids = tuple(np.unique(table.site_id[mask]))
    model = build_model(cfgmod.net_config(rc), site_ids, seed=rc["seed"])
    tc = cfgmod.train_config(rc)
    result = train(model, table, grid, tc, out_dir=out,
                   resume_from=args.resume,
                   train_folds=train_folds, eval_fold=rc["folds.eval"])
    print(f"train: {tc.epochs} epochs, "
          f"final eval_nll={result.history['eval_nll'][-1]:.6f} -> {out}")


def cmd_evaluate(rc: cfgmod.RunConfig, out: Path, args) -> None:
    model, _ = load_model(_path(out, rc["paths.model"]))
    grid, table = _load_dataset(rc, out)
    fold = rc["folds.test"] if args.fold is None else args.fold
    rep = evaluate_model(model, table, grid, fold,
                         n_passes=rc["eval.n_passes"], seed=rc["seed"],
                         levels=rc["eval.levels"],
                         auc_folds=rc["folds.train"])
    write_calibration_report(out, rep)
    print(f"evaluate: fold {fold}, rmse={rep.rmse:.4f} r2={rep.r2:.4f} "
          f"crps={rep.crps:.4f} -> {out}")


def _window_flag(extras: dict[str, str], epoch: int) -> list[str]:
    lines = []
    t_min = extras.get("t_min_epoch")
    t_max = extras.get("t_max_epoch")
    if t_min is None or t_max is None:
        lines.append("within_window=unknown")
    else:
        inside = int(t_min) <= epoch <= int(t_max)
        lines.append(f"within_window={'true' if inside else 'false'}")
        lines.append(f"window_start={format_timestamp(int(t_min))}")
        lines.append(f"window_end={format_timestamp(int(t_max))}")
        if not inside:
            print("warning: requested time lies outside the training "
                  "window; interpolation validity is not guaranteed",
                  file=sys.stderr)
    return lines


def cmd_grid(rc: cfgmod.RunConfig, out: Path, args) -> None:
    model, extras = load_model(_path(out, rc["paths.model"]))
    grid = read_ascii_grid(_path(out, rc["paths.dem"]))
    if not rc["grid.time"]:
        raise ConfigError("grid.time is required (ISO-8601 instant)")
    epoch = parse_timestamp(rc["grid.time"])
    bbox = rc["grid.bbox"] or grid.extent
    seed = rc["seed"]

    fields = predict_grid(model, grid, bbox, rc["grid.resolution_m"], epoch,
                          n_passes=rc["eval.n_passes"],
                          rng=named_stream(seed, "grid-mc"),
                          quantile_levels=rc["grid.quantiles"])
    for name, raster in fields.items():
        write_ascii_grid(out / f"{name}.asc", raster)

    n_real = rc["grid.realisations"]
    if n_real:
        lat = grid_queries(model, grid, bbox, rc["grid.resolution_m"], epoch)
        for k in range(1, n_real + 1):
            y = sample_realisation(
                model, lat.queries, named_stream(seed, "real", k),
                include_aleatoric=rc["grid.include_aleatoric"])
            write_ascii_grid(out / f"realisation-{k:02d}.asc", lat.raster(y))

    meta = [f"time={format_timestamp(epoch)}", f"epoch_seconds={epoch}",
            *_window_flag(extras, epoch)]
    (out / "grid-meta.txt").write_text("\n".join(meta) + "\n",
                                       encoding="utf-8")
    print(f"grid: {len(fields)} summary rasters, {n_real} realisations "
          f"-> {out}")


def cmd_detect_outliers(rc: cfgmod.RunConfig, out: Path, args) -> None:
    model, _ = load_model(_path(out, rc["paths.model"]))
    grid = read_ascii_grid(_path(out, rc["paths.dem"]))
    table, _ = load_observations(_path(out, rc["paths.observations"]))
    rep = score_sites(model, table, grid)

    kept = table.take(rep.kept_rows)
    with open(out / "responsibilities.csv", "w", encoding="utf-8",
              newline="") as fh:
        fh.write("site_id,timestamp,temp_c,responsibility,theta\n")
        for i in range(len(kept)):
            fh.write(f"{kept.site_id[i]},"
                     f"{format_timestamp(kept.epoch_seconds[i])},"
                     f"{repr(float(kept.temp_c[i]))},"
                     f"{repr(float(rep.per_row_resp[i]))},"
                     f"{repr(float(rep.per_row_theta[i]))}\n")

    _, counts = np.unique(kept.site_id, return_counts=True)
    with open(out / "site_scores.csv", "w", encoding="utf-8",
              newline="") as fh:
        cols = "site_id,mean_responsibility,n_obs"
        fh.write(cols + (",label\n" if rep.site_label is not None else "\n"))
        for i, site in enumerate(rep.sites):
            row = (f"{site},{repr(float(rep.site_mean[i]))},"
                   f"{int(counts[i])}")
            if rep.site_label is not None:
                row += f",{int(rep.site_label[i])}"
            fh.write(row + "\n")

    (out / "skipped_sites.txt").write_text(
        "".join(f"{s}\n" for s in rep.skipped_sites), encoding="utf-8")
    print(f"detect-outliers: {len(rep.sites)} sites scored, "
          f"{len(rep.skipped_sites)} skipped -> {out}")


# -- argument parsing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default=".", metavar="DIR",
                        help="run directory for outputs and relative paths")

    p = argparse.ArgumentParser(
        prog="mixterp",
        description="Mixture-density interpolation of surface temperatures")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common],
                        help="generate a synthetic DEM + observation set")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", parents=[common],
                        help="train the mixture model on the train folds")
    sp.add_argument("--resume", metavar="CHECKPOINT",
                    help="continue from a saved checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", parents=[common],
                        help="calibration report on a held-out fold")
    sp.add_argument("--fold", type=int,
                    help="fold to score (default: folds.test)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grid", parents=[common],
                        help="predictive rasters at one time instant")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("detect-outliers", parents=[common],
                        help="per-site outlier responsibilities")
    sp.set_defaults(func=cmd_detect_outliers)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        rc, out = _resolve(args)
        _echo_config(rc, out, args.command)
        args.func(rc, out, args)
    except MixterpError as e:
        print(f"error category={e.category} message={e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error category=io message={e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
