"""Flat key=value run configuration shared by every command.

One namespace-dotted key per knob, no nesting, no quoting. Unknown keys are
rejected so typos fail loudly, and the fully resolved config echoes back out
byte-stably: format -> parse -> format is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .network import NetworkConfig
from .synthetic import SyntheticWorldConfig
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected 'true' or 'false'")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",")) if text else ()


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",")) if text else ()


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _fmt_ints(v) -> str:
    return ",".join(str(int(x)) for x in v)


def _fmt_floats(v) -> str:
    return ",".join(repr(float(x)) for x in v)


@dataclass(frozen=True)
class _Key:
    parse: callable
    fmt: callable
    default: object


_INT = lambda d: _Key(int, str, d)                    # noqa: E731
_FLOAT = lambda d: _Key(float, _fmt_float, d)         # noqa: E731
_STR = lambda d: _Key(str, str, d)                    # noqa: E731
_BOOL = lambda d: _Key(_parse_bool, _fmt_bool, d)     # noqa: E731
_INTS = lambda d: _Key(_parse_ints, _fmt_ints, d)     # noqa: E731
_FLOATS = lambda d: _Key(_parse_floats, _fmt_floats, d)  # noqa: E731

SCHEMA: dict[str, _Key] = {
    "seed": _INT(0),
    # input/output file names; relative paths resolve against the cwd
    "paths.dem": _STR("dem.asc"),
    "paths.observations": _STR("observations.csv"),
    "paths.truth": _STR("truth.csv"),
    "paths.model": _STR("model.mtx"),
    # synthetic world
    "synth.extent_m": _FLOAT(200_000.0),
    "synth.dem_cells": _INT(256),
    "synth.n_sites": _INT(200),
    "synth.days": _INT(3),
    "synth.obs_per_hour": _INT(1),
    "synth.contamination_rate": _FLOAT(0.05),
    "synth.noise_sd": _FLOAT(0.8),
    # network
    "net.conv_channels": _INTS((16, 32, 64)),
    "net.dense_widths": _INTS((128, 128, 64)),
    "net.outlier_hidden": _INT(16),
    "net.dropout_rate": _FLOAT(0.5),
    "net.patch_size": _INT(32),
    "net.patch_cell_m": _FLOAT(500.0),
    # training
    "train.epochs": _INT(600),
    "train.batch_size": _INT(512),
    "train.learning_rate": _FLOAT(1e-3),
    "train.clip_norm": _FLOAT(10.0),
    "train.likelihood": _STR("mixture"),
    "train.eval_theta": _FLOAT(0.95),
    "train.checkpoint_every": _INT(0),
    "train.shuffle": _BOOL(True),
    "data.subsample_hourly": _BOOL(False),
    # fold protocol (site-stratified; derived from the run seed, not stored)
    "folds.k": _INT(10),
    "folds.train": _INTS((1, 2, 3, 4, 5, 6, 7, 8)),
    "folds.eval": _INT(9),
    "folds.test": _INT(10),
    # evaluation / sampling
    "eval.n_passes": _INT(50),
    "eval.levels": _FLOATS((0.5, 0.8, 0.9, 0.95)),
    # map products; empty bbox means the full DEM extent
    "grid.bbox": _FLOATS(()),
    "grid.resolution_m": _FLOAT(1_000.0),
    "grid.time": _STR(""),
    "grid.quantiles": _FLOATS(()),
    "grid.realisations": _INT(0),
    "grid.include_aleatoric": _BOOL(False),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key '{key}'")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        entry = SCHEMA.get(key)
        if entry is None:
            raise ConfigError(f"unknown config key '{key}'")
        try:
            self.values[key] = entry.parse(raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for '{key}': {e}") from e


def default_config() -> RunConfig:
    return RunConfig({k: entry.default for k, entry in SCHEMA.items()})


def parse_kv_lines(text: str, source: str = "<config>") -> dict[str, str]:
    """key=value per line; blank lines and #-comments allowed; duplicates
    and lines without '=' are errors."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, "
                              f"got '{line}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        pairs[key] = value.strip()
    return pairs


def resolve(*overlays: dict[str, str]) -> RunConfig:
    """Defaults overridden by each overlay in turn; later overlays win."""
    cfg = default_config()
    for pairs in overlays:
        for key, raw in pairs.items():
            cfg.set(key, raw)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    return resolve(parse_kv_lines(text, source=str(path)))


def format_config(cfg: RunConfig) -> str:
    lines = [f"{key}={SCHEMA[key].fmt(cfg.values[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


# -- materializers for the module-level config types -------------------------


def synth_config(cfg: RunConfig) -> SyntheticWorldConfig:
    return SyntheticWorldConfig(
        extent_m=cfg["synth.extent_m"],
        dem_cells=cfg["synth.dem_cells"],
        n_sites=cfg["synth.n_sites"],
        days=cfg["synth.days"],
        obs_per_site_per_hour=cfg["synth.obs_per_hour"],
        contamination_rate=cfg["synth.contamination_rate"],
        noise_sd=cfg["synth.noise_sd"],
        seed=cfg["seed"],
    )


def net_config(cfg: RunConfig) -> NetworkConfig:
    return NetworkConfig(
        conv_channels=cfg["net.conv_channels"],
        dense_widths=cfg["net.dense_widths"],
        outlier_hidden=cfg["net.outlier_hidden"],
        dropout_rate=cfg["net.dropout_rate"],
        patch_size=cfg["net.patch_size"],
        patch_cell_m=cfg["net.patch_cell_m"],
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
        shuffle=cfg["train.shuffle"],
        learning_rate=cfg["train.learning_rate"],
        clip_norm=cfg["train.clip_norm"],
        likelihood=cfg["train.likelihood"],
        eval_theta=cfg["train.eval_theta"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )
