"""Observation tables, terrain rasters, patch extraction, and fold protocol.

Observations arrive as UTF-8 CSV with header
site_id,timestamp,easting_m,northing_m,temp_c[,outlier_label]; timestamps are
ISO-8601 UTC. Rasters are ESRI ASCII grids (north-to-south row order).
Coordinates are planar metres as given; nothing here reprojects.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .errors import DataFormatError, ParameterError, UsageError

REQUIRED_COLUMNS = ("site_id", "timestamp", "easting_m", "northing_m", "temp_c")
LABEL_COLUMN = "outlier_label"


def parse_timestamp(text: str) -> int:
    """ISO-8601 UTC instant -> epoch seconds. Naive stamps are taken as UTC."""
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch_seconds: int) -> str:
    dt = datetime.fromtimestamp(int(epoch_seconds), tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class ObservationTable:
    """Column-store of observations; `fold` is 0 until folds are assigned."""

    site_id: np.ndarray          # unicode
    epoch_seconds: np.ndarray    # int64
    easting: np.ndarray          # float64, metres
    northing: np.ndarray         # float64, metres
    temp_c: np.ndarray           # float64
    fold: np.ndarray = field(default=None)          # int64 in 0..k
    outlier_label: np.ndarray | None = None         # int64 0/1, synthetic only

    def __post_init__(self):
        n = len(self.site_id)
        if self.fold is None:
            self.fold = np.zeros(n, dtype=np.int64)
        for arr in (self.epoch_seconds, self.easting, self.northing,
                    self.temp_c, self.fold):
            if len(arr) != n:
                raise UsageError("observation columns have unequal lengths")
        if self.outlier_label is not None and len(self.outlier_label) != n:
            raise UsageError("outlier_label length mismatch")

    def __len__(self) -> int:
        return len(self.site_id)

    def take(self, idx) -> "ObservationTable":
        lbl = None if self.outlier_label is None else self.outlier_label[idx]
        return ObservationTable(self.site_id[idx], self.epoch_seconds[idx],
                                self.easting[idx], self.northing[idx],
                                self.temp_c[idx], self.fold[idx], lbl)

    @property
    def minute_of_day(self) -> np.ndarray:
        return (self.epoch_seconds // 60) % 1440


@dataclass(frozen=True)
class RowReport:
    """What the loader rejected: total count plus the first few reasons."""

    n_rejected: int
    reasons: tuple[str, ...]


def load_observations(path) -> tuple[ObservationTable, RowReport]:
    """Parse the observations CSV; malformed rows are counted, not fatal."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise DataFormatError(f"cannot open observations file: {e}") from e
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(
                f"{path}: missing required columns {missing}")
        has_label = LABEL_COLUMN in header

        sites, secs, xs, ys, temps, labels = [], [], [], [], [], []
        rejected: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = (row["site_id"] or "").strip()
                if not sid:
                    raise ValueError("empty site_id")
                t = parse_timestamp(row["timestamp"])
                x = float(row["easting_m"])
                y = float(row["northing_m"])
                temp = float(row["temp_c"])
                if not (math.isfinite(x) and math.isfinite(y)
                        and math.isfinite(temp)):
                    raise ValueError("non-finite numeric field")
                lbl = 0
                if has_label:
                    lbl = int(row[LABEL_COLUMN])
                    if lbl not in (0, 1):
                        raise ValueError("outlier_label must be 0 or 1")
            except (ValueError, TypeError, KeyError) as e:
                rejected.append(f"line {lineno}: {e}")
                continue
            sites.append(sid)
            secs.append(t)
            xs.append(x)
            ys.append(y)
            temps.append(temp)
            labels.append(lbl)

    table = ObservationTable(
        np.asarray(sites, dtype=str),
        np.asarray(secs, dtype=np.int64),
        np.asarray(xs, dtype=np.float64),
        np.asarray(ys, dtype=np.float64),
        np.asarray(temps, dtype=np.float64),
        outlier_label=np.asarray(labels, dtype=np.int64) if has_label else None,
    )
    return table, RowReport(len(rejected), tuple(rejected[:10]))


def write_observations(path, table: ObservationTable) -> None:
    """Inverse of load_observations; float formatting is shortest-round-trip
    so identical tables always serialize byte-identically."""
    cols = list(REQUIRED_COLUMNS)
    if table.outlier_label is not None:
        cols.append(LABEL_COLUMN)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(table)):
            parts = [str(table.site_id[i]),
                     format_timestamp(table.epoch_seconds[i]),
                     repr(float(table.easting[i])),
                     repr(float(table.northing[i])),
                     repr(float(table.temp_c[i]))]
            if table.outlier_label is not None:
                parts.append(str(int(table.outlier_label[i])))
            fh.write(",".join(parts) + "\n")


# -- terrain raster ------------------------------------------------------------


@dataclass
class TerrainGrid:
    """ESRI-ASCII-shaped elevation raster. values[0] is the northernmost row."""

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: np.ndarray  # (nrows, ncols) float64

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1 or self.cellsize <= 0:
            raise DataFormatError("grid dimensions must be positive")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.nrows, self.ncols):
            raise DataFormatError(
                f"grid values shape {self.values.shape} != "
                f"({self.nrows}, {self.ncols})")

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.xll, self.yll,
                self.xll + self.ncols * self.cellsize,
                self.yll + self.nrows * self.cellsize)

    def finite_values(self) -> np.ndarray:
        v = self.values.ravel()
        return v[v != self.nodata]


def read_ascii_grid(path) -> TerrainGrid:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tokens = fh.read().split()
    except OSError as e:
        raise DataFormatError(f"cannot open raster: {e}") from e
    header: dict[str, float] = {}
    pos = 0
    keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize",
            "nodata_value"}
    while pos + 1 < len(tokens) and tokens[pos].lower() in keys:
        try:
            header[tokens[pos].lower()] = float(tokens[pos + 1])
        except ValueError as e:
            raise DataFormatError(f"{path}: bad header value "
                                  f"for {tokens[pos]}") from e
        pos += 2
    for req in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if req not in header:
            raise DataFormatError(f"{path}: missing raster header '{req}'")
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    body = tokens[pos:]
    if len(body) != ncols * nrows:
        raise DataFormatError(f"{path}: expected {ncols * nrows} cell values, "
                              f"found {len(body)}")
    try:
        vals = np.asarray(body, dtype=np.float64).reshape(nrows, ncols)
    except ValueError as e:
        raise DataFormatError(f"{path}: non-numeric cell value") from e
    return TerrainGrid(ncols, nrows, header["xllcorner"], header["yllcorner"],
                       header["cellsize"], header.get("nodata_value", -9999.0),
                       vals)


def write_ascii_grid(path, grid: TerrainGrid) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {grid.ncols}\n")
        fh.write(f"nrows {grid.nrows}\n")
        fh.write(f"xllcorner {repr(float(grid.xll))}\n")
        fh.write(f"yllcorner {repr(float(grid.yll))}\n")
        fh.write(f"cellsize {repr(float(grid.cellsize))}\n")
        fh.write(f"NODATA_value {repr(float(grid.nodata))}\n")
        for row in grid.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# -- sampling ------------------------------------------------------------------


def _bilinear_masked(grid: TerrainGrid, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear blend of the four surrounding cell centres plus validity mask.

    Points outside the raster extent, or whose blend touches a nodata cell,
    are flagged invalid (value undefined there). Queries between the boundary
    and the outermost cell centres clamp to the edge centres.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0, y0, x1, y1 = grid.extent
    ok = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    u = np.clip((x - grid.xll) / grid.cellsize - 0.5, 0.0, grid.ncols - 1.0)
    v = np.clip((y - grid.yll) / grid.cellsize - 0.5, 0.0, grid.nrows - 1.0)
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    c1 = np.minimum(c0 + 1, grid.ncols - 1)
    r1 = np.minimum(r0 + 1, grid.nrows - 1)
    wx = u - c0
    wy = v - r0

    vals = grid.values
    top = grid.nrows - 1  # v counts rows from the south edge

    def cell(rr, cc):
        return vals[top - rr, cc]

    q00, q01 = cell(r0, c0), cell(r0, c1)
    q10, q11 = cell(r1, c0), cell(r1, c1)
    nod = grid.nodata
    # a nodata corner only invalidates the blend if it carries weight
    for q, w in ((q00, (1 - wx) * (1 - wy)), (q01, wx * (1 - wy)),
                 (q10, (1 - wx) * wy), (q11, wx * wy)):
        ok = ok & ~((q == nod) & (w > 0))
    out = (q00 * (1 - wx) * (1 - wy) + q01 * wx * (1 - wy)
           + q10 * (1 - wx) * wy + q11 * wx * wy)
    return out, ok


def bilinear_sample(grid: TerrainGrid, x, y):
    """Bilinearly interpolated elevation at (x, y); errors outside the extent."""
    vals, ok = _bilinear_masked(grid, x, y)
    if not np.all(ok):
        raise ParameterError("bilinear_sample: query outside raster extent "
                             "(or over nodata)")
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(vals)
    return vals


def sample_or_fill(grid: TerrainGrid, x, y, fill: float = 0.0) -> np.ndarray:
    """Bilinear sample with out-of-extent / nodata points replaced by `fill`."""
    vals, ok = _bilinear_masked(grid, x, y)
    return np.where(ok, vals, fill)


def extract_patch(grid: TerrainGrid, center_x: float, center_y: float,
                  size: int = 32, cell: float = 500.0) -> np.ndarray:
    """size x size elevation patch on a `cell`-spaced lattice centred on the
    query point; row 0 is the northernmost. Out-of-extent and nodata samples
    are filled with 0 m (sea level)."""
    offsets = (np.arange(size) - (size - 1) / 2.0) * cell
    xs = center_x + offsets[None, :]
    ys = center_y - offsets[:, None]  # descending northing down the rows
    vals, ok = _bilinear_masked(grid, np.broadcast_to(xs, (size, size)),
                                np.broadcast_to(ys, (size, size)))
    return np.where(ok, vals, 0.0)


# -- temporal and fold protocol -------------------------------------------------


def subsample_hourly(table: ObservationTable,
                     rng: np.random.Generator) -> ObservationTable:
    """Keep one uniformly chosen row per (site, calendar hour) group.

    Hours are truncated, not rounded. Output preserves original row order.
    """
    if len(table) == 0:
        return table
    hours = table.epoch_seconds // 3600
    sites, site_code = np.unique(table.site_id, return_inverse=True)
    order = np.lexsort((np.arange(len(table)), hours, site_code))
    keep: list[int] = []
    i = 0
    sc, hr = site_code[order], hours[order]
    while i < len(order):
        j = i
        while j < len(order) and sc[j] == sc[i] and hr[j] == hr[i]:
            j += 1
        keep.append(order[i + int(rng.integers(j - i))])
        i = j
    return table.take(np.sort(np.asarray(keep, dtype=np.int64)))


def split_folds_by_site(table: ObservationTable, k: int = 10,
                        rng: np.random.Generator | None = None
                        ) -> ObservationTable:
    """Shuffle sites and deal them round-robin into folds 1..k.

    Fold sizes differ by at most one site; every row of a site shares its
    fold. `rng=None` deals sites in sorted order (still a valid split).
    """
    if k < 2:
        raise ParameterError(f"fold count must be >= 2, got {k}")
    sites = np.unique(table.site_id)
    if len(sites) < k:
        raise ParameterError(
            f"need at least {k} sites for {k} folds, got {len(sites)}")
    order = np.arange(len(sites))
    if rng is not None:
        order = rng.permutation(len(sites))
    fold_of = {sites[order[i]]: (i % k) + 1 for i in range(len(sites))}
    folds = np.asarray([fold_of[s] for s in table.site_id], dtype=np.int64)
    return replace(table, fold=folds)


def fold_mask(table: ObservationTable, folds) -> np.ndarray:
    wanted = {int(f) for f in folds}
    return np.isin(table.fold, sorted(wanted))
