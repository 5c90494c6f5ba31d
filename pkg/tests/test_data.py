"""CSV ingestion, ESRI ASCII raster IO, bilinear patches, folds, subsampling."""

import numpy as np
import pytest

from mixterp import data as d
from mixterp.errors import DataFormatError, ParameterError


def _write(tmp_path, text, name="obs.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


HEADER = "site_id,timestamp,easting_m,northing_m,temp_c\n"


def test_load_three_valid_rows(tmp_path):
    p = _write(tmp_path, HEADER
               + "A,2024-06-01T00:00:00Z,1000,2000,10.5\n"
               + "B,2024-06-01T00:30:00Z,1500,2500,11.0\n"
               + "A,2024-06-01T01:00:00Z,1000,2000,9.75\n")
    table, report = d.load_observations(p)
    assert len(table) == 3
    assert report.n_rejected == 0
    assert table.outlier_label is None
    assert list(table.site_id) == ["A", "B", "A"]
    np.testing.assert_allclose(table.temp_c, [10.5, 11.0, 9.75])


def test_load_rejects_bad_temp_counted(tmp_path):
    p = _write(tmp_path, HEADER
               + "A,2024-06-01T00:00:00Z,1000,2000,abc\n"
               + "B,2024-06-01T00:00:00Z,1000,2000,5.0\n")
    table, report = d.load_observations(p)
    assert len(table) == 1
    assert report.n_rejected == 1
    assert "line 2" in report.reasons[0]


def test_load_rejects_bad_timestamp_and_label(tmp_path):
    p = _write(tmp_path,
               "site_id,timestamp,easting_m,northing_m,temp_c,outlier_label\n"
               + "A,not-a-time,1,2,3,0\n"
               + "B,2024-06-01T00:00:00Z,1,2,3,7\n"
               + "C,2024-06-01T00:00:00Z,1,2,3,1\n")
    table, report = d.load_observations(p)
    assert len(table) == 1
    assert report.n_rejected == 2
    assert table.outlier_label is not None and table.outlier_label[0] == 1


def test_load_empty_file_with_header(tmp_path):
    table, report = d.load_observations(_write(tmp_path, HEADER))
    assert len(table) == 0 and report.n_rejected == 0


def test_load_missing_column_is_schema_error(tmp_path):
    p = _write(tmp_path, "site_id,timestamp,easting_m,temp_c\nA,x,1,2\n")
    with pytest.raises(DataFormatError):
        d.load_observations(p)


def test_timestamp_parse_and_format_roundtrip():
    s = d.parse_timestamp("2024-06-01T14:30:00Z")
    assert d.format_timestamp(s) == "2024-06-01T14:30:00Z"
    assert d.parse_timestamp("2024-06-01T14:30:00+00:00") == s
    assert d.parse_timestamp("2024-06-01 14:30:00") == s  # naive -> UTC


def test_observations_csv_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    table = d.ObservationTable(
        np.asarray([f"S{i:03d}" for i in range(20)]),
        np.int64(1717200000) + np.arange(20, dtype=np.int64) * 60,
        rng.uniform(0, 2e5, 20), rng.uniform(0, 2e5, 20),
        rng.normal(10, 5, 20),
        outlier_label=(np.arange(20) % 7 == 0).astype(np.int64),
    )
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    d.write_observations(p1, table)
    back, rep = d.load_observations(p1)
    assert rep.n_rejected == 0
    np.testing.assert_array_equal(back.temp_c, table.temp_c)
    np.testing.assert_array_equal(back.easting, table.easting)
    np.testing.assert_array_equal(back.epoch_seconds, table.epoch_seconds)
    d.write_observations(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


# -- raster ------------------------------------------------------------------


def _grid(vals, xll=0.0, yll=0.0, cs=1000.0, nodata=-9999.0):
    vals = np.asarray(vals, dtype=np.float64)
    return d.TerrainGrid(vals.shape[1], vals.shape[0], xll, yll, cs,
                         nodata, vals)


def test_ascii_grid_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(3)
    g = _grid(rng.normal(300, 80, size=(5, 7)))
    p1, p2 = tmp_path / "a.asc", tmp_path / "b.asc"
    d.write_ascii_grid(p1, g)
    back = d.read_ascii_grid(p1)
    assert (back.ncols, back.nrows) == (7, 5)
    np.testing.assert_array_equal(back.values, g.values)
    d.write_ascii_grid(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_ascii_grid_rejects_bad_input(tmp_path):
    p = tmp_path / "bad.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 10\n"
                 "NODATA_value -9999\n1 2 3\n")
    with pytest.raises(DataFormatError):
        d.read_ascii_grid(p)
    p.write_text("nrows 2\nxllcorner 0\nyllcorner 0\ncellsize 10\n1 2 3 4\n")
    with pytest.raises(DataFormatError):
        d.read_ascii_grid(p)


def test_bilinear_at_cell_center_and_midpoint():
    g = _grid([[100.0, 200.0], [300.0, 400.0]])
    # row 0 is north: cell centres at y=1500 hold 100, 200
    assert d.bilinear_sample(g, 500.0, 1500.0) == pytest.approx(100.0)
    assert d.bilinear_sample(g, 1500.0, 1500.0) == pytest.approx(200.0)
    assert d.bilinear_sample(g, 1000.0, 1500.0) == pytest.approx(150.0)
    assert d.bilinear_sample(g, 1000.0, 1000.0) == pytest.approx(250.0)


def test_bilinear_constant_grid_everywhere():
    g = _grid(np.full((4, 4), 42.0))
    xs = np.linspace(0.0, 4000.0, 17)
    ys = np.linspace(0.0, 4000.0, 17)
    np.testing.assert_allclose(d.bilinear_sample(g, xs, ys), 42.0)


def test_bilinear_outside_extent_errors():
    g = _grid(np.ones((2, 2)))
    with pytest.raises(ParameterError):
        d.bilinear_sample(g, -1.0, 500.0)
    with pytest.raises(ParameterError):
        d.bilinear_sample(g, 500.0, 2001.0)


def test_bilinear_nodata_contribution_flagged():
    g = _grid([[1.0, -9999.0], [1.0, 1.0]])
    vals = d.sample_or_fill(g, np.asarray([500.0, 900.0]),
                            np.asarray([500.0, 1500.0]), fill=0.0)
    assert vals[0] == pytest.approx(1.0)
    assert vals[1] == 0.0  # blend touches the nodata cell


def test_patch_constant_grid():
    g = _grid(np.full((64, 64), 100.0), cs=1000.0)
    patch = d.extract_patch(g, 32000.0, 32000.0, size=32, cell=500.0)
    assert patch.shape == (32, 32)
    np.testing.assert_array_equal(patch, 100.0)


def test_patch_mid_ocean_all_zero():
    g = _grid(np.full((8, 8), 55.0))
    patch = d.extract_patch(g, 1e7, 1e7, size=32, cell=500.0)
    np.testing.assert_array_equal(patch, 0.0)


def test_patch_linear_ramp_closed_form():
    # value(x, y) = 2 + 0.003 x is reproduced exactly by bilinear sampling
    ncols = nrows = 80
    cs = 1000.0
    xc = (np.arange(ncols) + 0.5) * cs
    vals = np.tile(2.0 + 0.003 * xc, (nrows, 1))
    g = _grid(vals, cs=cs)
    patch = d.extract_patch(g, 40000.0, 40000.0, size=16, cell=500.0)
    offs = (np.arange(16) - 7.5) * 500.0
    expected = np.tile(2.0 + 0.003 * (40000.0 + offs), (16, 1))
    np.testing.assert_allclose(patch, expected, atol=1e-9)


def test_patch_translation_consistency():
    rng = np.random.default_rng(8)
    xs = (np.arange(60) + 0.5) * 1000.0
    g = _grid(np.tile(5.0 + 0.004 * xs, (60, 1)))
    a = d.extract_patch(g, 30000.0, 30000.0, size=8, cell=500.0)
    b = d.extract_patch(g, 30500.0, 30000.0, size=8, cell=500.0)
    np.testing.assert_allclose(a[:, 1:], b[:, :-1], atol=1e-9)


# -- subsampling and folds -----------------------------------------------------


def _table(sites, secs, labels=None):
    n = len(sites)
    return d.ObservationTable(
        np.asarray(sites, dtype=str), np.asarray(secs, dtype=np.int64),
        np.zeros(n), np.zeros(n), np.arange(n, dtype=np.float64),
        outlier_label=None if labels is None else np.asarray(labels))


def test_subsample_hourly_collapses_groups():
    base = 1717200000 // 3600 * 3600
    t = _table(["A"] * 4 + ["B"], [base, base + 60, base + 120, base + 3599,
                                   base + 60])
    out = d.subsample_hourly(t, np.random.default_rng(0))
    assert len(out) == 2
    assert set(out.site_id) == {"A", "B"}


def test_subsample_hourly_identity_when_already_hourly():
    base = 1717200000 // 3600 * 3600
    t = _table(["A"] * 5, [base + 3600 * i for i in range(5)])
    out = d.subsample_hourly(t, np.random.default_rng(1))
    np.testing.assert_array_equal(out.epoch_seconds, t.epoch_seconds)


def test_subsample_hourly_count_14_days():
    base = 1717200000 // 3600 * 3600
    secs = []
    for h in range(14 * 24):
        for k in range(4):
            secs.append(base + h * 3600 + k * 900)
    t = _table(["S1"] * len(secs), secs)
    out = d.subsample_hourly(t, np.random.default_rng(2))
    assert len(out) == 336
    assert len(out) <= len(t)


def test_subsample_deterministic_given_seed():
    rng_secs = np.random.default_rng(5)
    base = 1717200000
    secs = base + rng_secs.integers(0, 72 * 3600, size=500)
    t = _table([f"S{i % 7}" for i in range(500)], secs)
    a = d.subsample_hourly(t, np.random.default_rng(42))
    b = d.subsample_hourly(t, np.random.default_rng(42))
    np.testing.assert_array_equal(a.epoch_seconds, b.epoch_seconds)
    np.testing.assert_array_equal(a.site_id, b.site_id)


def test_split_1450_sites_even_folds():
    sites = np.repeat([f"S{i:04d}" for i in range(1450)], 2)
    t = _table(sites, np.arange(2900) * 3600)
    out = d.split_folds_by_site(t, k=10, rng=np.random.default_rng(0))
    per_site = {}
    for s, f in zip(out.site_id, out.fold):
        per_site.setdefault(s, set()).add(int(f))
    assert all(len(v) == 1 for v in per_site.values())  # site-fold exclusivity
    counts = np.bincount([next(iter(v)) for v in per_site.values()],
                         minlength=11)[1:]
    assert list(counts) == [145] * 10


def test_split_11_sites_into_10_folds():
    t = _table([f"S{i}" for i in range(11)], np.arange(11) * 3600)
    out = d.split_folds_by_site(t, k=10, rng=np.random.default_rng(3))
    sizes = sorted(np.bincount(out.fold, minlength=11)[1:])
    assert sizes == [1] * 9 + [2]


def test_split_deterministic_and_errors():
    t = _table([f"S{i}" for i in range(30)], np.arange(30) * 3600)
    a = d.split_folds_by_site(t, k=10, rng=np.random.default_rng(9))
    b = d.split_folds_by_site(t, k=10, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.fold, b.fold)
    with pytest.raises(ParameterError):
        d.split_folds_by_site(_table(["A", "B"], [0, 3600]), k=10)
    with pytest.raises(ParameterError):
        d.split_folds_by_site(t, k=1)


def test_fold_mask_selects_roles():
    t = _table([f"S{i}" for i in range(20)], np.arange(20) * 3600)
    out = d.split_folds_by_site(t, k=10, rng=np.random.default_rng(1))
    train = d.fold_mask(out, range(1, 9))
    ev = d.fold_mask(out, [9])
    te = d.fold_mask(out, [10])
    assert train.sum() + ev.sum() + te.sum() == len(out)
    assert not np.any(train & ev) and not np.any(ev & te)
