import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stcvit.data import (
    BadMagicError,
    GridSample,
    LatLonGrid,
    NormalizationStats,
    TruncatedFileError,
    VersionMismatchError,
    WindowedExample,
    derivative_names,
    fit_normalization,
    generate_synthetic,
    latitude_weights,
    make_windows,
    read_grid,
    read_grid_with_meta,
    temporal_derivative,
    write_grid,
)

GRID = LatLonGrid.regular(4, 8)
NAMES = ("t2m", "u10")


def sample(t, fields, grid=GRID, names=NAMES, dt=6.0):
    return GridSample(t, np.asarray(fields, dtype=np.float32), names, grid, dt)


# -- grid and samples ----------------------------------------------------------------------
def test_regular_grid_geometry():
    g = LatLonGrid.regular(8, 16)
    assert g.shape == (8, 16)
    assert g.lats[0] == 78.75 and g.lats[-1] == -78.75
    assert g.dlon == 22.5 and g.is_global
    assert not LatLonGrid([10.0, 20.0], [0.0, 5.0, 10.0]).is_global


@pytest.mark.parametrize(
    "lats, lons",
    [
        ([10.0], [0.0, 1.0]),
        ([10.0, 100.0], [0.0, 1.0]),
        ([10.0, 20.0], [0.0, 360.0]),
        ([10.0, 10.0], [0.0, 1.0]),
        ([0.0, 10.0, 30.0], [0.0, 1.0]),
        ([0.0, 10.0], [5.0, 1.0]),
    ],
)
def test_grid_validation(lats, lons):
    with pytest.raises(ValueError):
        LatLonGrid(lats, lons)


def test_sample_validation():
    with pytest.raises(ValueError):
        sample(0, np.zeros((3, 4, 8)))  # names/extent mismatch
    with pytest.raises(ValueError):
        GridSample(0, np.zeros((2, 4, 8)), ("a", "a"), GRID)
    with pytest.raises(ValueError):
        sample(0, np.full((2, 4, 8), np.nan))
    with pytest.raises(ValueError):
        sample(0, np.zeros((2, 3, 8)))


def test_windowed_example_invariants():
    s = [sample(t, np.zeros((2, 4, 8))) for t in range(4)]
    WindowedExample(s[0], s[1], s[3], 2)
    with pytest.raises(ValueError):
        WindowedExample(s[0], s[2], s[3], 1)
    with pytest.raises(ValueError):
        WindowedExample(s[0], s[1], s[3], 1)


# -- latitude weights -----------------------------------------------------------------------
def test_latitude_weight_examples():
    np.testing.assert_array_equal(latitude_weights([30.0, 30.0, 30.0]), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(latitude_weights([0.0, 60.0]), [4 / 3, 2 / 3], rtol=1e-15)


@given(st.integers(2, 64), st.integers(2, 16))
def test_latitude_weights_mean_one(h, w):
    assert abs(latitude_weights(LatLonGrid.regular(h, w)).mean() - 1.0) < 1e-12


# -- synthetic data -----------------------------------------------------------------------------
def test_solid_rotation_periodic():
    g = LatLonGrid.regular(4, 64)
    seq = generate_synthetic(g, 65, seed=3, regime="solid_rotation")
    np.testing.assert_allclose(seq[64].fields, seq[0].fields, atol=1e-5)
    assert not np.allclose(seq[1].fields, seq[0].fields)


def test_generation_deterministic():
    a = generate_synthetic(GRID, 5, 11, "advection_diffusion")
    b = generate_synthetic(GRID, 5, 11, "advection_diffusion")
    assert all(x.fields.tobytes() == y.fields.tobytes() for x, y in zip(a, b))


def test_advection_diffusion_variance_decreases():
    seq = generate_synthetic(LatLonGrid.regular(8, 16), 12, 2, "advection_diffusion", kappa=0.1)
    var = np.array([s.fields.astype(np.float64).var(axis=(1, 2)) for s in seq])
    assert np.all(np.diff(var, axis=0) < 0)


def test_synthetic_channels_and_errors():
    seq = generate_synthetic(GRID, 3, 0)
    assert seq[0].var_names == ("t2m", "u10", "v10", "z500")
    assert seq[0].fields.dtype == np.float32
    assert np.all(seq[0].fields[3] > 0)
    with pytest.raises(ValueError):
        generate_synthetic(GRID, 3, 0, regime="bogus")
    with pytest.raises(ValueError):
        generate_synthetic(GRID, 2, 0)


# -- derivatives ---------------------------------------------------------------------------
def test_temporal_derivative_examples():
    a, b = sample(1, np.full((2, 4, 8), 5.0), dt=1.0), sample(0, np.full((2, 4, 8), 3.0), dt=1.0)
    np.testing.assert_array_equal(temporal_derivative(a, b), 2.0)
    np.testing.assert_array_equal(temporal_derivative(a, a), 0.0)
    slope = np.random.default_rng(0).normal(size=(2, 4, 8))
    for t in (1, 5, 40):
        d = temporal_derivative(sample(t, slope * t, dt=1.0), sample(t - 1, slope * (t - 1), dt=1.0))
        np.testing.assert_allclose(d, slope.astype(np.float32), atol=1e-4 * t)


def test_temporal_derivative_errors():
    other = LatLonGrid.regular(4, 4)
    with pytest.raises(ValueError):
        temporal_derivative(sample(1, np.zeros((2, 4, 8))), sample(0, np.zeros((2, 4, 4)), grid=other))
    with pytest.raises(ValueError):
        temporal_derivative(sample(1, np.zeros((2, 4, 8))), sample(0, np.zeros((2, 4, 8)), names=("a", "b")))


@given(arrays(np.float32, (2, 4, 8), elements=st.floats(-1e3, 1e3, width=32)),
       arrays(np.float32, (2, 4, 8), elements=st.floats(-1e3, 1e3, width=32)))
def test_derivative_antisymmetric(x, y):
    a, b = sample(1, x), sample(0, y)
    np.testing.assert_array_equal(temporal_derivative(a, b), -temporal_derivative(b, a))


def test_derivative_names():
    assert derivative_names(("t2m", "z500")) == ("d_t2m", "d_z500")


# -- normalisation -------------------------------------------------------------------------
def test_normalization_hand_case():
    data = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    st_ = fit_normalization(data, ["x"])
    assert st_.mean[0] == 2.0 and st_.std[0] == 1.0
    np.testing.assert_array_equal(st_.apply(data).ravel(), [-1.0, 1.0])


def test_normalization_statistics_and_roundtrip():
    r = np.random.default_rng(4)
    data = r.normal(50.0, 7.0, size=(20, 3, 4, 8)) * np.array([1.0, 10.0, 0.1]).reshape(1, 3, 1, 1)
    s = fit_normalization(data, ["a", "b", "c"])
    z = s.apply(data)
    assert np.all(np.abs(z.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(z.std(axis=(0, 2, 3)) - 1) < 1e-4)
    np.testing.assert_allclose(s.invert(z), data, rtol=1e-5)
    test = r.normal(80.0, 7.0, size=(5, 3, 4, 8))
    assert np.all(np.isfinite(s.apply(test)))


@given(arrays(np.float64, (3, 2, 2, 3), elements=st.floats(-1e4, 1e4)))
def test_normalization_roundtrip_property(data):
    if np.any(data.std(axis=(0, 2, 3)) < 1e-3):
        return
    s = fit_normalization(data, ["a", "b"])
    np.testing.assert_allclose(s.invert(s.apply(data)), data, rtol=1e-5, atol=1e-5 * np.abs(data).max())


def test_zero_variance_channel_named():
    data = np.ones((4, 2, 2, 2))
    data[:, 0] = np.arange(4).reshape(4, 1, 1)
    with pytest.raises(ValueError, match="v2"):
        fit_normalization(data, ["v1", "v2"])


def test_stats_subset_and_dict():
    s = NormalizationStats(("a", "b", "c"), [1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
    sub = s.subset(["c", "a"])
    assert sub.names == ("c", "a") and list(sub.mean) == [3.0, 1.0]
    back = NormalizationStats.from_dict(s.to_dict())
    assert back.names == s.names and np.array_equal(back.std, s.std)
    with pytest.raises(ValueError):
        NormalizationStats(("a",), [0.0], [0.0])


# -- windows -----------------------------------------------------------------------------
@pytest.mark.parametrize("lead, count", [(1, 8), (6, 3)])
def test_window_counts(lead, count):
    seq = generate_synthetic(GRID, 10, 0)
    wins = make_windows(seq, lead)
    assert len(wins) == count
    assert all(w.target.time == w.x_curr.time + lead for w in wins)


def test_window_too_short():
    with pytest.raises(ValueError):
        make_windows(generate_synthetic(GRID, 3, 0), 2)


# -- file format ------------------------------------------------------------------------------
def test_grid_file_roundtrip(tmp_path):
    seq = generate_synthetic(GRID, 6, 8, "advection_diffusion", dt_hours=3.0)
    path = tmp_path / "a.stcg"
    n = write_grid(path, seq)
    assert n == path.stat().st_size
    back, meta = read_grid_with_meta(path)
    assert meta.dt_hours == 3.0 and meta.var_names == seq[0].var_names and meta.grid == GRID
    for a, b in zip(seq, back):
        assert a.fields.tobytes() == b.fields.tobytes()
        assert a.time == b.time


def test_grid_file_layout(tmp_path):
    """Byte layout independently re-derived from the documented header."""
    import struct

    seq = [sample(0, np.arange(64).reshape(2, 4, 8)), sample(1, -np.arange(64).reshape(2, 4, 8))]
    path = tmp_path / "b.stcg"
    write_grid(path, seq)
    raw = path.read_bytes()
    magic, ver, v, h, w, n, dt = struct.unpack_from("<4sIIIIIf", raw)
    assert (magic, ver, v, h, w, n, dt) == (b"STCG", 1, 2, 4, 8, 2, 6.0)
    off = 28
    for name in NAMES:
        (k,) = struct.unpack_from("<I", raw, off)
        assert raw[off + 4:off + 4 + k].decode() == name
        off += 4 + k
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8", 4, off), GRID.lats)
    off += 8 * (4 + 8)
    block = np.frombuffer(raw, "<f4", 64, off + 4 * 64)
    np.testing.assert_array_equal(block, -np.arange(64))
    assert len(raw) == off + 2 * 64 * 4


def test_empty_grid_file(tmp_path):
    path = tmp_path / "e.stcg"
    write_grid(path, [], GRID, NAMES, 6.0)
    seq, meta = read_grid_with_meta(path)
    assert seq == [] and meta.n_steps == 0 and meta.var_names == NAMES


def test_grid_file_errors(tmp_path):
    path = tmp_path / "c.stcg"
    write_grid(path, generate_synthetic(GRID, 3, 0))
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_grid(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        read_grid(bad)
    bad.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        read_grid(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(TruncatedFileError):
        read_grid(bad)
