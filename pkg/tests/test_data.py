import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2fedaqi import data as D
from m2fedaqi.errors import ConfigError, DataError, PartitionError


# --- AQI banding -------------------------------------------------------------


@pytest.mark.parametrize("aqi,cat", [(42, 0), (150, 2), (301, 5), (0, 0), (50, 0), (50.5, 1), (100, 1),
                                     (100.01, 2), (200, 3), (200.5, 4), (300, 4), (300.5, 5), (500, 5)])
def test_aqi_bands(aqi, cat):
    assert D.aqi_to_category(aqi) == cat


def test_aqi_negative_or_nan_rejected():
    with pytest.raises(DataError):
        D.aqi_to_category(-0.1)
    with pytest.raises(DataError):
        D.aqi_to_category(float("nan"))


def test_aqi_vectorized():
    np.testing.assert_array_equal(D.aqi_to_category(np.array([10, 60, 120, 160, 250, 400])), np.arange(6))


@given(st.floats(0, 1e6, allow_nan=False), st.floats(0, 1e6, allow_nan=False))
def test_aqi_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert D.aqi_to_category(lo) <= D.aqi_to_category(hi)


# --- synthetic generator ------------------------------------------------------


def test_noise_free_data_is_linearly_decodable_from_tab():
    ds = D.generate_synthetic(600, 8, 16, noise=0.0, seed=2)
    X = np.column_stack([ds.tab.astype(np.float64), np.ones(len(ds))])
    y = ds.pm25.astype(np.float64)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    r2 = 1 - resid @ resid / np.sum((y - y.mean()) ** 2)
    assert r2 > 0.999


def test_generator_deterministic_files(tmp_path):
    a = D.generate_synthetic(200, 5, 16, 0.05, seed=9)
    b = D.generate_synthetic(200, 5, 16, 0.05, seed=9)
    D.write_features(a, tmp_path / "a.m2fa")
    D.write_features(b, tmp_path / "b.m2fa")
    assert (tmp_path / "a.m2fa").read_bytes() == (tmp_path / "b.m2fa").read_bytes()
    c = D.generate_synthetic(200, 5, 16, 0.05, seed=10)
    assert not a.equal(c)


def test_generator_class_minimum():
    ds = D.generate_synthetic(600, 10, 32, 0.05, seed=1)
    counts = np.bincount(ds.labels, minlength=6)
    assert counts.min() >= 50
    np.testing.assert_array_equal(ds.labels, D.aqi_to_category(ds.pm25))


def test_generator_validation():
    with pytest.raises(ConfigError):
        D.generate_synthetic(0, 5, 5)
    with pytest.raises(ConfigError):
        D.generate_synthetic(10, 5, 5, noise=-1)


def test_both_modalities_carry_signal():
    ds = D.generate_synthetic(1000, 6, 32, 0.05, seed=0)
    y = ds.pm25.astype(np.float64)
    for feats in (ds.tab, ds.img):
        X = np.column_stack([feats.astype(np.float64), np.ones(len(ds))])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        assert np.corrcoef(X @ coef, y)[0, 1] > 0.9


# --- file format ---------------------------------------------------------------


def _small(n=20, seed=0):
    return D.generate_synthetic(n, 3, 4, 0.1, seed=seed, min_class_count=0)


def test_file_round_trip_bit_exact(tmp_path):
    ds = _small()
    D.write_features(ds, tmp_path / "x.m2fa")
    assert D.read_features(tmp_path / "x.m2fa").equal(ds)


def test_file_layout(tmp_path):
    ds = _small(n=2)
    D.write_features(ds, tmp_path / "x.m2fa")
    buf = (tmp_path / "x.m2fa").read_bytes()
    assert buf[:4] == b"M2FA" and buf[4] == 1
    assert struct.unpack_from("<QII", buf, 5) == (2, 3, 4)
    row = 4 * 3 + 4 * 4 + 4 + 1
    assert len(buf) == 21 + 2 * row
    first = buf[21 : 21 + row]
    assert struct.unpack_from("<3f", first) == tuple(float(v) for v in ds.tab[0])
    assert struct.unpack_from("<f", first, 28)[0] == float(ds.pm25[0])
    assert first[32] == ds.labels[0]


def test_truncated_file_names_sizes(tmp_path):
    ds = _small(n=5)
    path = tmp_path / "x.m2fa"
    D.write_features(ds, path)
    full = path.read_bytes()
    path.write_bytes(full[:-3])
    with pytest.raises(DataError, match=f"expected {len(full)} bytes, got {len(full) - 3}"):
        D.read_features(path)


def test_bad_magic_and_version(tmp_path):
    ds = _small(n=2)
    path = tmp_path / "x.m2fa"
    D.write_features(ds, path)
    buf = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(DataError, match="magic"):
        D.read_features(path)
    buf[4] = 2
    path.write_bytes(bytes(buf))
    with pytest.raises(DataError, match="version 2"):
        D.read_features(path)


def test_non_finite_value_names_row(tmp_path):
    ds = _small(n=6)
    ds.tab[4, 1] = np.inf
    D.write_features(ds, tmp_path / "x.m2fa")
    with pytest.raises(DataError, match="row 4"):
        D.read_features(tmp_path / "x.m2fa")


def test_manifest_round_trip(tmp_path):
    ds = _small(n=30)
    stats = D.compute_stats(ds)
    path = D.save_dataset(ds, tmp_path, "train", stats)
    m = D.Manifest.read(path)
    assert (m.name, m.n, m.d_tab, m.d_img) == ("train", 30, 3, 4)
    np.testing.assert_array_equal(np.float32(m.tab_mean), stats.tab_mean)
    assert m.target_mean == stats.target_mean
    raw = D.load_dataset(m, normalized=False)
    assert raw.equal(ds)


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.manifest").write_text("name=x\nd_tab=3\n")
    with pytest.raises(DataError, match="missing manifest key"):
        D.Manifest.read(tmp_path / "bad.manifest")
    with pytest.raises(DataError):
        D.Manifest.read(tmp_path / "absent.manifest")


# --- normalization ---------------------------------------------------------------


def test_zero_variance_column_maps_to_zero():
    ds = _small(n=10)
    ds.tab[:, 1] = 7.0
    z = D.normalize(ds, D.compute_stats(ds))
    assert not z.tab[:, 1].any()


def test_normalized_train_means_near_zero():
    ds = D.generate_synthetic(500, 6, 8, 0.05, seed=4)
    z = D.normalize(ds, D.compute_stats(ds))
    assert np.abs(z.tab.astype(np.float64).mean(axis=0)).max() < 1e-5
    assert z.img.tobytes() == ds.img.tobytes()


# --- splits and partitioning -------------------------------------------------------


def test_holdout_split_disjoint_cover():
    keep, hold = D.holdout_split(100, 0.2, 3)
    assert len(hold) == 20
    np.testing.assert_array_equal(np.sort(np.concatenate([keep, hold])), np.arange(100))


def test_largest_remainder():
    np.testing.assert_array_equal(D.largest_remainder(10, [1, 1, 1]), [4, 3, 3])
    np.testing.assert_array_equal(D.largest_remainder(7, [0.5, 0.25, 0.25]), [3, 2, 2])
    assert D.largest_remainder(0, [0.2, 0.8]).sum() == 0


def test_partition_single_client():
    parts = D.partition_dirichlet(np.arange(50) % 6, D.PartitionConfig(1, alpha=0.01, seed=0))
    assert len(parts) == 1
    np.testing.assert_array_equal(parts[0], np.arange(50))


def _assert_cover(parts, n):
    allidx = np.concatenate(parts)
    assert len(allidx) == n
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n))


def test_partition_disjoint_cover_example():
    labels = np.repeat(np.arange(6), 100)
    parts = D.partition_dirichlet(labels, D.PartitionConfig(6, 0.5, 7))
    assert len(parts) == 6
    _assert_cover(parts, 600)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(20, 400),
    k=st.integers(1, 8),
    alpha=st.sampled_from([0.05, 0.5, 1.0, 10.0, 1e3]),
    seed=st.integers(0, 2**31),
)
def test_partition_cover_property(n, k, alpha, seed):
    labels = np.random.default_rng(seed).integers(0, 6, n)
    try:
        parts = D.partition_dirichlet(labels, D.PartitionConfig(k, alpha, seed))
    except PartitionError:
        return
    assert len(parts) == k and min(len(p) for p in parts) >= 1
    _assert_cover(parts, n)


def test_partition_near_uniform_for_huge_alpha():
    labels = np.repeat(np.arange(6), 1000)
    parts = D.partition_dirichlet(labels, D.PartitionConfig(6, 1e6, 0))
    for p in parts:
        props = np.bincount(labels[p], minlength=6) / len(p)
        assert np.abs(props - 1 / 6).max() < 0.02


def test_partition_heterogeneity_monotone_in_alpha():
    labels = np.repeat(np.arange(6), 1000)

    def mean_ratio(alpha):
        ratios = []
        for seed in range(50):
            sizes = [len(p) for p in D.partition_dirichlet(labels, D.PartitionConfig(6, alpha, seed))]
            ratios.append(max(sizes) / min(sizes))
        return np.mean(ratios)

    assert mean_ratio(0.1) > mean_ratio(10.0)


def test_partition_failure_suggests_remedy():
    with pytest.raises(PartitionError, match="larger alpha or fewer clients"):
        D.partition_dirichlet(np.zeros(12, int), D.PartitionConfig(6, 1e-3, 0, min_per_client=2, max_attempts=3))
    with pytest.raises(PartitionError):
        D.partition_dirichlet(np.zeros(3, int), D.PartitionConfig(6, 1.0, 0))


def test_partition_config_validation():
    with pytest.raises(ConfigError):
        D.PartitionConfig(0)
    with pytest.raises(ConfigError):
        D.PartitionConfig(3, alpha=0.0)


def test_partition_deterministic():
    labels = np.repeat(np.arange(6), 50)
    a = D.partition_dirichlet(labels, D.PartitionConfig(4, 0.5, 11))
    b = D.partition_dirichlet(labels, D.PartitionConfig(4, 0.5, 11))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
