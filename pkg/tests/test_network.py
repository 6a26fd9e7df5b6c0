import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from spectromix.network import (
    CoordinateNetwork,
    HashEncodingConfig,
    NetworkConfig,
    corner_indices,
    level_corners,
)

TINY = HashEncodingConfig(levels=5, table_size=128, features_per_level=3, base_resolution=2, growth=2.0)


def make(rng=None, enc=TINY, m=4, hidden=16):
    net = CoordinateNetwork(NetworkConfig(m, enc, hidden))
    if rng is not None:
        net.initialize(rng, hash_scale=1.0)
    return net


def test_config_validation():
    with pytest.raises(ValueError):
        HashEncodingConfig(levels=0)
    with pytest.raises(ValueError):
        HashEncodingConfig(growth=1.0)


def test_full_scale_config_sizes():
    enc = HashEncodingConfig()
    assert (enc.levels, enc.table_size, enc.features_per_level, enc.output_dim) == (16, 2**18, 8, 128)
    assert [enc.resolution(l) for l in range(4)] == [2, 4, 8, 16]
    assert enc.is_dense(7) and not enc.is_dense(9)  # 257^2 < 2^18 < 513^2


def test_levels_dense_until_table_overflows():
    assert [TINY.is_dense(l) for l in range(5)] == [True, True, True, False, False]
    assert [TINY.rows(l) for l in range(5)] == [9, 25, 81, 128, 128]


def test_hashed_indices_in_range_and_use_primes(rng):
    ix = rng.integers(0, 10**6, 1000)
    iy = rng.integers(0, 10**6, 1000)
    rows = corner_indices(TINY, 4, ix, iy)
    assert rows.min() >= 0 and rows.max() < TINY.table_size
    expected = [((int(a) * 1) ^ (int(b) * 2654435761)) % TINY.table_size for a, b in zip(ix[:20], iy[:20])]
    assert rows[:20].tolist() == expected


def test_vertex_returns_stored_feature(rng):
    net = make(rng)
    enc = TINY
    for level in range(enc.levels):
        res = enc.resolution(level)
        ix, iy = 1, res - 1
        x = np.array([[-1 + 2 * ix / res, -1 + 2 * iy / res]])
        row = net.level_offsets[level] + corner_indices(enc, level, np.array([ix]), np.array([iy]))[0]
        feats = net.encode(x)[0].reshape(enc.levels, enc.features_per_level)
        np.testing.assert_allclose(feats[level], net.params["tables"][row], rtol=1e-14)


def test_zero_tables_give_zero_features(rng):
    net = make()
    assert np.all(net.encode(rng.uniform(-1, 1, (50, 2))) == 0.0)


def test_same_cell_shares_corners(rng):
    net = make(rng)
    finest = TINY.resolution(TINY.levels - 1)
    cell = 2.0 / finest
    # snap to a finest-level vertex so both points share that cell (and hence every coarser one)
    base = np.floor((np.array([-0.3, 0.2]) + 1) / cell) * cell - 1
    a, b = base + cell * np.array([0.1, 0.2]), base + cell * np.array([0.7, 0.4])
    ra, wa = net.corners(np.stack([a, b]))
    assert np.array_equal(ra[0], ra[1])
    feats = net.encode(np.stack([a, b]))
    tables = net.params["tables"]
    for point, (rows, weights) in enumerate(zip(ra, wa)):
        manual = np.einsum("lc,lcf->lf", weights, tables[rows]).ravel()
        np.testing.assert_allclose(feats[point], manual, rtol=1e-13)


def test_numba_encoder_matches_numpy_reference(rng):
    net = make(rng, enc=HashEncodingConfig(levels=8, table_size=512, features_per_level=2))
    x = rng.uniform(-1, 1, (300, 2))
    x[:10] = [[-1, -1], [1, 1], [-1, 1], [1, -1], [0, 0], [0.5, -0.5], [1, 0], [0, 1], [-1, 0], [0, -1]]
    rows, weights = net.corners(x)
    tables = net.params["tables"]
    ref = np.einsum("slc,slcf->slf", weights, tables[rows]).reshape(len(x), -1)
    np.testing.assert_allclose(net.encode(x), ref, rtol=1e-13, atol=1e-15)


def test_bilinear_weights_sum_to_one(rng):
    x = rng.uniform(-1, 1, (100, 2))
    for level in range(TINY.levels):
        _, w = level_corners(TINY, level, x)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=1e-14)
        assert w.min() >= 0


def test_zero_output_layer_gives_uniform(rng):
    net = make(rng)
    net.params["w2"] = 0.0
    net.params["b2"] = 0.0
    np.testing.assert_allclose(net.infer_fraction(rng.uniform(-1, 1, (20, 2))), 0.25, rtol=1e-15)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25)
def test_output_on_simplex(seed):
    rng = np.random.default_rng(seed)
    net = make(rng)
    net.params.data[:] *= rng.uniform(0.1, 20)
    alpha = net(rng.uniform(-1, 1, (64, 2)))
    assert np.all(alpha >= 0) and np.all(alpha <= 1)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)


def test_init_is_seeded_and_small():
    a = make(np.random.default_rng(4))
    b = make(np.random.default_rng(4))
    assert a.params.data.tobytes() == b.params.data.tobytes()
    net = CoordinateNetwork(NetworkConfig(4, TINY, 16)).initialize(np.random.default_rng(0))
    assert np.abs(net.params["tables"]).max() <= 1e-4
    bound = 1 / np.sqrt(TINY.output_dim)
    assert np.abs(net.params["w1"]).max() <= bound


def test_encoding_fd(rng):
    assert oracles.check_encoding(rng, 100) <= 1e-4


def test_network_fd(rng):
    assert oracles.check_network(rng, 100) <= 1e-4


def test_backward_accumulates(rng):
    net = make(rng)
    x = rng.uniform(-1, 1, (7, 2))
    u = rng.normal(size=(7, 4))
    _, cache = net.forward(x, return_cache=True)
    once, twice = net.params.zeros_like(), net.params.zeros_like()
    net.backward(u, cache, once)
    net.backward(u, cache, twice)
    net.backward(u, cache, twice)
    np.testing.assert_allclose(twice.data, 2 * once.data, rtol=1e-14)
