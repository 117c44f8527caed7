import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sptlab import ops
from sptlab.posembed import PositionalEmbedding, fourier_features
from sptlab.rng import RandomSource


def tiny_embed(d_model=6, fourier_dim=8, hidden=10, seed=0):
    pe = PositionalEmbedding(d_model=d_model, fourier_dim=fourier_dim, hidden=hidden)
    return pe, pe.init_params(RandomSource(seed))


class TestFourierFeatures:
    def test_origin_row(self):
        # p = (0, 0): cos part all ones, sin part all zeros, scaled by 1/sqrt(D)
        freq = RandomSource(0).normal((2, 4))
        feats, _ = fourier_features(np.array([[0, 0]]), freq)
        expected = np.concatenate([np.ones(4), np.zeros(4)]) / np.sqrt(8.0)
        np.testing.assert_allclose(feats[0], expected, atol=1e-15)

    def test_identical_coords_identical_rows(self):
        freq = RandomSource(1).normal((2, 6))
        feats, _ = fourier_features(np.array([[3, 7], [3, 7], [2, 1]]), freq)
        np.testing.assert_array_equal(feats[0], feats[1])
        assert not np.array_equal(feats[0], feats[2])

    def test_inner_product_single_frequency(self):
        # one frequency w = (1, 0), D = 2: <g(p), g(q)> evaluates to
        # cos(p - q alongside w) / 2; direct dot product is the oracle
        freq = np.array([[1.0], [0.0]])
        feats, _ = fourier_features(np.array([[3, 5], [1, 5]]), freq)
        direct = float(feats[0] @ feats[1])
        np.testing.assert_allclose(direct, np.cos(2.0) / 2.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_shift_invariance(self, seed):
        # <g(p), g(q)> depends only on p - q
        rng = RandomSource(seed)
        freq = rng.child("f").normal((2, 8))
        p, q = rng.child("p").integers(-40, 40, size=(2, 2))
        shift = rng.child("s").integers(-40, 40, size=2)
        a, _ = fourier_features(np.stack([p, q]), freq)
        b, _ = fourier_features(np.stack([p + shift, q + shift]), freq)
        np.testing.assert_allclose(a[0] @ a[1], b[0] @ b[1], atol=1e-10)


class TestPositionalEncode:
    def test_zero_mlp_gives_zero_rows(self):
        pe, params = tiny_embed()
        params["w2"][:] = 0.0
        params["b2"][:] = 0.0
        out, _ = pe.forward(params, np.array([[1, 2], [5, 0]]))
        np.testing.assert_array_equal(out, np.zeros((2, pe.d_model)))

    def test_row_wise_locality(self):
        pe, params = tiny_embed()
        coords = np.array([[1, 2], [3, 4], [5, 6]])
        out, _ = pe.forward(params, coords)
        changed = coords.copy()
        changed[2] = [9, 9]
        out2, _ = pe.forward(params, changed)
        np.testing.assert_array_equal(out[:2], out2[:2])

    def test_permutation_equivariance(self):
        pe, params = tiny_embed(seed=2)
        coords = RandomSource(3).integers(0, 30, size=(7, 2))
        perm = RandomSource(4).permutation(7)
        out, _ = pe.forward(params, coords)
        out_p, _ = pe.forward(params, coords[perm])
        np.testing.assert_array_equal(out[perm], out_p)

    def test_gradients_match_finite_differences(self):
        pe, params = tiny_embed(seed=5)
        coords = RandomSource(6).integers(0, 12, size=(5, 2))
        probe = RandomSource(7).normal((5, pe.d_model))

        out, cache = pe.forward(params, coords)
        analytic = pe.backward(params, cache, probe)

        def loss(p):
            o, _ = pe.forward(p, coords)
            return float((o * probe).sum())

        numeric = ops.fd_gradients(loss, params)
        errs = ops.max_relative_error(analytic, numeric)
        assert max(errs.values()) < 1e-4

    def test_batched_matches_flat(self):
        pe, params = tiny_embed(seed=8)
        coords = RandomSource(9).integers(0, 20, size=(3, 4, 2))
        out, _ = pe.forward(params, coords)
        flat, _ = pe.forward(params, coords.reshape(-1, 2))
        np.testing.assert_allclose(out.reshape(-1, pe.d_model), flat, atol=1e-15)

    def test_odd_fourier_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            PositionalEmbedding(d_model=4, fourier_dim=7)
