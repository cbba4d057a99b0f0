import numpy as np
import pytest

from gaussfields import (
    FeatureGrid,
    GaussianRbfLayer,
    GridConfig,
    Rng,
    decode,
    decode_batch,
    decode_full,
    decode_sliced,
    decoder_backward,
    encode_batch,
    finite_diff_grad,
    init_centers_from_features,
    init_random,
    kernel_eval,
)

from conftest import rel_err


def random_layer(rng, n=4, m=3, q=2, spherical=False, dtype=np.float64, scale=1.0):
    mu = rng.normal(0, scale, size=(n, m)).astype(dtype)
    rho_shape = (n, 1) if spherical else (n, m)
    rho = rng.normal(0, 0.3, size=rho_shape).astype(dtype)
    w = rng.normal(0, 1, size=(n, q)).astype(dtype)
    return GaussianRbfLayer(mu, rho, w, spherical)


class TestKernelEval:
    def test_response_at_center_is_exactly_one(self, rng):
        layer = random_layer(rng)
        b = kernel_eval(layer, layer.mu[2])
        assert b[2] == 1.0

    def test_unit_distance_unit_bandwidth(self):
        mu = np.zeros((1, 4))
        layer = GaussianRbfLayer(mu, np.zeros((1, 1)), np.ones((1, 1)), spherical=True)
        f = np.array([0.5, 0.5, 0.5, 0.5])  # squared norm 1
        b = kernel_eval(layer, f)
        assert b[0] == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_monotone_in_bandwidth(self, rng):
        f = rng.normal(size=3)
        mu = rng.normal(size=(1, 3))
        w = np.ones((1, 1))
        b1 = kernel_eval(GaussianRbfLayer(mu, np.log(np.full((1, 1), 1.0)), w, True), f)
        b2 = kernel_eval(GaussianRbfLayer(mu, np.log(np.full((1, 1), 2.0)), w, True), f)
        assert b2[0] < b1[0]

    def test_responses_in_unit_interval(self, rng):
        layer = random_layer(rng, n=16, m=5, spherical=True)
        for _ in range(20):
            b = kernel_eval(layer, rng.normal(size=5))
            assert np.all(b > 0) and np.all(b <= 1)

    def test_response_one_only_at_center(self, rng):
        layer = random_layer(rng, n=3, m=4)
        f = layer.mu[0] + 1e-6
        b = kernel_eval(layer, f)
        assert b[0] < 1.0

    def test_non_finite_feature_rejected(self, rng):
        layer = random_layer(rng)
        with pytest.raises(ValueError):
            kernel_eval(layer, np.array([np.inf, 0.0, 0.0]))


class TestDecode:
    def test_single_unit_at_center(self):
        mu = np.array([[0.3, -0.2]])
        layer = GaussianRbfLayer(mu, np.zeros((1, 1)), np.array([[2.0]]), True)
        out = decode(layer, mu[0])
        assert out[0] == pytest.approx(2.0)

    def test_zero_weights_zero_output(self, rng):
        layer = random_layer(rng, q=3)
        layer.w[:] = 0.0
        assert np.array_equal(decode(layer, rng.normal(size=3)), np.zeros(3))

    def test_kernel_permutation_invariance(self, rng):
        layer = random_layer(rng, n=6, m=3, q=2)
        f = rng.normal(size=3)
        perm = rng.gen.permutation(6)
        permuted = GaussianRbfLayer(
            layer.mu[perm], layer.rho[perm], layer.w[perm], layer.spherical
        )
        assert np.allclose(decode(layer, f), decode(permuted, f), atol=1e-6)

    def test_linear_in_weights(self, rng):
        layer = random_layer(rng, n=8, m=4, q=2, dtype=np.float32)
        w1 = rng.normal(size=(8, 2)).astype(np.float32)
        w2 = rng.normal(size=(8, 2)).astype(np.float32)
        F = rng.normal(size=(16, 4)).astype(np.float32)

        def with_w(w):
            return decode_batch(
                GaussianRbfLayer(layer.mu, layer.rho, w, layer.spherical), F
            )

        lhs = with_w((w1 + w2).astype(np.float32))
        rhs = with_w(w1) + with_w(w2)
        assert np.max(np.abs(lhs - rhs)) < 1e-6


class TestDecodeBatch:
    def test_single_row_equals_decode(self, rng):
        layer = random_layer(rng)
        f = rng.normal(size=3)
        assert np.allclose(decode_batch(layer, f[None]), decode(layer, f)[None])

    def test_identical_rows_identical_outputs(self, rng):
        layer = random_layer(rng)
        f = rng.normal(size=3)
        out = decode_batch(layer, np.stack([f, f]))
        assert np.array_equal(out[0], out[1])

    @pytest.mark.parametrize("spherical", [True, False])
    def test_batch_matches_scalar_loop_float32(self, rng, spherical):
        layer = random_layer(rng, n=8, m=6, q=2, spherical=spherical,
                             dtype=np.float32)
        F = rng.normal(size=(64, 6)).astype(np.float32)
        batch = decode_batch(layer, F)
        loop = np.stack([decode(layer, F[i]) for i in range(64)])
        assert np.max(np.abs(batch - loop)) < 1e-6

    def test_activations_in_unit_interval(self, rng):
        layer = random_layer(rng, n=8, m=4)
        out = decode_full(layer, rng.normal(size=(32, 4)))
        assert np.all(out.activations > 0) and np.all(out.activations <= 1)


class TestDecoderBackward:
    def test_zero_upstream_zero_grads(self, rng):
        layer = random_layer(rng)
        F = rng.normal(size=(5, 3))
        grads, dF = decoder_backward(layer, F, np.zeros((5, 2)))
        for a in (grads.mu, grads.rho, grads.w, dF):
            assert not np.any(a)

    def test_center_feature_stationary(self, rng):
        # Single unit, batch pinned at its center: mu/beta/input grads vanish,
        # weight grad is the activation (=1) times upstream.
        mu = np.array([[0.4, -0.1, 0.2]])
        layer = GaussianRbfLayer(mu, np.zeros((1, 3)), np.array([[1.5]]), False)
        up = np.array([[0.7]])
        grads, dF = decoder_backward(layer, mu.copy(), up)
        assert np.allclose(grads.mu, 0.0, atol=1e-12)
        assert np.allclose(grads.rho, 0.0, atol=1e-12)
        assert np.allclose(dF, 0.0, atol=1e-12)
        assert grads.w[0, 0] == pytest.approx(0.7, abs=1e-12)

    @pytest.mark.parametrize("spherical", [True, False])
    def test_matches_finite_differences(self, spherical):
        for trial in range(20):
            rng = Rng(1000 + trial)
            n, m, q, b = 4, 3, 2, 6
            layer = random_layer(rng, n=n, m=m, q=q, spherical=spherical)
            F = rng.normal(size=(b, m))
            up = rng.normal(size=(b, q))
            grads, dF = decoder_backward(layer, F, up)

            def loss_from(mu=None, rho=None, w=None, feats=None):
                lay = GaussianRbfLayer(
                    layer.mu if mu is None else mu,
                    layer.rho if rho is None else rho,
                    layer.w if w is None else w,
                    spherical,
                )
                f = F if feats is None else feats
                return float(np.sum(decode_batch(lay, f) * up))

            fd_mu = finite_diff_grad(
                lambda t: loss_from(mu=t.reshape(layer.mu.shape)),
                layer.mu.ravel(), h=1e-5,
            ).reshape(layer.mu.shape)
            fd_rho = finite_diff_grad(
                lambda t: loss_from(rho=t.reshape(layer.rho.shape)),
                layer.rho.ravel(), h=1e-5,
            ).reshape(layer.rho.shape)
            fd_w = finite_diff_grad(
                lambda t: loss_from(w=t.reshape(layer.w.shape)),
                layer.w.ravel(), h=1e-5,
            ).reshape(layer.w.shape)
            fd_F = finite_diff_grad(
                lambda t: loss_from(feats=t.reshape(F.shape)),
                F.ravel(), h=1e-5,
            ).reshape(F.shape)

            assert rel_err(grads.mu, fd_mu, floor=1e-6) < 1e-4
            assert rel_err(grads.rho, fd_rho, floor=1e-6) < 1e-4
            assert rel_err(grads.w, fd_w, floor=1e-6) < 1e-4
            assert rel_err(dF, fd_F, floor=1e-6) < 1e-4


class TestDecodeSliced:
    def test_full_width_equals_decode(self, rng):
        layer = random_layer(rng, n=4, m=6)
        f = rng.normal(size=6)
        assert np.array_equal(decode_sliced(layer, f, k=6), decode(layer, f))

    def test_params_beyond_slice_do_not_matter(self, rng):
        layer = random_layer(rng, n=4, m=6)
        f = rng.normal(size=6)
        fs = f[:3]
        out = decode_sliced(layer, fs, k=3)
        mutated = GaussianRbfLayer(
            layer.mu.copy(), layer.rho.copy(), layer.w, layer.spherical
        )
        mutated.mu[:, 3:] += 100.0
        mutated.rho[:, 3:] -= 5.0
        assert np.array_equal(decode_sliced(mutated, fs, k=3), out)

    def test_width_mismatch_rejected(self, rng):
        layer = random_layer(rng, n=4, m=3)
        with pytest.raises(ValueError):
            decode_sliced(layer, rng.normal(size=5), k=5)


class TestInit:
    def test_centers_from_features_match_encoding(self, tiny_grid_config):
        grid = FeatureGrid(tiny_grid_config, rng=Rng(3), dtype=np.float64)
        pts = Rng(4).uniform(size=(8, 3))
        layer = init_centers_from_features(pts, grid, out_dim=1, rng=Rng(5))
        assert np.array_equal(layer.mu, encode_batch(grid, pts))

    def test_identical_seed_points_identical_centers(self, tiny_grid_config):
        grid = FeatureGrid(tiny_grid_config, rng=Rng(3))
        pts = np.tile(np.array([[0.3, 0.6, 0.9]]), (5, 1))
        layer = init_centers_from_features(pts, grid, out_dim=1, rng=Rng(5))
        assert np.all(layer.mu == layer.mu[0])

    def test_zero_tables_zero_centers(self, tiny_grid_config):
        grid = FeatureGrid(tiny_grid_config, rng=None)
        layer = init_centers_from_features(
            Rng(1).uniform(size=(4, 3)), grid, out_dim=1, rng=Rng(2)
        )
        assert not np.any(layer.mu)

    def test_random_init_bandwidths_exactly_one(self):
        layer = init_random(16, 8, 3, Rng(7), spherical=False)
        assert np.all(layer.beta == 1.0)

    def test_random_init_deterministic(self):
        a = init_random(16, 8, 3, Rng(7))
        b = init_random(16, 8, 3, Rng(7))
        assert np.array_equal(a.mu, b.mu)
        assert np.array_equal(a.w, b.w)

    def test_weight_bound(self):
        layer = init_random(64, 8, 3, Rng(7))
        assert np.max(np.abs(layer.w)) <= 1.0 / np.sqrt(64)
