import json

import numpy as np
import pytest

from nfp import (
    ConfigError,
    NfpConfig,
    NfpHead,
    RegistryError,
    ShapeError,
    StateError,
    affinity_forward,
    affinity_forward_naive,
    fuse,
    global_average_pool,
    neighbor_offsets,
    nfp_backward,
    nfp_forward,
    nfp_pool,
    project,
)
from nfp import metrics as M
from nfp.gradcheck import central_difference, check_nfp_backward, relative_error
from nfp.layer import layer_parameter_count, selector_kernels

NEGATED = [m.id for m in M.list_metrics() if m.negated_distance]


def arr(t):
    return np.asarray(t, dtype=np.float64)


class TestConfig:
    @pytest.mark.parametrize("r,n", [(1, 8), (2, 24), (3, 48)])
    def test_neighbor_count(self, r, n):
        assert NfpConfig(radius=r).n_neighbors == n
        assert len(neighbor_offsets(r)) == n

    def test_offsets_row_major(self):
        assert neighbor_offsets(1) == [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        assert neighbor_offsets(1, 15)[0] == (-15, -15)

    def test_kernels(self):
        center, neighbor, diff = selector_kernels(1)
        assert center.sum() == 1 and center[1, 1] == 1
        assert neighbor.shape == (8, 3, 3)
        assert np.all(neighbor.sum(axis=(1, 2)) == 1)
        assert np.all(diff.sum(axis=(1, 2)) == 0)
        assert np.all(diff[:, 1, 1] == 1)

    @pytest.mark.parametrize("kw", [{"radius": 0}, {"dilation": 0}, {"metric": "nope"}, {"projection_out": 0}])
    def test_invalid(self, kw):
        with pytest.raises((ConfigError, RegistryError)):
            NfpConfig(**kw)

    def test_json_round_trip(self):
        cfg = NfpConfig(2, 3, "emd", 16)
        assert NfpConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        assert set(cfg.to_dict()) == {"radius", "dilation", "metric", "projection_out"}


class TestAffinityForward:
    def test_shape_r1(self, rng):
        s = affinity_forward(rng.normal(size=(1, 5, 8, 8)), NfpConfig())
        assert s.shape == (1, 8, 6, 6)

    @pytest.mark.parametrize("r,d,h,w", [(1, 2, 9, 12), (2, 1, 10, 7), (1, 15, 32, 40), (2, 3, 13, 13)])
    def test_shape_law(self, rng, r, d, h, w):
        s = affinity_forward(rng.normal(size=(2, 3, h, w)), NfpConfig(r, d))
        k = 2 * r + 1
        assert s.shape == (2, (k * k) - 1, h - d * (k - 1), w - d * (k - 1))

    def test_window_too_large(self):
        with pytest.raises(ShapeError, match=r"H=20, W=40, k=3, D=15"):
            affinity_forward(np.zeros((1, 2, 20, 40)), NfpConfig(1, 15))

    @pytest.mark.parametrize("metric", NEGATED)
    def test_constant_negated_is_zero(self, metric):
        x = np.full((2, 3, 6, 6), 1.7)
        np.testing.assert_array_equal(arr(affinity_forward(x, NfpConfig(metric=metric))), 0.0)

    def test_constant_cosine_is_one(self):
        x = np.broadcast_to(np.array([0.3, -2.0, 1.0])[None, :, None, None], (1, 3, 7, 7))
        np.testing.assert_allclose(arr(affinity_forward(x, NfpConfig())), 1.0, atol=1e-6)

    @pytest.mark.parametrize("metric", M.METRIC_IDS)
    def test_matches_naive(self, rng, metric):
        x = rng.normal(size=(2, 4, 10, 10)).astype(np.float32)
        cfg = NfpConfig(metric=metric)
        assert np.max(np.abs(arr(affinity_forward(x, cfg)) - arr(affinity_forward_naive(x, cfg)))) <= 1e-6

    def test_naive_dilated(self, rng):
        x = rng.normal(size=(1, 3, 9, 11))
        cfg = NfpConfig(2, 2, "canberra")
        np.testing.assert_allclose(arr(affinity_forward(x, cfg)), arr(affinity_forward_naive(x, cfg)), atol=1e-6)

    def test_hand_computed_entry(self):
        x = np.zeros((1, 2, 3, 3))
        x[0, :, 1, 1] = [1.0, 0.0]
        x[0, :, 0, 0] = [0.0, 2.0]
        x[0, :, 2, 2] = [3.0, 0.0]
        s = arr(affinity_forward(x, NfpConfig(metric="dot")))
        assert s.shape == (1, 8, 1, 1)
        assert s[0, 0, 0, 0] == 0.0  # (-1,-1) neighbor is orthogonal
        assert s[0, 7, 0, 0] == 3.0  # (1,1) neighbor

    @pytest.mark.parametrize("metric", ["cosine", "l1", "emd", "scaled_dot"])
    def test_translation_equivariance(self, rng, metric):
        x = rng.normal(size=(1, 3, 14, 14))
        a, b = 2, 3
        cfg = NfpConfig(metric=metric)
        s = arr(affinity_forward(x, cfg))
        s2 = arr(affinity_forward(np.roll(x, (a, b), axis=(2, 3)), cfg))
        hp, wp = s.shape[2:]
        np.testing.assert_array_equal(s2[:, :, a:, b:], s[:, :, : hp - a, : wp - b])

    @pytest.mark.parametrize("metric", [m.id for m in M.list_metrics() if m.category == 3])
    def test_category3_constant_shift(self, rng, metric):
        x = rng.normal(size=(1, 4, 8, 8))
        cfg = NfpConfig(metric=metric)
        np.testing.assert_allclose(arr(affinity_forward(x + 3.25, cfg)), arr(affinity_forward(x, cfg)), atol=1e-5)

    def test_value_ranges(self, rng):
        x = rng.normal(size=(2, 5, 9, 9))
        for m in NEGATED:
            assert arr(affinity_forward(x, NfpConfig(metric=m))).max() <= 1e-6
        s = arr(affinity_forward(x, NfpConfig()))
        assert s.min() >= -1 - 1e-6 and s.max() <= 1 + 1e-6


class TestPoolProjectFuse:
    def test_pool_constant(self):
        np.testing.assert_array_equal(nfp_pool(np.full((2, 8, 3, 3), -0.5)), -0.5)

    def test_pool_channels(self):
        s = np.broadcast_to(np.arange(8.0)[None, :, None, None], (1, 8, 2, 2))
        np.testing.assert_array_equal(nfp_pool(s), [np.arange(8.0)])

    def test_pool_loop_oracle(self, rng):
        s = rng.normal(size=(2, 8, 3, 4))
        expected = [[sum(s[b, n, i, j] for i in range(3) for j in range(4)) / 12 for n in range(8)] for b in range(2)]
        np.testing.assert_allclose(nfp_pool(s), expected, rtol=1e-12)

    def test_pool_empty(self):
        with pytest.raises(ShapeError):
            nfp_pool(np.zeros((1, 8, 0, 2)))

    def test_project_identity(self, rng):
        pooled = rng.normal(size=(3, 8))
        np.testing.assert_array_equal(project(pooled, NfpHead.identity_head(8)), pooled)

    def test_project_row_sum(self):
        head = NfpHead(np.ones((1, 8)), np.zeros(1))
        np.testing.assert_array_equal(project(np.ones((1, 8)), head), [[8.0]])

    def test_project_loop_oracle(self, rng):
        head = NfpHead(rng.normal(size=(5, 8)), rng.normal(size=5))
        pooled = rng.normal(size=(3, 8))
        expected = np.zeros((3, 5))
        for b in range(3):
            for o in range(5):
                acc = head.bias[o]
                for n in range(8):
                    acc += pooled[b, n] * head.weights[o, n]
                expected[b, o] = acc
        np.testing.assert_allclose(project(pooled, head), expected, rtol=1e-12)

    def test_project_mismatch(self):
        with pytest.raises(ShapeError):
            project(np.zeros((1, 7)), NfpHead.initialize(4, 8))

    def test_fuse(self):
        np.testing.assert_array_equal(fuse([[1, 2]], [[3, 4]]), [[3, 8]])
        g = np.array([[1.5, -2.0]])
        np.testing.assert_array_equal(fuse(g, np.ones_like(g)), g)
        np.testing.assert_array_equal(fuse(g, np.zeros_like(g)), 0.0)

    def test_fuse_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(np.zeros((1, 2)), np.zeros((1, 3)))


class TestHead:
    def test_parameter_count(self):
        head = NfpHead.initialize(960, 8)
        assert head.parameter_count == 960 * 8 + 960 == 8640
        assert layer_parameter_count(960, NfpConfig()) == 8640

    def test_init_bounds_and_seed(self):
        h1, h2 = NfpHead.initialize(16, 8, seed=5), NfpHead.initialize(16, 8, seed=5)
        np.testing.assert_array_equal(h1.weights, h2.weights)
        assert np.abs(h1.weights).max() <= 1 / np.sqrt(8)
        np.testing.assert_array_equal(h1.bias, 0.0)

    def test_save_load(self, tmp_path):
        head = NfpHead.initialize(6, 8, seed=1)
        head.bias = np.arange(6.0)
        cfg = NfpConfig(1, 2, "l2")
        head.save(tmp_path, cfg)
        back, cfg2 = NfpHead.load(tmp_path)
        assert cfg2 == cfg
        np.testing.assert_array_equal(back.weights, head.weights.astype(np.float32))
        np.testing.assert_array_equal(back.bias, head.bias)


class TestForwardBackward:
    def test_constant_cosine_branch(self):
        x = np.full((2, 3, 6, 6), 0.4)
        feats, cache = nfp_forward(x, NfpConfig(), NfpHead.initialize(3, 8))
        np.testing.assert_allclose(cache.pooled, 1.0, atol=1e-6)
        assert feats.shape == (2, 3)

    @pytest.mark.parametrize("metric", ["cosine", "emd", "l1"])
    def test_compositional_oracle(self, rng, metric):
        x = rng.normal(size=(2, 4, 7, 8))
        cfg = NfpConfig(metric=metric)
        head = NfpHead(rng.normal(size=(4, 8)), rng.normal(size=4))
        feats, _ = nfp_forward(x, cfg, head)
        expected = fuse(global_average_pool(x), project(nfp_pool(affinity_forward_naive(x, cfg)), head))
        np.testing.assert_allclose(feats, expected, atol=1e-5)

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            nfp_forward(rng.normal(size=(1, 3, 6, 6)), NfpConfig(), NfpHead.initialize(4, 8))

    def test_missing_cache(self):
        with pytest.raises(StateError):
            nfp_backward(np.zeros((1, 3)), None, NfpConfig(), NfpHead.initialize(3, 8))

    def test_zero_grad(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        cfg, head = NfpConfig(), NfpHead.initialize(3, 8, seed=2)
        _, cache = nfp_forward(x, cfg, head)
        gx, gw, gb = nfp_backward(np.zeros((2, 3)), cache, cfg, head)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_dot_constant_input_fd(self):
        x = np.full((2, 3, 5, 5), 0.7)
        cfg = NfpConfig(metric="dot")
        head = NfpHead(np.random.default_rng(0).normal(size=(3, 8)), np.array([0.1, -0.2, 0.3]))
        _, cache = nfp_forward(x, cfg, head)
        gx, gw, gb = nfp_backward(np.ones((2, 3)), cache, cfg, head)

        def loss(xv=x, w=head.weights, b=head.bias):
            return float(np.sum(nfp_forward(xv, cfg, NfpHead(w, b))[0]))

        assert relative_error(gw, central_difference(lambda w: loss(w=w), head.weights, 1e-3)) < 1e-6
        assert relative_error(gb, central_difference(lambda b: loss(b=b), head.bias, 1e-3)) < 1e-6
        assert relative_error(gx, central_difference(lambda v: loss(xv=v), x, 1e-3)) < 1e-6

    def test_cosine_fd(self):
        res = check_nfp_backward("cosine", trials=10, tolerance=1e-3, seed=11)
        assert res.passed, res.max_error

    @pytest.mark.parametrize("metric,r,d", [("l2", 1, 2), ("pearson", 2, 1), ("scs", 1, 1), ("gfc", 1, 1)])
    def test_other_metrics_fd(self, metric, r, d):
        shape = (2, 3, 7, 7) if r == 1 else (1, 3, 6, 6)
        res = check_nfp_backward(metric, trials=3, tolerance=1e-3, seed=5, shape=shape, radius=r, dilation=d)
        assert res.passed, res.max_error

    def test_numeric_fallback_backward(self):
        res = check_nfp_backward("hellinger", trials=3, tolerance=1e-2, seed=2, shape=(1, 4, 5, 5))
        assert res.passed, res.max_error

    def test_numeric_fallback_required(self, rng):
        x = rng.normal(size=(1, 3, 5, 5))
        cfg, head = NfpConfig(metric="emd"), NfpHead.initialize(3, 8)
        _, cache = nfp_forward(x, cfg, head)
        with pytest.raises(RegistryError):
            nfp_backward(np.ones((1, 3)), cache, cfg, head)

    def test_fusion_identity(self, rng):
        x = rng.normal(size=(2, 4, 6, 7))
        cfg = NfpConfig()
        ones_head = NfpHead(np.zeros((4, 8)), np.ones(4))
        feats, cache = nfp_forward(x, cfg, ones_head)
        np.testing.assert_array_equal(feats, global_average_pool(x))
        g = rng.normal(size=(2, 4))
        gx, _, _ = nfp_backward(g, cache, cfg, ones_head)
        np.testing.assert_array_equal(gx, np.broadcast_to(g[:, :, None, None] / 42, x.shape))
