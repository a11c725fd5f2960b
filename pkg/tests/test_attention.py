import math

import numpy as np
import pytest

from conftest import brute_cdf, brute_region_maps, random_stochastic
from mancount import ndgrad as nd
from mancount.attention import (
    AttentionParams,
    CoverageMaps,
    RegionMaps,
    attention_combined,
    attention_global,
    attention_lra,
    coverage_maps,
    export_region_pgms,
    hard_region_map,
    learnable_region_maps,
    region_maps_from_arrays,
)
from mancount.errors import BoundsError, DimensionError
from mancount.ndgrad import Tensor
from mancount.synthcrowd import read_pgm


def delta_rows(point, w, h):
    """Coverage matrix whose every row is a point mass at grid cell ``point``."""
    n = w * h
    c = np.zeros((n, n))
    c[:, point[1] * w + point[0]] = 1.0
    return c


def params(rng, d, zero=()):
    p = AttentionParams.random(d, rng, requires_grad=False)
    for name in zero:
        setattr(p, name, Tensor(np.zeros((d, d))))
    return p


class TestHardRegion:
    def test_inner_square(self):
        r = hard_region_map((1, 1), (2, 2), 4, 4)
        assert r.sum() == 4
        assert r[1:3, 1:3].tolist() == [[1, 1], [1, 1]]

    def test_full_grid_is_all_ones(self):
        np.testing.assert_array_equal(hard_region_map((0, 0), (3, 4), 4, 5), np.ones((4, 5)))

    def test_inverted_rectangle_is_empty(self):
        assert hard_region_map((2, 2), (1, 1), 4, 4).sum() == 0

    def test_out_of_grid(self):
        with pytest.raises(BoundsError):
            hard_region_map((0, 0), (4, 1), 4, 4)


class TestCoverage:
    def test_zero_query_weights_give_uniform_rows(self, rng):
        x = Tensor(rng.standard_normal((6, 3)))
        cov = coverage_maps(x, x, params(rng, 3, zero=("wq1",)))
        np.testing.assert_allclose(cov.c1.data, np.full((6, 6), 1 / 6), atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.standard_normal((12, 4)))
        cov = coverage_maps(x, x, params(rng, 4))
        for c in (cov.c1.data, cov.c2.data):
            assert np.all(c >= 0)
            np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-6)

    def test_gradcheck(self, rng):
        p = params(rng, 3)
        probe = rng.standard_normal((6, 6))

        def f(x, w1, w2):
            pp = AttentionParams(p.wq_glb, p.wk_glb, p.wv, w1, p.wk1, w2, p.wk2, p.wq_loc, p.wk_loc)
            cov = coverage_maps(x, x, pp)
            return nd.tsum(nd.hadamard(cov.c1 + cov.c2, Tensor(probe)))

        xs = [Tensor(rng.standard_normal((6, 3))), Tensor(rng.standard_normal((3, 3))),
              Tensor(rng.standard_normal((3, 3)))]
        assert nd.finite_diff_check(f, xs) < 1e-5

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            coverage_maps(Tensor(np.ones((4, 3))), Tensor(np.ones((5, 3))), params(rng, 3))
        with pytest.raises(DimensionError):
            coverage_maps(Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))), params(rng, 3))


class TestRegionMaps:
    def test_point_masses_reproduce_hard_filter(self):
        reg = region_maps_from_arrays(delta_rows((1, 1), 4, 4), delta_rows((2, 2), 4, 4), 4, 4)
        hard = hard_region_map((1, 1), (2, 2), 4, 4)
        for i in range(16):
            np.testing.assert_array_equal(reg.rtilde.data[i], hard)
        # the reversed pairing contributes nothing for these vertices
        assert np.all(reg.ur1.data * reg.bl2.data == 0)

    def test_uniform_two_by_two(self):
        c = np.full((4, 4), 0.25)
        reg = region_maps_from_arrays(c, c, 2, 2)
        first = reg.bl1.data[0] * reg.ur2.data[0]
        assert first[0, 0] == 0.25 and first[1, 1] == 0.25
        assert first[1, 0] == 0.25 and first[0, 1] == 0.25
        np.testing.assert_allclose(reg.rtilde.data[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(reg.rtilde.data[0], brute_region_maps(c, c, 2, 2)[0], atol=1e-15)

    def test_matches_brute_force(self, rng):
        w, h = 4, 3
        c1, c2 = random_stochastic(rng, w * h), random_stochastic(rng, w * h)
        reg = region_maps_from_arrays(c1, c2, w, h)
        np.testing.assert_allclose(reg.rtilde.data, brute_region_maps(c1, c2, w, h), rtol=0, atol=1e-12)

    def test_token_order_of_rows(self, rng):
        # row i of a coverage matrix is query i; its map is indexed [x, y]
        w, h = 3, 2
        c = np.zeros((6, 6))
        c[4, 1 * w + 2] = 1.0  # query 4 covers cell (2, 1)
        c[np.arange(6) != 4, 0] = 1.0
        cov = CoverageMaps(Tensor(c), Tensor(c))
        assert cov.row_map(1, 4, w, h)[2, 1] == 1.0
        reg = learnable_region_maps(cov, w, h)
        assert reg.bl1.data[4][2, 1] == 1.0 and reg.bl1.data[4][1, 1] == 0.0

    def test_bounds_and_monotonicity(self, rng):
        w, h = 5, 4
        reg = region_maps_from_arrays(random_stochastic(rng, 20), random_stochastic(rng, 20), w, h)
        for cdf, sign in ((reg.bl1, 1), (reg.bl2, 1), (reg.ur1, -1), (reg.ur2, -1)):
            a = cdf.data
            assert np.all((a >= -1e-15) & (a <= 1 + 1e-12))
            assert np.all(sign * np.diff(a, axis=1) >= -1e-15)
            assert np.all(sign * np.diff(a, axis=2) >= -1e-15)
        np.testing.assert_allclose(reg.bl1.data[:, -1, -1], 1.0, atol=1e-6)
        assert np.all((reg.rtilde.data >= 0) & (reg.rtilde.data <= 2))

    def test_grid_mismatch(self, rng):
        c = random_stochastic(rng, 6)
        with pytest.raises(DimensionError):
            region_maps_from_arrays(c, c, 4, 2)

    def test_export_pgm(self, tmp_path):
        reg = region_maps_from_arrays(delta_rows((0, 0), 3, 2), delta_rows((2, 1), 3, 2), 3, 2)
        (path,) = export_region_pgms(reg, [(1, 1)], str(tmp_path / "r"))
        img = read_pgm(path)
        assert img.shape == (2, 3)  # rows are y
        np.testing.assert_array_equal(img, np.full((2, 3), 128))  # 1.0 of [0, 2]
        with pytest.raises(BoundsError):
            export_region_pgms(reg, [(3, 0)], str(tmp_path / "r"))


class TestAttention:
    def test_all_ones_region_equals_global(self, rng):
        w, h, d = 3, 3, 4
        p = params(rng, d)
        p.wq_loc, p.wk_loc = p.wq_glb, p.wk_glb
        x = Tensor(rng.standard_normal((w * h, d)))
        ones = RegionMaps(Tensor(np.ones((w * h, w, h))), w, h)
        np.testing.assert_allclose(attention_lra(x, x, x, p, ones).data,
                                   attention_global(x, x, x, p).data, rtol=0, atol=1e-12)

    def test_rows_are_convex_combinations(self, rng):
        w, h, d = 3, 4, 5
        p = params(rng, d)
        q, k, v = (Tensor(rng.standard_normal((w * h, d))) for _ in range(3))
        regions = learnable_region_maps(coverage_maps(q, k, p), w, h)
        values = (v @ p.wv).data
        lo, hi = values.min(axis=0), values.max(axis=0)
        for out in (attention_lra(q, k, v, p, regions).data, attention_global(q, k, v, p).data):
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_zero_query_is_column_mean(self, rng):
        p = params(rng, 3, zero=("wq_glb",))
        x = Tensor(rng.standard_normal((7, 3)))
        out = attention_global(x, x, x, p).data
        np.testing.assert_allclose(out, np.tile((x.data @ p.wv.data).mean(axis=0), (7, 1)), atol=1e-12)

    def test_single_token(self, rng):
        p = params(rng, 3)
        x = Tensor(rng.standard_normal((1, 3)))
        np.testing.assert_allclose(attention_global(x, x, x, p).data, x.data @ p.wv.data, atol=1e-14)

    def test_global_is_permutation_equivariant(self, rng):
        p = params(rng, 4)
        x = rng.standard_normal((9, 4))
        perm = rng.permutation(9)
        out = attention_global(Tensor(x), Tensor(x), Tensor(x), p).data
        out_p = attention_global(Tensor(x[perm]), Tensor(x[perm]), Tensor(x[perm]), p).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_lra_is_position_aware(self, rng):
        # the region branch sees the grid, so permuting tokens is not an equivariance
        w, h, d = 3, 3, 4
        p = params(rng, d)
        x = rng.standard_normal((9, d))
        perm = rng.permutation(9)

        def run(t):
            t = Tensor(t)
            return attention_combined(t, t, t, p, learnable_region_maps(coverage_maps(t, t, p), w, h)).data

        assert not np.allclose(run(x[perm]), run(x)[perm])

    def test_combined_decomposes(self, rng):
        w, h, d = 4, 2, 3
        p = params(rng, d)
        x = Tensor(rng.standard_normal((w * h, d)))
        regions = learnable_region_maps(coverage_maps(x, x, p), w, h)
        total = attention_combined(x, x, x, p, regions).data
        parts = attention_global(x, x, x, p).data + attention_lra(x, x, x, p, regions).data
        np.testing.assert_allclose(total, parts, rtol=0, atol=1e-12)
        assert total.shape == (w * h, d)

    def test_zero_values_give_zero_output(self, rng):
        p = params(rng, 3, zero=("wv",))
        x = Tensor(rng.standard_normal((4, 3)))
        regions = learnable_region_maps(coverage_maps(x, x, p), 2, 2)
        assert np.all(attention_combined(x, x, x, p, regions).data == 0)

    def test_end_to_end_gradcheck(self, rng):
        w, h, d = 2, 3, 3
        names = ("wq_glb", "wk_glb", "wv", "wq1", "wk1", "wq2", "wk2", "wq_loc", "wk_loc")
        probe = Tensor(rng.standard_normal((w * h, d)))

        def f(x, *ws):
            p = AttentionParams(**dict(zip(names, ws)))
            reg = learnable_region_maps(coverage_maps(x, x, p), w, h)
            return nd.tsum(nd.hadamard(attention_lra(x, x, x, p, reg), probe))

        xs = [Tensor(rng.standard_normal((w * h, d)))] + [Tensor(rng.standard_normal((d, d))) for _ in names]
        assert nd.finite_diff_check(f, xs) < 1e-4

    def test_logit_scaling_uses_sqrt_d(self, rng):
        d = 4
        p = params(rng, d)
        x = rng.standard_normal((5, d))
        logits = (x @ p.wq_glb.data) @ (x @ p.wk_glb.data).T / math.sqrt(d)
        att = np.exp(logits - logits.max(axis=1, keepdims=True))
        att /= att.sum(axis=1, keepdims=True)
        t = Tensor(x)
        np.testing.assert_allclose(attention_global(t, t, t, p).data, att @ (x @ p.wv.data), atol=1e-12)

    def test_params_validate_shapes(self, rng):
        with pytest.raises(DimensionError):
            AttentionParams(Tensor(np.ones((3, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones((3, 3))))
