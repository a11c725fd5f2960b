import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_cdf
from mancount import ndgrad as nd
from mancount.errors import ConfigurationError, ContractError, DimensionError, EvaluationError, RankError
from mancount.ndgrad import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def weighted(out, w):
    return nd.tsum(nd.hadamard(out, Tensor(w)))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nd.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_hand_expansion(self):
        assert nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient(self, rng):
        w = rng.standard_normal((5, 3))
        err = nd.finite_diff_check(lambda a, b: weighted(a @ b, w),
                                   [Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((4, 3)))])
        assert err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(nd.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_single_column(self):
        assert nd.softmax_rows(Tensor([[7.5]])).data.tolist() == [[1.0]]

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        a = nd.softmax_rows(Tensor(x)).data
        b = nd.softmax_rows(Tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_rows_are_distributions(self, x):
        y = nd.softmax_rows(Tensor(x)).data
        assert np.all((y >= 0) & (y <= 1))
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


class TestCumsum2d:
    def test_uniform_bl(self):
        out = nd.cumsum2d(Tensor(np.full((2, 2), 0.25)), "bl").data
        assert out[0, 0] == 0.25 and out[1, 0] == 0.5 and out[0, 1] == 0.5 and out[1, 1] == 1.0

    def test_point_mass(self):
        c = np.zeros((3, 3))
        c[1, 1] = 1.0
        out = nd.cumsum2d(Tensor(c), "bl").data
        xs, ys = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
        np.testing.assert_array_equal(out, ((xs >= 1) & (ys >= 1)).astype(float))

    @pytest.mark.parametrize("direction", ["bl", "ur"])
    def test_matches_brute_force(self, rng, direction):
        c = rng.standard_normal((8, 8))
        np.testing.assert_allclose(nd.cumsum2d(Tensor(c), direction).data, brute_cdf(c, direction),
                                   rtol=0, atol=1e-12)

    def test_corners_hold_total_mass(self, rng):
        c = rng.uniform(size=(5, 7))
        assert abs(nd.cumsum2d(Tensor(c), "bl").data[-1, -1] - c.sum()) < 1e-12
        assert abs(nd.cumsum2d(Tensor(c), "ur").data[0, 0] - c.sum()) < 1e-12

    def test_monotone_for_nonnegative(self, rng):
        c = rng.uniform(size=(6, 5))
        bl = nd.cumsum2d(Tensor(c), "bl").data
        ur = nd.cumsum2d(Tensor(c), "ur").data
        assert np.all(np.diff(bl, axis=0) >= 0) and np.all(np.diff(bl, axis=1) >= 0)
        assert np.all(np.diff(ur, axis=0) <= 0) and np.all(np.diff(ur, axis=1) <= 0)

    def test_bl_gradient_is_ur_cumsum(self, rng):
        c = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        g = rng.standard_normal((4, 5))
        nd.backward(weighted(nd.cumsum2d(c, "bl"), g))
        np.testing.assert_allclose(c.grad, brute_cdf(g, "ur"), atol=1e-12)

    def test_linear_functional_gradcheck(self, rng):
        w = rng.standard_normal((5, 4))
        assert nd.finite_diff_check(lambda a: weighted(nd.cumsum2d(a, "bl"), w),
                                    Tensor(rng.standard_normal((5, 4)))) < 1e-9

    def test_rank_error(self):
        with pytest.raises(RankError):
            nd.cumsum2d(Tensor(np.ones((2, 2, 2))))
        with pytest.raises(RankError):
            nd.cumsum2d_stack(Tensor(np.ones((2, 2))))


class TestElementwise:
    def test_hadamard(self):
        assert nd.ewise("hadamard", Tensor([1.0, 2, 3]), Tensor([4.0, 5, 6])).data.tolist() == [4, 10, 18]

    def test_relu(self):
        assert nd.ewise("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_relu_subgradient_zero_at_kink(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        nd.backward(nd.tsum(nd.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    @pytest.mark.parametrize("kind", ["add", "sub", "hadamard", "relu", "abs", "neg", "sqrt", "scale"])
    def test_gradcheck(self, rng, kind):
        w = rng.standard_normal((3, 3))
        if kind in ("add", "sub", "hadamard"):
            xs = [Tensor(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3)))]
            f = lambda a, b: weighted(nd.ewise(kind, a, b), w)
        elif kind == "scale":
            xs = [Tensor(rng.standard_normal((3, 3)))]
            f = lambda a: weighted(nd.ewise("scale", a, 2.5), w)
        else:
            x = rng.uniform(0.5, 2.0, (3, 3)) if kind == "sqrt" else rng.standard_normal((3, 3))
            xs = [Tensor(x)]
            f = lambda a: weighted(nd.ewise(kind, a), w)
        assert nd.finite_diff_check(f, xs) < 1e-6

    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            nd.ewise("exp", Tensor([1.0]))


class TestConv2d:
    def test_scaling(self):
        out = nd.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_overlap_counting(self):
        out = nd.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), pad=1).data[0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4

    def test_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 5, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        out = nd.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    ref = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
                    assert abs(out[o, i, j] - ref) < 1e-12

    def test_gradcheck(self, rng):
        g = rng.standard_normal((3, 5, 5))
        xs = [Tensor(rng.standard_normal((2, 5, 5))), Tensor(rng.standard_normal((3, 2, 3, 3)))]
        assert nd.finite_diff_check(lambda x, w: weighted(nd.conv2d(x, w, pad=1), g), xs) < 1e-5

    def test_non_integral_extent(self):
        with pytest.raises(ConfigurationError):
            nd.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            nd.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


class TestUpsample:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4))
        np.testing.assert_array_equal(nd.upsample_nearest(Tensor(x), 1).data, x)

    def test_replication(self):
        assert nd.upsample_nearest(Tensor(np.full((1, 1, 1), 5.0)), 2).data.tolist() == [[[5, 5], [5, 5]]]

    def test_conservation(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert abs(nd.upsample_nearest(Tensor(x), 3).data.sum() - 9 * x.sum()) < 1e-10

    def test_bad_factor(self):
        with pytest.raises(ConfigurationError):
            nd.upsample_nearest(Tensor(np.ones((1, 2, 2))), 0)


class TestBackward:
    def test_linear(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        nd.backward(nd.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        nd.backward(nd.scale(nd.tsum(nd.hadamard(x, x)), 0.5))
        np.testing.assert_allclose(x.grad, x.data, atol=1e-12)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            nd.backward(nd.relu(x))

    def test_tape_order_and_single_visit(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        y = nd.relu(x)
        z = nd.hadamard(y, y) + y  # y feeds two consumers
        tape = nd.backward(nd.tsum(z))
        ids = [n.id for n in tape.nodes]
        assert ids == sorted(ids)
        position = {n.id: k for k, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node.parents:
                if parent.node is not None:
                    assert position[parent.node.id] < position[node.id]
        assert sorted(tape.visited) == sorted(set(tape.visited)) == ids

    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        nd.backward(nd.tsum(x * x + x))
        assert x.grad.tolist() == [7.0]

    def test_deterministic_bits(self, rng):
        x0 = rng.standard_normal((4, 5))
        w = rng.standard_normal((5, 4))

        def run():
            x = Tensor(x0, requires_grad=True)
            out = nd.softmax_rows(nd.matmul(x, Tensor(w)))
            nd.backward(nd.tsum(nd.hadamard(nd.cumsum2d(out, "ur"), out)))
            return x.grad

        assert run().tobytes() == run().tobytes()


class TestFiniteDiff:
    def test_sum_of_squares(self, rng):
        assert nd.finite_diff_check(lambda a: nd.tsum(nd.hadamard(a, a)),
                                    Tensor(rng.standard_normal((3, 4)))) < 1e-9

    def test_softmax_first_column(self, rng):
        pick = np.zeros((4, 5))
        pick[:, 0] = 1.0
        assert nd.finite_diff_check(lambda a: weighted(nd.softmax_rows(a), pick),
                                    Tensor(rng.standard_normal((4, 5)))) < 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_is_evaluation_error(self):
        with pytest.raises(EvaluationError):
            nd.finite_diff_check(lambda a: nd.tsum(nd.sqrt(a)), Tensor([-1.0, 1.0]))

    def test_detects_wrong_gradient(self, rng, monkeypatch):
        monkeypatch.setattr(nd.Relu, "backward", staticmethod(lambda ctx, g: (2.0 * g,)))
        err = nd.finite_diff_check(lambda a: nd.tsum(nd.relu(a)), Tensor(rng.uniform(1, 2, 4)))
        assert err > 0.5


class TestMisc:
    def test_flatten_convention(self):
        w, h = 3, 2
        fm = np.zeros((1, w, h))
        for x in range(w):
            for y in range(h):
                fm[0, x, y] = 10 * x + y
        tokens = nd.flatten_spatial(Tensor(fm)).data[:, 0]
        for x in range(w):
            for y in range(h):
                assert tokens[y * w + x] == 10 * x + y
        np.testing.assert_array_equal(nd.unflatten_spatial(nd.flatten_spatial(Tensor(fm)), w, h).data, fm)

    def test_tensors_are_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_flop_counter(self):
        with nd.count_flops() as c:
            nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
            nd.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((5, 2, 3, 3))), pad=1)
        assert c.macs == 2 * 3 * 4 + 16 * 2 * 9 * 5
        assert c.flops == 2 * c.macs

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_debug_mode_flags_non_finite(self, monkeypatch):
        monkeypatch.setattr(nd, "DEBUG", True)
        with pytest.raises(EvaluationError):
            nd.scale(Tensor([1e308]), 10.0)
